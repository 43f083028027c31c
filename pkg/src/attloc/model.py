"""Chunk-level convolutional gated recurrent tagger with attention and localization.

Per frame: a 1-D convolution over the mel axis with global max pooling, an
attention scalar that gates the conv features and the frame outputs, and a
softmax localization vector that weights the chunk-level average of each tag.
Between them sit three bidirectional GRU layers and a ReLU feed-forward layer.

Parameters live in a plain ``dict`` of float64 arrays keyed by ``param_shapes()``.
Every batched array below has shape (B, T, ...) with B chunks of equal length T.
"""

import enum
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .features import N_MELS
from .numerics import check_finite, relu, sigmoid, softmax_rows

N_TAGS = 7
N_FILTERS = 128
KERNEL = 30
N_POS = N_MELS - KERNEL + 1
HIDDEN = 128
N_LAYERS = 3
FNN_UNITS = 500
DIRECTIONS = ("fwd", "bwd")
GATES = ("z", "r", "h")
LOC_EPS = 1e-8


class Mode(enum.Enum):
    BASELINE_CGRNN = "baseline"
    ATT_LOC = "attloc"


def param_shapes():
    """Ordered mapping of parameter name to shape."""
    shapes = {"cnn_w": (N_FILTERS, KERNEL), "cnn_b": (N_FILTERS,)}
    for layer in range(1, N_LAYERS + 1):
        n_in = N_FILTERS if layer == 1 else 2 * HIDDEN
        for d in DIRECTIONS:
            pre = f"gru{layer}_{d}_"
            for g in GATES:
                shapes[pre + "W" + g] = (HIDDEN, n_in)
            for g in GATES:
                shapes[pre + "U" + g] = (HIDDEN, HIDDEN)
            for g in GATES:
                shapes[pre + "b" + g] = (HIDDEN,)
    shapes.update({
        "fnn_w": (FNN_UNITS, 2 * HIDDEN), "fnn_b": (FNN_UNITS,),
        "out_w": (N_TAGS, FNN_UNITS), "out_b": (N_TAGS,),
        "att_w": (1, N_MELS), "att_b": (1,),
        "loc_w": (N_TAGS, N_MELS), "loc_b": (N_TAGS,),
    })
    return shapes


ATTLOC_PARAMS = ("att_w", "att_b", "loc_w", "loc_b")


def n_params():
    return sum(int(np.prod(s)) for s in param_shapes().values())


def init_params(rng):
    """Glorot-uniform weights, zero biases."""
    params = {}
    for name, shape in param_shapes().items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zero_params():
    return {name: np.zeros(shape) for name, shape in param_shapes().items()}


def validate_params(params):
    shapes = param_shapes()
    if set(params) != set(shapes):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ValueError(f"parameter set mismatch: missing={missing} extra={extra}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        check_finite(params[name], f"parameter {name}")


# ---------------------------------------------------------------- per-frame pieces


def _patches(x):
    # (..., 40) -> (..., 11, 30)
    return sliding_window_view(x, KERNEL, axis=-1)


def cnn_frame(x, params):
    """Conv over the 40 mel bins (11 valid positions), ReLU, max over positions."""
    conv = _patches(np.asarray(x, dtype=np.float64)) @ params["cnn_w"].T + params["cnn_b"]
    return relu(conv.max(axis=-2))


def attention_gate(x, params):
    """Frame importance in (0, 1), shared by all tags."""
    a = np.asarray(x, dtype=np.float64) @ params["att_w"].T + params["att_b"]
    return sigmoid(a)[..., 0]


def localize_frame(x, params):
    """Per-tag localization posterior for a frame; sums to one over tags."""
    return softmax_rows(np.asarray(x, dtype=np.float64) @ params["loc_w"].T + params["loc_b"])


# ---------------------------------------------------------------- GRU


def _gru_weights(params, layer, d):
    pre = f"gru{layer}_{d}_"
    W = np.concatenate([params[pre + "W" + g] for g in GATES], axis=0)
    Uzr = np.concatenate([params[pre + "Uz"], params[pre + "Ur"]], axis=0)
    b = np.concatenate([params[pre + "b" + g] for g in GATES])
    return W, Uzr, params[pre + "Uh"], b


def _gru_scan(x, W, Uzr, Uh, b):
    """One direction over a time-major (T, B, in) sequence from a zero state."""
    T, B, _ = x.shape
    H2 = 2 * HIDDEN
    xp = (x.reshape(T * B, -1) @ W.T + b).reshape(T, B, -1)
    h = np.zeros((B, HIDDEN))
    hs = np.empty((T, B, HIDDEN))
    hprev = np.empty((T, B, HIDDEN))
    zr = np.empty((T, B, H2))
    hh = np.empty((T, B, HIDDEN))
    rh = np.empty((T, B, HIDDEN))
    UzrT, UhT = Uzr.T.copy(), Uh.T.copy()
    for t in range(T):
        hprev[t] = h
        g = sigmoid(xp[t, :, :H2] + h @ UzrT)
        zr[t] = g
        np.multiply(g[:, HIDDEN:], h, out=rh[t])
        cand = np.tanh(xp[t, :, H2:] + rh[t] @ UhT)
        hh[t] = cand
        h = h + g[:, :HIDDEN] * (cand - h)
        hs[t] = h
    return hs, (x, hprev, zr, hh, rh)


def _gru_scan_vjp(dH, cache, W, Uzr, Uh):
    """Adjoint of ``_gru_scan``: returns (dx, dW, dUzr, dUh, db)."""
    x, hprev, zr, hh, rh = cache
    T, B, _ = dH.shape
    H2 = 2 * HIDDEN
    da = np.empty((T, B, 3 * HIDDEN))
    carry = np.zeros((B, HIDDEN))
    for t in range(T - 1, -1, -1):
        dh = dH[t] + carry
        hp = hprev[t]
        z, r = zr[t, :, :HIDDEN], zr[t, :, HIDDEN:]
        cand = hh[t]
        dcand = dh * z
        carry = dh - dcand
        dah = da[t, :, H2:]
        np.multiply(dcand, 1.0 - cand * cand, out=dah)
        drh = dah @ Uh
        carry += drh * r
        da[t, :, :HIDDEN] = dh * (cand - hp) * z * (1.0 - z)
        da[t, :, HIDDEN:H2] = drh * hp * r * (1.0 - r)
        carry += da[t, :, :H2] @ Uzr
    flat = da.reshape(T * B, -1)
    dW = flat.T @ x.reshape(T * B, -1)
    db = flat.sum(axis=0)
    dUzr = flat[:, :H2].T @ hprev.reshape(T * B, HIDDEN)
    dUh = flat[:, H2:].T @ rh.reshape(T * B, HIDDEN)
    dx = (flat @ W).reshape(T, B, -1)
    return dx, dW, dUzr, dUh, db


def _bigru(seq, params, layer):
    """Time-major (T, B, in) -> (T, B, 256), forward half then backward half."""
    outs, caches = [], []
    for d in DIRECTIONS:
        W, Uzr, Uh, b = _gru_weights(params, layer, d)
        xs = seq if d == "fwd" else seq[::-1]
        hs, cache = _gru_scan(xs, W, Uzr, Uh, b)
        outs.append(hs if d == "fwd" else hs[::-1])
        caches.append(cache)
    return np.concatenate(outs, axis=-1), caches


def bigru_layer(seq, params, layer):
    """Bidirectional GRU layer ``layer`` (1-3) on a (T, in) sequence -> (T, 256)."""
    seq = np.asarray(seq, dtype=np.float64)
    out, _ = _bigru(seq[:, None], params, layer)
    return out[:, 0]


def _bigru_vjp(dout, caches, params, layer, grads):
    dx_total = None
    for i, d in enumerate(DIRECTIONS):
        pre = f"gru{layer}_{d}_"
        W, Uzr, Uh, _ = _gru_weights(params, layer, d)
        dH = dout[..., i * HIDDEN:(i + 1) * HIDDEN]
        if d == "bwd":
            dH = dH[::-1]
        dx, dW, dUzr, dUh, db = _gru_scan_vjp(dH, caches[i], W, Uzr, Uh)
        if d == "bwd":
            dx = dx[::-1]
        for k, g in enumerate(GATES):
            grads[pre + "W" + g] += dW[k * HIDDEN:(k + 1) * HIDDEN]
            grads[pre + "b" + g] += db[k * HIDDEN:(k + 1) * HIDDEN]
        grads[pre + "Uz"] += dUzr[:HIDDEN]
        grads[pre + "Ur"] += dUzr[HIDDEN:]
        grads[pre + "Uh"] += dUh
        dx_total = dx if dx_total is None else dx_total + dx
    return dx_total


# ---------------------------------------------------------------- full graph


@dataclass
class ForwardTrace:
    """Per-frame intermediates of one forward pass.

    Arrays are (B, T, ...) from ``forward_batch`` and (T, ...) from ``forward``.
    ``z_loc`` and ``o_gated`` are None in baseline mode, where ``z_att`` is 1.
    """

    y_cnn: np.ndarray
    z_att: np.ndarray
    y_cnn_gated: np.ndarray
    gru: list
    fnn: np.ndarray
    s: np.ndarray
    o: np.ndarray
    z_loc: np.ndarray | None
    o_gated: np.ndarray | None
    o_chunk: np.ndarray

    def localization_scores(self):
        """z_att(t) * z_loc(t): the per-tag trace used for localization."""
        return self.z_att[..., None] * self.z_loc


def _forward(X, params, mode):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[-1] != N_MELS:
        raise ValueError(f"expected (B, T, {N_MELS}) frames, got {X.shape}")
    if X.shape[1] < 1:
        raise ValueError("chunk has no frames")
    B, T, _ = X.shape
    check_finite(X, "input frames")

    conv = _patches(X) @ params["cnn_w"].T + params["cnn_b"]      # (B,T,11,128)
    pos = conv.argmax(axis=2)                                       # (B,T,128)
    peak = conv.max(axis=2)
    y_cnn = check_finite(relu(peak), "cnn")

    if mode is Mode.ATT_LOC:
        z_att = check_finite(attention_gate(X, params), "attention")
        y_gated = z_att[..., None] * y_cnn
    else:
        z_att = np.ones((B, T))
        y_gated = y_cnn

    seq = np.ascontiguousarray(y_gated.transpose(1, 0, 2))
    gru_out, gru_caches = [], []
    for layer in range(1, N_LAYERS + 1):
        seq, caches = _bigru(seq, params, layer)
        check_finite(seq, f"gru layer {layer}")
        gru_out.append(seq.transpose(1, 0, 2))
        gru_caches.append(caches)
    seq = gru_out[-1]

    fnn = check_finite(relu(seq @ params["fnn_w"].T + params["fnn_b"]), "fnn")
    s = check_finite(fnn @ params["out_w"].T + params["out_b"], "output layer")
    o = sigmoid(s)

    if mode is Mode.ATT_LOC:
        z_loc = check_finite(localize_frame(X, params), "localization")
        o_gated = z_att[..., None] * o * z_loc
        num = o_gated.sum(axis=1)
        mass = z_loc.sum(axis=1)
        den = np.maximum(mass, LOC_EPS)          # floor only matters on underflow
        o_chunk = num / den
    else:
        z_loc = o_gated = num = den = None
        o_chunk = o.mean(axis=1)
    check_finite(o_chunk, "chunk output")

    trace = ForwardTrace(y_cnn, z_att, y_gated, gru_out, fnn, s, o, z_loc, o_gated, o_chunk)
    cache = dict(X=X, mode=mode, pos=pos, peak=peak, gru_caches=gru_caches,
                 num=num, den=den)
    return trace, cache


def forward_batch(X, params, mode=Mode.ATT_LOC):
    return _forward(X, params, mode)[0]


def forward(chunk, params, mode=Mode.ATT_LOC):
    """Run one (T, 40) normalized mel chunk through the network."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.ndim != 2:
        raise ValueError(f"expected (T, {N_MELS}) chunk, got {chunk.shape}")
    tr = forward_batch(chunk[None], params, mode)
    return ForwardTrace(
        tr.y_cnn[0], tr.z_att[0], tr.y_cnn_gated[0], [g[0] for g in tr.gru],
        tr.fnn[0], tr.s[0], tr.o[0],
        None if tr.z_loc is None else tr.z_loc[0],
        None if tr.o_gated is None else tr.o_gated[0],
        tr.o_chunk[0],
    )


def vjp(trace, cache, d_chunk, params):
    """Pull the gradient of a scalar w.r.t. ``o_chunk`` (B, 7) back to every parameter.

    Gradients are summed over the batch. In baseline mode the attention and
    localization entries stay exactly zero.
    """
    grads = {name: np.zeros(shape) for name, shape in param_shapes().items()}
    X, mode = cache["X"], cache["mode"]
    B, T, _ = X.shape
    o = trace.o

    if mode is Mode.ATT_LOC:
        z_att, z_loc = trace.z_att, trace.z_loc
        num, den = cache["num"], cache["den"]
        d_og = np.broadcast_to((d_chunk / den)[:, None, :], o.shape)
        d_den = np.where(den > LOC_EPS, -d_chunk * num / den**2, 0.0)
        d_zloc = np.broadcast_to(d_den[:, None, :], o.shape) \
            + d_og * z_att[..., None] * o
        d_zatt = (d_og * o * z_loc).sum(axis=-1)
        d_o = d_og * z_att[..., None] * z_loc
        d_aloc = z_loc * (d_zloc - (d_zloc * z_loc).sum(axis=-1, keepdims=True))
        grads["loc_w"] += d_aloc.reshape(-1, N_TAGS).T @ X.reshape(-1, N_MELS)
        grads["loc_b"] += d_aloc.sum(axis=(0, 1))
    else:
        d_o = np.broadcast_to(d_chunk[:, None, :] / T, o.shape)

    d_s = d_o * o * (1.0 - o)
    fnn = trace.fnn
    grads["out_w"] += d_s.reshape(-1, N_TAGS).T @ fnn.reshape(-1, FNN_UNITS)
    grads["out_b"] += d_s.sum(axis=(0, 1))
    d_fpre = (d_s @ params["out_w"]) * (fnn > 0)
    h3 = trace.gru[-1]
    grads["fnn_w"] += d_fpre.reshape(-1, FNN_UNITS).T @ h3.reshape(-1, 2 * HIDDEN)
    grads["fnn_b"] += d_fpre.sum(axis=(0, 1))
    d_seq = np.ascontiguousarray((d_fpre @ params["fnn_w"]).transpose(1, 0, 2))
    for layer in range(N_LAYERS, 0, -1):
        d_seq = _bigru_vjp(d_seq, cache["gru_caches"][layer - 1], params, layer, grads)
    d_seq = d_seq.transpose(1, 0, 2)

    if mode is Mode.ATT_LOC:
        d_ycnn = d_seq * z_att[..., None]
        d_zatt = d_zatt + (d_seq * trace.y_cnn).sum(axis=-1)
        d_aatt = d_zatt * z_att * (1.0 - z_att)
        grads["att_w"] += d_aatt.reshape(1, -1) @ X.reshape(-1, N_MELS)
        grads["att_b"] += d_aatt.sum()
    else:
        d_ycnn = d_seq

    # max-pool routes the gradient to the winning position only
    d_peak = d_ycnn * (cache["peak"] > 0)
    d_conv = (np.arange(N_POS)[:, None] == cache["pos"][:, :, None, :]) * d_peak[:, :, None, :]
    grads["cnn_w"] += d_conv.reshape(-1, N_FILTERS).T @ _patches(X).reshape(-1, KERNEL)
    grads["cnn_b"] += d_peak.sum(axis=(0, 1))

    for name, g in grads.items():
        check_finite(g, f"gradient of {name}")
    return grads
