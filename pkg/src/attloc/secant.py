"""Exact loss differences for finite-difference gradient checks.

A plain central difference subtracts two rounded losses of order 1 and loses
everything below ~1e-11 in the quotient.  Here ``L(θ + δ e_i) - L(θ)`` is
carried through the network as a difference from the start: every layer maps
(value, change) to the change of its output using exact secant identities
(e.g. ``tanh(a+d) - tanh(a) = sinh(d) / (cosh(a+d) cosh(a))``), so the
result keeps relative precision however small it is.  No derivative of any
layer is used, which keeps this independent of the hand-written adjoint.

Many perturbations of one tensor are propagated at once along a leading axis.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import DIRECTIONS, GATES, HIDDEN, KERNEL, LOC_EPS, N_LAYERS, Mode
from .numerics import sigmoid, softmax_rows

_CLAMP = 1e-12


class _Perturbation:
    """Coordinates ``index`` of tensor ``name`` shifted by ``delta`` (one per row)."""

    def __init__(self, name, shape, flat_idx, delta):
        self.name = name
        self.delta = np.asarray(delta, dtype=np.float64)
        self.index = np.unravel_index(np.asarray(flat_idx), shape)

    @property
    def k(self):
        return len(self.delta)


def _dsigmoid(a, d):
    # σ(a+d) - σ(a) = -σ(a+d) σ(-a) expm1(-d)
    return -sigmoid(a + d) * sigmoid(-a) * np.expm1(-d)


def _dtanh(a, d):
    # tanh(a+d) - tanh(a) = sinh(d) / (cosh(a+d) cosh(a)); the tanh form below
    # takes over where cosh would overflow
    with np.errstate(over="ignore"):
        small = np.abs(a) + np.abs(d) < 300.0
        u = np.where(small, a, 0.0)
        ratio = np.sinh(d) / (np.cosh(u + d) * np.cosh(u))
    return np.where(small, ratio, np.tanh(d) * (1.0 - np.tanh(a + d) * np.tanh(a)))


def _drelu(a, d):
    out = np.where((a > 0) & (a + d > 0), d, 0.0)
    cross = (a > 0) != (a + d > 0)
    if cross.any():
        out = np.where(cross, np.maximum(a + d, 0.0) - np.maximum(a, 0.0), out)
    return out


def _dproduct(x, dx, y, dy):
    # (x+dx)(y+dy) - xy = dx (y+dy) + x dy; None stands for "no change"
    if dx is None and dy is None:
        return None
    if dx is None:
        return x * dy
    if dy is None:
        return dx * y
    return dx * (y + dy) + x * dy


def _add(a, b):
    if a is None:
        return b
    return a if b is None else a + b


class _Graph:
    def __init__(self, params, pert):
        self.p = params
        self.pert = pert

    def linear(self, x, dx, w_name, b_name=None):
        """Change of ``x @ W.T + b`` given input change ``dx`` (K, ..., in)."""
        pert, W = self.pert, self.p[w_name]
        out = None if dx is None else dx @ W.T
        if pert.name == w_name:
            j, i = pert.index
            rows = np.arange(pert.k)
            xi = np.moveaxis(x[..., i], -1, 0)                    # (K, ...)
            if dx is not None:
                xi = xi + dx[rows, ..., i]
            if out is None:
                out = np.zeros((pert.k,) + x.shape[:-1] + (W.shape[0],))
            out[rows, ..., j] += xi * pert.delta.reshape((-1,) + (1,) * (x.ndim - 1))
        elif b_name is not None and pert.name == b_name:
            (j,) = pert.index
            if out is None:
                out = np.zeros((pert.k,) + x.shape[:-1] + (W.shape[0],))
            out[np.arange(pert.k), ..., j] += pert.delta.reshape((-1,) + (1,) * (x.ndim - 1))
        return out

    def gru(self, seq, dseq, layer, d):
        """One direction over (T, in) with input change (K, T, in)."""
        pre = f"gru{layer}_{d}_"
        p = self.p
        T = seq.shape[0]
        xp = {g: seq @ p[pre + "W" + g].T + p[pre + "b" + g] for g in GATES}
        dxp = {g: self.linear(seq, dseq, pre + "W" + g, pre + "b" + g) for g in GATES}
        h = np.zeros(HIDDEN)
        dh = None
        hs, dhs = np.empty((T, HIDDEN)), None
        for t in range(T):
            a_z = xp["z"][t] + h @ p[pre + "Uz"].T
            a_r = xp["r"][t] + h @ p[pre + "Ur"].T
            da_z = _add(None if dxp["z"] is None else dxp["z"][:, t], self.linear(h, dh, pre + "Uz"))
            da_r = _add(None if dxp["r"] is None else dxp["r"][:, t], self.linear(h, dh, pre + "Ur"))
            z, r = sigmoid(a_z), sigmoid(a_r)
            dz = None if da_z is None else _dsigmoid(a_z, da_z)
            dr = None if da_r is None else _dsigmoid(a_r, da_r)
            rh = r * h
            drh = _dproduct(r, dr, h, dh)
            a_h = xp["h"][t] + rh @ p[pre + "Uh"].T
            da_h = _add(None if dxp["h"] is None else dxp["h"][:, t], self.linear(rh, drh, pre + "Uh"))
            cand = np.tanh(a_h)
            dcand = None if da_h is None else _dtanh(a_h, da_h)
            gap = cand - h
            dgap = None if dcand is None and dh is None else \
                (dcand if dh is None else (-dh if dcand is None else dcand - dh))
            step = _dproduct(z, dz, gap, dgap)
            h = h + z * gap
            dh = _add(dh, step)
            hs[t] = h
            if dh is not None:
                if dhs is None:
                    dhs = np.zeros((self.pert.k, T, HIDDEN))
                dhs[:, t] = dh
        return hs, dhs

    def bigru(self, seq, dseq, layer):
        outs, douts = [], []
        for d in DIRECTIONS:
            rev = d == "bwd"
            s = seq[::-1] if rev else seq
            ds = None if dseq is None else (dseq[:, ::-1] if rev else dseq)
            hs, dhs = self.gru(s, ds, layer, d)
            outs.append(hs[::-1] if rev else hs)
            douts.append(None if dhs is None else (dhs[:, ::-1] if rev else dhs))
        if douts[0] is None and douts[1] is None:
            return np.concatenate(outs, axis=-1), None
        zero = np.zeros((self.pert.k,) + outs[0].shape)
        douts = [zero if x is None else x for x in douts]
        return np.concatenate(outs, axis=-1), np.concatenate(douts, axis=-1)

    def chunk_output(self, x, mode):
        """Base ``o''`` (7,) and its change (K, 7), or None if untouched."""
        p = self.p
        patches = sliding_window_view(x, KERNEL, axis=-1)                 # (T, 11, 30)
        conv = patches @ p["cnn_w"].T + p["cnn_b"]
        peak = conv.max(axis=1)
        dconv = self.linear(patches, None, "cnn_w", "cnn_b")
        dpeak = None if dconv is None else ((conv - peak[:, None]) + dconv).max(axis=2)
        y = np.maximum(peak, 0.0)
        dy = None if dpeak is None else _drelu(peak, dpeak)

        attloc = mode is Mode.ATT_LOC
        if attloc:
            a = (x @ p["att_w"].T + p["att_b"])[:, 0]
            da = self.linear(x, None, "att_w", "att_b")
            z_att = sigmoid(a)
            dz_att = None if da is None else _dsigmoid(a, da[..., 0])
        else:
            z_att, dz_att = np.ones(x.shape[0]), None
        seq = z_att[:, None] * y
        dseq = _dproduct(z_att[:, None], None if dz_att is None else dz_att[..., None], y, dy)

        for layer in range(1, N_LAYERS + 1):
            seq, dseq = self.bigru(seq, dseq, layer)

        f_pre = seq @ p["fnn_w"].T + p["fnn_b"]
        df_pre = self.linear(seq, dseq, "fnn_w", "fnn_b")
        f = np.maximum(f_pre, 0.0)
        df = None if df_pre is None else _drelu(f_pre, df_pre)
        s = f @ p["out_w"].T + p["out_b"]
        ds = self.linear(f, df, "out_w", "out_b")
        o = sigmoid(s)
        do = None if ds is None else _dsigmoid(s, ds)

        if not attloc:
            return o.mean(axis=0), None if do is None else do.mean(axis=1)

        logits = x @ p["loc_w"].T + p["loc_b"]
        dlogits = self.linear(x, None, "loc_w", "loc_b")
        z_loc = softmax_rows(logits)
        dz_loc = None
        if dlogits is not None:
            # softmax(l + d)_k - softmax(l)_k = z_k (e_k - S) / (1 + S), e = expm1(d), S = Σ z e
            e = np.expm1(dlogits)
            S = (z_loc * e).sum(axis=-1, keepdims=True)
            dz_loc = z_loc * (e - S) / (1.0 + S)
        A = z_att[:, None]
        dA = None if dz_att is None else dz_att[..., None]
        Ao = A * o
        dAo = _dproduct(A, dA, o, do)
        num = (Ao * z_loc).sum(axis=0)
        mass = z_loc.sum(axis=0)
        den = np.maximum(mass, LOC_EPS)
        dgated = _dproduct(Ao, dAo, z_loc, dz_loc)
        if dgated is None:
            return num / den, None
        dnum = dgated.sum(axis=1)
        dden = 0.0
        if dz_loc is not None:
            dmass = dz_loc.sum(axis=1)
            floored = (mass <= LOC_EPS) | (mass + dmass <= LOC_EPS)
            dden = np.where(floored, np.maximum(mass + dmass, LOC_EPS) - den, dmass)
        # (N + dN)/(D + dD) - N/D = (dN D - N dD) / (D (D + dD))
        return num / den, (dnum * den - num * dden) / (den * (den + dden))


def _dbce(c, dc, label):
    """bce(c + dc) - bce(c) per row of ``dc``, via log-ratios."""
    p = np.asarray(label, dtype=np.float64)
    lo, hi = _CLAMP, 1.0 - _CLAMP
    cb = np.clip(c, lo, hi)
    ca = np.clip(c + dc, lo, hi)
    inside = (c > lo) & (c < hi) & (c + dc > lo) & (c + dc < hi)
    d = np.where(inside, dc, ca - cb)
    return -(p * np.log1p(d / cb) + (1.0 - p) * np.log1p(-d / (1.0 - cb))).sum(axis=-1)


def loss_differences(params, chunk, label, mode, name, flat_idx, eps):
    """``L(θ + eps e_i) - L(θ - eps e_i)`` for every flat index ``i`` of tensor ``name``."""
    chunk = np.asarray(chunk, dtype=np.float64)
    flat_idx = np.asarray(flat_idx)
    n = len(flat_idx)
    if n == 0:
        return np.zeros(0)
    shape = params[name].shape
    delta = np.concatenate([np.full(n, eps), np.full(n, -eps)])
    pert = _Perturbation(name, shape, np.concatenate([flat_idx, flat_idx]), delta)
    c, dc = _Graph(params, pert).chunk_output(chunk, mode)
    if dc is None:
        return np.zeros(n)
    dl = _dbce(c, dc, label)
    return dl[:n] - dl[n:]


def base_output(params, chunk, mode):
    """The unperturbed ``o''`` as computed by this module (for cross-checking)."""
    pert = _Perturbation("", (1,), [0], [0.0])
    return _Graph(params, pert).chunk_output(np.asarray(chunk, dtype=np.float64), mode)[0]
