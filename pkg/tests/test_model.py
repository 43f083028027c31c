import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attloc.model import (ATTLOC_PARAMS, DIRECTIONS, Mode, attention_gate, bigru_layer, cnn_frame,
                          forward, init_params, localize_frame, n_params, param_shapes,
                          zero_params)
from attloc.numerics import NumericalError, make_rng


@pytest.fixture(scope="module")
def params():
    return init_params(make_rng(0))


def random_params(seed, scale=1.0):
    p = init_params(make_rng(seed))
    rng = make_rng(seed + 1000)
    for k, v in p.items():
        if v.ndim == 1:
            p[k] = 0.3 * rng.standard_normal(v.shape)
        else:
            p[k] = v * scale
    return p


def test_parameter_count():
    # cnn 3968 + gru 788736 + fnn 128500 + out 3507 + att 41 + loc 287
    assert n_params() == 925039


def test_shapes_listed():
    s = param_shapes()
    assert s["cnn_w"] == (128, 30)
    assert s["gru1_fwd_Wz"] == (128, 128)
    assert s["gru2_bwd_Wh"] == (128, 256)
    assert s["gru3_fwd_Ur"] == (128, 128)
    assert s["fnn_w"] == (500, 256) and s["out_w"] == (7, 500)
    assert s["att_w"] == (1, 40) and s["loc_w"] == (7, 40)


def test_init_deterministic_and_bounded():
    a, b = init_params(make_rng(11)), init_params(make_rng(11))
    for k in a:
        assert np.array_equal(a[k], b[k])
        if a[k].ndim == 1:
            assert not a[k].any()
    assert np.abs(a["cnn_w"]).max() <= np.sqrt(6 / (30 + 128))
    assert abs(np.sqrt(6 / 158) - 0.1948) < 1e-4


def cnn_oracle(x, w, b):
    out = np.empty(128)
    for f in range(128):
        best = -np.inf
        for pos in range(11):
            v = sum(w[f, k] * x[pos + k] for k in range(30)) + b[f]
            best = max(best, max(v, 0.0))
        out[f] = best
    return out


def test_cnn_frame_matches_enumeration():
    p = random_params(2)
    x = make_rng(9).standard_normal(40)
    np.testing.assert_allclose(cnn_frame(x, p), cnn_oracle(x, p["cnn_w"], p["cnn_b"]), rtol=0, atol=1e-12)


def test_cnn_zero_frame_zero_bias(params):
    assert not cnn_frame(np.zeros(40), params).any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_cnn_nonnegative(seed):
    p = random_params(seed % 7)
    assert (cnn_frame(make_rng(seed).standard_normal(40) * 3, p) >= 0).all()


def test_attention_examples(params):
    p = zero_params()
    x = make_rng(1).standard_normal(40)
    assert attention_gate(x, p) == 0.5
    p["att_b"][:] = 10.0
    assert attention_gate(x, p) > 0.9999
    q = dict(params)
    vals = []
    for b in np.linspace(-5, 5, 21):
        q["att_b"] = np.array([b])
        vals.append(attention_gate(x, q))
    assert np.all(np.diff(vals) >= 0)


def test_localization_examples():
    p = zero_params()
    x = make_rng(2).standard_normal(40)
    np.testing.assert_allclose(localize_frame(x, p), np.full(7, 1 / 7), rtol=0, atol=1e-15)
    q = random_params(3)
    z = localize_frame(x, q)
    assert abs(z.sum() - 1) < 1e-12
    q2 = dict(q, loc_b=q["loc_b"] + 4.2)
    np.testing.assert_allclose(localize_frame(x, q2), z, rtol=0, atol=1e-12)


def test_bigru_zero_params_zero_output():
    seq = make_rng(0).standard_normal((9, 128))
    assert not bigru_layer(seq, zero_params(), 1).any()


def swap_directions(p, layer):
    q = dict(p)
    for k in p:
        if k.startswith(f"gru{layer}_fwd_"):
            q[k], q[k.replace("_fwd_", "_bwd_")] = p[k.replace("_fwd_", "_bwd_")], p[k]
    return q


@pytest.mark.parametrize("layer", [1, 2])
def test_bigru_time_reversal(layer):
    p = random_params(4)
    width = 128 if layer == 1 else 256
    seq = make_rng(5).standard_normal((13, width))
    out = bigru_layer(seq, p, layer)
    rev = bigru_layer(seq[::-1], swap_directions(p, layer), layer)[::-1]
    np.testing.assert_allclose(rev[:, :128], out[:, 128:], rtol=0, atol=1e-12)
    np.testing.assert_allclose(rev[:, 128:], out[:, :128], rtol=0, atol=1e-12)


def gru_step(x, h, p, pre):
    sig = lambda a: 1 / (1 + np.exp(-a))
    z = sig(p[pre + "Wz"] @ x + p[pre + "Uz"] @ h + p[pre + "bz"])
    r = sig(p[pre + "Wr"] @ x + p[pre + "Ur"] @ h + p[pre + "br"])
    hh = np.tanh(p[pre + "Wh"] @ x + p[pre + "Uh"] @ (r * h) + p[pre + "bh"])
    return (1 - z) * h + z * hh


def test_bigru_single_frame_is_one_step():
    p = random_params(6)
    x = make_rng(7).standard_normal(128)
    out = bigru_layer(x[None], p, 1)
    for i, d in enumerate(DIRECTIONS):
        np.testing.assert_allclose(out[0, 128 * i:128 * (i + 1)],
                                   gru_step(x, np.zeros(128), p, f"gru1_{d}_"), rtol=0, atol=1e-13)


def test_bigru_matches_stepwise_recurrence():
    p = random_params(8)
    seq = make_rng(8).standard_normal((6, 256))
    out = bigru_layer(seq, p, 2)
    h = np.zeros(128)
    for t in range(6):
        h = gru_step(seq[t], h, p, "gru2_fwd_")
        np.testing.assert_allclose(out[t, :128], h, rtol=0, atol=1e-12)
    h = np.zeros(128)
    for t in reversed(range(6)):
        h = gru_step(seq[t], h, p, "gru2_bwd_")
        np.testing.assert_allclose(out[t, 128:], h, rtol=0, atol=1e-12)


@pytest.mark.parametrize("T", [1, 2, 7, 124])
def test_zero_params_closed_form(T):
    x = make_rng(T).standard_normal((T, 40))
    tr = forward(x, zero_params(), Mode.ATT_LOC)
    np.testing.assert_allclose(tr.z_att, 0.5, rtol=0, atol=0)
    np.testing.assert_allclose(tr.o, 0.5, rtol=0, atol=0)
    np.testing.assert_allclose(tr.z_loc, 1 / 7, rtol=0, atol=1e-16)
    np.testing.assert_allclose(tr.o_chunk, 0.25, rtol=0, atol=1e-12)


def force_attention(p, value):
    q = dict(p)
    q["att_w"] = np.zeros((1, 40))
    q["att_b"] = np.array([{1: 40.0, 0: -800.0}[value]])
    return q


def test_reduction_to_frame_average():
    x = make_rng(21).standard_normal((10, 40))
    for seed in range(5):
        p = force_attention(random_params(seed), 1)
        p["loc_w"] = np.zeros((7, 40))
        p["loc_b"] = np.full(7, 0.37)
        full = forward(x, p, Mode.ATT_LOC)
        assert (full.z_att == 1.0).all()
        base = forward(x, p, Mode.BASELINE_CGRNN)
        np.testing.assert_allclose(full.o_chunk, base.o.mean(axis=0), rtol=0, atol=1e-9)
        np.testing.assert_allclose(full.o_chunk, base.o_chunk, rtol=0, atol=1e-9)


def test_zero_attention_gives_zero_output():
    x = make_rng(2).standard_normal((8, 40))
    tr = forward(x, force_attention(random_params(1), 0), Mode.ATT_LOC)
    assert (tr.z_att == 0).all()
    assert (tr.o_chunk == 0).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12))
def test_trace_invariants(seed, T):
    p = random_params(seed % 5)
    x = make_rng(seed).standard_normal((T, 40)) * 2
    tr = forward(x, p, Mode.ATT_LOC)
    assert tr.z_att.shape == (T,) and tr.z_loc.shape == (T, 7)
    np.testing.assert_allclose(tr.z_loc.sum(axis=1), 1.0, rtol=0, atol=1e-9)
    assert ((tr.z_att > 0) & (tr.z_att < 1)).all()
    assert ((tr.o_chunk > 0) & (tr.o_chunk < 1)).all()
    assert tr.y_cnn.shape == (T, 128) and tr.fnn.shape == (T, 500)
    assert [g.shape for g in tr.gru] == [(T, 256)] * 3


def test_frame_permutation():
    p = random_params(3)
    x = make_rng(4).standard_normal((12, 40))
    perm = make_rng(5).permutation(12)
    a, b = forward(x, p), forward(x[perm], p)
    assert not np.allclose(a.o[perm], b.o)
    np.testing.assert_allclose(a.z_att[perm], b.z_att, rtol=0, atol=1e-15)
    np.testing.assert_allclose(a.z_loc[perm], b.z_loc, rtol=0, atol=1e-15)


def test_baseline_ignores_attention_and_localization():
    p = random_params(4)
    x = make_rng(6).standard_normal((9, 40))
    ref = forward(x, p, Mode.BASELINE_CGRNN)
    q = dict(p)
    rng = make_rng(1)
    for k in ATTLOC_PARAMS:
        q[k] = p[k] + rng.standard_normal(p[k].shape)
    out = forward(x, q, Mode.BASELINE_CGRNN)
    assert np.array_equal(ref.o_chunk, out.o_chunk)
    assert out.z_loc is None and (out.z_att == 1).all()


def test_non_finite_input_names_stage():
    x = np.zeros((4, 40))
    x[1, 2] = np.inf
    with pytest.raises(NumericalError, match="input"):
        forward(x, zero_params())


def test_non_finite_intermediate_names_stage():
    p = random_params(0)
    p["fnn_b"] = np.full(500, 1e308)
    p["out_w"] = np.full((7, 500), 1e308)
    with np.errstate(over="ignore"), pytest.raises(NumericalError, match="output layer"):
        forward(make_rng(0).standard_normal((3, 40)), p)


def test_bad_shape_rejected():
    with pytest.raises(ValueError):
        forward(np.zeros((4, 39)), zero_params())
    with pytest.raises(ValueError):
        forward(np.zeros((0, 40)), zero_params())
