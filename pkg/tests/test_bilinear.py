import math

import numpy as np
import pytest

from metx import tensor as tn
from metx.bilinear import (bilinear_encoder_forward, bilinear_encoder_layer, eba, init_bilinear_encoder,
                           init_eba)
from metx.tensor import Tensor

from conftest import tiny


def relu(x):
    return max(x, 0.0)


def eba_loops(q, k, v, W, mask=None):
    """Literal five-step reference with explicit loops (float64)."""
    B, Tq, _ = q.shape
    Tk = k.shape[1]
    DB = W["W_k"].shape[1]
    Dm = W["W_Bk"].shape[1]
    out = np.zeros((B, Tq, DB))
    for b in range(B):
        for i in range(Tq):
            Bk = np.zeros((Tk, DB))
            Bv = np.zeros((Tk, DB))
            for j in range(Tk):
                for d in range(DB):
                    kk = relu(sum(k[b, j, c] * W["W_k"][c, d] for c in range(k.shape[2])))
                    qk = relu(sum(q[b, i, c] * W["W_qk"][c, d] for c in range(q.shape[2])))
                    vv = relu(sum(v[b, j, c] * W["W_v"][c, d] for c in range(v.shape[2])))
                    qv = relu(sum(q[b, i, c] * W["W_qv"][c, d] for c in range(q.shape[2])))
                    Bk[j, d] = kk * qk
                    Bv[j, d] = vv * qv
            Bmid = np.zeros((Tk, Dm))
            for j in range(Tk):
                for e in range(Dm):
                    Bmid[j, e] = relu(sum(Bk[j, d] * W["W_Bk"][d, e] for d in range(DB)))
            allowed = [mask is None or mask[i, j] for j in range(Tk)]
            logits = [sum(Bmid[j, e] * W["w_s"][e, 0] for e in range(Dm)) if allowed[j] else -math.inf
                      for j in range(Tk)]
            top = max(logits)
            ex = [math.exp(l - top) if l > -math.inf else 0.0 for l in logits]
            alpha = [x / sum(ex) for x in ex]
            n_allowed = sum(allowed)
            mean_mid = [sum(Bmid[j, e] for j in range(Tk) if allowed[j]) / n_allowed for e in range(Dm)]
            for d in range(DB):
                beta = 1 / (1 + math.exp(-sum(mean_mid[e] * W["W_c"][e, d] for e in range(Dm))))
                out[b, i, d] = beta * sum(alpha[j] * Bv[j, d] for j in range(Tk))
    return out


def random_case(rng, masked):
    B = int(rng.integers(1, 3))
    Tq = int(rng.integers(1, 5))
    Tk = Tq if masked else int(rng.integers(1, 6))
    Dq, Dk, Dv = (int(x) for x in rng.integers(2, 6, size=3))
    DB, Dm = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    with tn.precision(np.float64):
        W = {k.split(".")[-1]: t for k, t in init_eba(rng, "e", Dq, Dk, Dv, DB, Dm).items()}
    q, k, v = (rng.uniform(-1, 1, size=s) for s in ((B, Tq, Dq), (B, Tk, Dk), (B, Tk, Dv)))
    mask = np.tril(np.ones((Tq, Tk), bool)) if masked else None
    return q, k, v, W, mask


@pytest.mark.parametrize("case", range(20))
def test_eba_matches_loop_oracle(case):
    rng = np.random.default_rng([42, case])
    q, k, v, W, mask = random_case(rng, masked=case % 3 == 0)
    with tn.precision(np.float64):
        p = {f"e.{n}": t for n, t in W.items()}
        got = eba(q, k, v, p, "e", mask=mask).data
    ref = eba_loops(q, k, v, {n: t.data for n, t in W.items()}, mask)
    np.testing.assert_allclose(got, ref, atol=1e-5, rtol=0)


def test_eba_shape_contract(rng):
    p = init_eba(rng, "e", 64, 64, 64, 64, 32)
    out = eba(rng.normal(size=(1, 7, 64)), rng.normal(size=(1, 16, 64)), rng.normal(size=(1, 16, 64)), p, "e")
    assert out.shape == (1, 7, 64)


def test_single_key_softmax_is_one(rng):
    p = init_eba(rng, "e", 4, 4, 4, 5, 3)
    q, k = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 1, 4))
    tr = {}
    out = eba(q, k, k, p, "e", trace=tr).data
    np.testing.assert_array_equal(tr["alpha"], 1.0)
    Bv = np.maximum(k @ p["e.W_v"].data, 0) * np.maximum(q @ p["e.W_qv"].data, 0)
    np.testing.assert_allclose(out, tr["beta"] * Bv, rtol=1e-5)


def test_alpha_rows_and_beta_range(rng):
    p = init_eba(rng, "e", 4, 4, 4, 5, 3)
    tr = {}
    eba(rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 6, 4)), rng.normal(size=(2, 6, 4)), p, "e", trace=tr)
    np.testing.assert_allclose(tr["alpha"].sum(-1), 1, atol=1e-5)
    assert ((tr["beta"] > 0) & (tr["beta"] < 1)).all()


def test_masked_key_invariance(rng):
    p = init_eba(rng, "e", 4, 4, 4, 5, 3)
    q, k, v = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 4, 4))
    mask = np.ones((3, 4), bool)
    mask[:, 2] = False
    a = eba(q, k, v, p, "e", mask=mask).data
    k2, v2 = k.copy(), v.copy()
    k2[0, 2] = 100
    v2[0, 2] = -50
    np.testing.assert_array_equal(eba(q, k2, v2, p, "e", mask=mask).data, a)


def test_query_permutation_equivariance(rng):
    p = init_eba(rng, "e", 4, 4, 4, 5, 3)
    q, k = rng.normal(size=(1, 5, 4)), rng.normal(size=(1, 6, 4))
    perm = rng.permutation(5)
    a = eba(q, k, k, p, "e").data
    b = eba(q[:, perm], k, k, p, "e").data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-6)


def test_fully_masked_row_rejected(rng):
    p = init_eba(rng, "e", 4, 4, 4, 5, 3)
    mask = np.zeros((2, 3), bool)
    mask[0, 0] = True
    with pytest.raises(ValueError):
        eba(rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 4)), p, "e", mask=mask)


def test_bilinear_encoder_shapes_and_single_layer(rng):
    for n in (1, 2, 3):
        cfg = tiny(enc_layers=n)
        p = init_bilinear_encoder(cfg, rng)
        fe, fv = bilinear_encoder_forward(rng.normal(size=(3, 8)), rng.normal(size=(5, 8)), p, n)
        assert fe.shape == (3, 8) and fv.shape == (5, 8)
    cfg = tiny(enc_layers=1)
    p = init_bilinear_encoder(cfg, rng)
    ze, zv = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    fe, fv = bilinear_encoder_forward(ze, zv, p, 1)
    q = "bienc.layers.0"
    h_e = eba(ze[None], zv[None], zv[None], p, f"{q}.eba").data[0] + ze
    ref_e = (h_e - h_e.mean(-1, keepdims=True)) / np.sqrt(h_e.var(-1, keepdims=True) + 1e-5)
    cat = np.concatenate([np.tile(ze.mean(0), (5, 1)), zv], axis=1)
    h = cat @ p[f"{q}.fuse"].data + zv
    ref_v = (h - h.mean(-1, keepdims=True)) / np.sqrt(h.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(fe.data, ref_e, atol=1e-5)
    np.testing.assert_allclose(fv.data, ref_v, atol=1e-5)


def test_bilinear_encoder_grads_match_fd(rng):
    cfg = tiny(enc_layers=2, bilinear_dim=4, mid_dim=2)
    with tn.precision(np.float64):
        p = init_bilinear_encoder(cfg, rng)
        ze, zv = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 4))
        proj = rng.normal(size=(7, 4))
        f = lambda: tn.sum_(tn.concat(list(bilinear_encoder_forward(ze, zv, p, 2)), axis=0) * proj)
        tn.backward(f())
        for name, t in p.items():
            num = tn.finite_diff_grad(lambda _x: f(), t)
            assert tn.max_relative_error(t.grad, num) < 1e-2, name
