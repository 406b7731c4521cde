"""Expert bilinear attention (EBA) and the stacked bilinear encoder.

Weights are stored input-major (``x @ W``):

    W_k   [D_k, D_B]     key projection
    W_v   [D_v, D_B]     value projection
    W_qk  [D_q, D_B]     query projection paired with keys
    W_qv  [D_q, D_B]     query projection paired with values
    W_Bk  [D_B, D_mid]   spatial branch, first projection
    w_s   [D_mid, 1]     spatial score
    W_c   [D_mid, D_B]   channel (squeeze-excitation) gate
"""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .tensor import Tensor

EBA_KEYS = ("W_k", "W_v", "W_qk", "W_qv", "W_Bk", "w_s", "W_c")


def _fan_in(rng, shape):
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape), requires_grad=True)


def init_eba(rng: np.random.Generator, prefix: str, d_q: int, d_k: int, d_v: int,
             d_b: int, d_mid: int) -> dict:
    shapes = {
        "W_k": (d_k, d_b), "W_v": (d_v, d_b), "W_qk": (d_q, d_b), "W_qv": (d_q, d_b),
        "W_Bk": (d_b, d_mid), "w_s": (d_mid, 1), "W_c": (d_mid, d_b),
    }
    return {f"{prefix}.{k}": _fan_in(rng, s) for k, s in shapes.items()}


def eba(query, key, value, p: dict, prefix: str, mask=None, trace: dict | None = None) -> Tensor:
    """Expert bilinear attention.

    ``query [B, T_q, D_q]``, ``key [B, T_k, D_k]``, ``value [B, T_k, D_v]``;
    ``mask`` is a ``[T_q, T_k]`` boolean array, True where attending is
    allowed.  Returns ``[B, T_q, D_B]``.

    Masked keys are excluded from both the spatial softmax and the key
    average that feeds the channel gate.
    """
    query, key, value = tn.as_tensor(query), tn.as_tensor(key), tn.as_tensor(value)
    B, Tq, _ = query.shape
    Tk = key.shape[1]
    if value.shape[1] != Tk:
        raise ValueError(f"eba: key has {Tk} rows but value has {value.shape[1]}")
    W = {k: p[f"{prefix}.{k}"] for k in EBA_KEYS}

    # spatial branch: B_mid = relu(W_Bk (relu(W_k K) * relu(W_qk Q)))
    k_proj = tn.relu(tn.matmul(key, W["W_k"]))
    q_proj = tn.relu(tn.matmul(query, W["W_qk"]))
    b_mid = tn.relu(tn.lowrank_bilinear(k_proj, q_proj, W["W_Bk"]))  # [B, Tq, Tk, D_mid]
    logits = tn.reshape(tn.matmul(b_mid, W["w_s"]), (B, Tq, Tk))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (Tq, Tk):
            raise ValueError(f"eba: mask shape {mask.shape} != {(Tq, Tk)}")
        if not mask.any(axis=1).all():
            raise ValueError("eba: a query row is fully masked")
    alpha = tn.softmax(logits, axis=-1, mask=mask)

    # channel branch: beta = sigmoid(W_c mean_k(B_mid))
    if mask is None:
        pooled = tn.mean(b_mid, axis=2)
    else:
        weights = (mask / mask.sum(axis=1, keepdims=True)).astype(b_mid.data.dtype)
        pooled = tn.sum_(b_mid * weights[:, :, None], axis=2)
    beta = tn.sigmoid(tn.matmul(pooled, W["W_c"]))

    # alpha contracted with B_v = relu(W_v V) * relu(W_qv Q); the query factor
    # does not depend on the key index so it comes out of the sum
    v_proj = tn.relu(tn.matmul(value, W["W_v"]))
    qv_proj = tn.relu(tn.matmul(query, W["W_qv"]))
    attended = tn.matmul(alpha, v_proj) * qv_proj
    if trace is not None:
        trace["alpha"] = alpha.data
        trace["beta"] = beta.data
    return beta * attended


def init_bilinear_encoder(cfg, rng: np.random.Generator, prefix: str = "bienc") -> dict:
    DB, Dm = cfg.bilinear_dim, cfg.mid_dim
    p = {}
    for n in range(cfg.enc_layers):
        q = f"{prefix}.layers.{n}"
        p.update(init_eba(rng, f"{q}.eba", DB, DB, DB, DB, Dm))
        p[f"{q}.fuse"] = _fan_in(rng, (2 * DB, DB))
        for ln in ("ln_e", "ln"):
            p[f"{q}.{ln}.gain"] = Tensor(np.ones(DB), requires_grad=True)
            p[f"{q}.{ln}.bias"] = Tensor(np.zeros(DB), requires_grad=True)
    return p


def bilinear_encoder_layer(z_e: Tensor, z_v: Tensor, p: dict, prefix: str, eps: float = 1e-5):
    """One layer.  ``z_e [B, M, D_B]``, ``z_v [B, N, D_B]``.

    Experts attend the visual tokens through EBA with Add & Norm:
    ``LN(EBA(z_e, z_v) + z_e)``.  Visual tokens are fused with the expert
    mean of the previous layer: ``LN([mean_m z_e ; z_v] W_fuse + z_v)``.
    """
    attended = eba(z_e, z_v, z_v, p, f"{prefix}.eba")
    new_e = tn.layer_norm(attended + z_e, p[f"{prefix}.ln_e.gain"], p[f"{prefix}.ln_e.bias"], eps)
    B, N, DB = z_v.shape
    e_bar = tn.broadcast_to(tn.mean(z_e, axis=1, keepdims=True), (B, N, z_e.shape[-1]))
    fused = tn.matmul(tn.concat([e_bar, z_v], axis=-1), p[f"{prefix}.fuse"])
    new_v = tn.layer_norm(fused + z_v, p[f"{prefix}.ln.gain"], p[f"{prefix}.ln.bias"], eps)
    return new_e, new_v


def bilinear_encoder_forward(z_e, z_v, p: dict, n_layers: int, prefix: str = "bienc",
                             eps: float = 1e-5):
    """Stack ``n_layers`` bilinear encoder layers; returns ``(f_e, f_v)``.

    Accepts unbatched ``[M, D_B]`` / ``[N, D_B]`` inputs as well.
    """
    if n_layers < 1:
        raise ValueError("bilinear encoder needs at least one layer")
    z_e, z_v = tn.as_tensor(z_e), tn.as_tensor(z_v)
    squeeze = z_e.ndim == 2
    if squeeze:
        z_e = tn.reshape(z_e, (1, *z_e.shape))
        z_v = tn.reshape(z_v, (1, *z_v.shape))
    for n in range(n_layers):
        z_e, z_v = bilinear_encoder_layer(z_e, z_v, p, f"{prefix}.layers.{n}", eps)
    if squeeze:
        z_e, z_v = z_e[0], z_v[0]
    return z_e, z_v
