"""Multi-expert ViT encoder.

Visual patches and ``M`` learnable expert tokens share one pre-norm
transformer stack.  Segment id 0 marks visual tokens, 1 marks experts.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class EncodedTokens(NamedTuple):
    z_v: Tensor  # [..., N, D]
    z_e: Tensor  # [..., M, D]


def patchify(image, P: int) -> Tensor:
    """``[..., H, W, C] -> [..., N, P*P*C]``.

    Patches are taken in raster order; each patch is flattened as
    (row-in-patch, col-in-patch, channel).
    """
    image = tn.as_tensor(image)
    *lead, H, W, C = image.shape
    if H % P or W % P:
        raise ValueError(f"patchify: image {H}x{W} is not divisible by patch size {P}")
    gh, gw = H // P, W // P
    k = len(lead)
    x = tn.reshape(image, (*lead, gh, P, gw, P, C))
    x = tn.transpose(x, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    return tn.reshape(x, (*lead, gh * gw, P * P * C))


def unpatchify(patches: np.ndarray, H: int, W: int, C: int, P: int) -> np.ndarray:
    gh, gw = H // P, W // P
    *lead, _, _ = patches.shape
    x = patches.reshape(*lead, gh, gw, P, P, C)
    k = len(lead)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, H, W, C)


def _normal(rng, shape, std):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def init_vit(cfg, rng: np.random.Generator, prefix: str = "vit") -> dict:
    D, M, N = cfg.dim, cfg.experts, cfg.n_patches
    P, C, std = cfg.patch_size, cfg.channels, cfg.init_std
    p = {
        f"{prefix}.patch_proj": _normal(rng, (P * P * C, D), std),
        f"{prefix}.expert_tokens": _normal(rng, (M, D), std),
        f"{prefix}.pos_emb": _normal(rng, (N + M, D), std),
        f"{prefix}.seg_emb": _normal(rng, (2, D), std),
    }
    for l in range(cfg.vit_layers):
        q = f"{prefix}.layers.{l}"
        for ln in ("ln1", "ln2"):
            p[f"{q}.{ln}.gain"] = Tensor(np.ones(D), requires_grad=True)
            p[f"{q}.{ln}.bias"] = Tensor(np.zeros(D), requires_grad=True)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{q}.attn.{name}"] = _normal(rng, (D, D), std)
            p[f"{q}.attn.{name}_bias"] = Tensor(np.zeros(D), requires_grad=True)
        p[f"{q}.mlp.w1"] = _normal(rng, (D, 4 * D), std)
        p[f"{q}.mlp.b1"] = Tensor(np.zeros(4 * D), requires_grad=True)
        p[f"{q}.mlp.w2"] = _normal(rng, (4 * D, D), std)
        p[f"{q}.mlp.b2"] = Tensor(np.zeros(D), requires_grad=True)
    return p


def msa(x: Tensor, p: dict, prefix: str, heads: int, trace: list | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention over ``x[B, T, D]``."""
    B, T, D = x.shape
    dh = D // heads

    def split(t):
        return tn.transpose(tn.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(tn.linear(x, p[f"{prefix}.wq"], p[f"{prefix}.wq_bias"]))
    k = split(tn.linear(x, p[f"{prefix}.wk"], p[f"{prefix}.wk_bias"]))
    v = split(tn.linear(x, p[f"{prefix}.wv"], p[f"{prefix}.wv_bias"]))
    scores = tn.scale(tn.matmul(q, tn.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    attn = tn.softmax(scores, axis=-1)
    if trace is not None:
        trace.append(attn.data)
    ctx = tn.reshape(tn.transpose(tn.matmul(attn, v), (0, 2, 1, 3)), (B, T, D))
    return tn.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.wo_bias"])


def mlp(x: Tensor, p: dict, prefix: str) -> Tensor:
    h = tn.gelu(tn.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return tn.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def embed_tokens(images, p: dict, cfg, prefix: str = "vit") -> Tensor:
    """``z_0``: projected patches followed by expert tokens, plus position
    and segment embeddings.  Returns ``[B, N+M, D]``."""
    images = tn.as_tensor(images)
    squeeze = images.ndim == 3
    if squeeze:
        images = tn.reshape(images, (1, *images.shape))
    B = images.shape[0]
    x_p = tn.matmul(patchify(images, cfg.patch_size), p[f"{prefix}.patch_proj"])
    experts = p[f"{prefix}.expert_tokens"]
    N, (M, D) = x_p.shape[1], experts.shape
    if p[f"{prefix}.pos_emb"].shape[0] != N + M:
        raise ValueError(f"pos_emb has {p[f'{prefix}.pos_emb'].shape[0]} rows, need N+M={N + M}")
    x_e = tn.broadcast_to(tn.reshape(experts, (1, M, D)), (B, M, D))
    z = tn.concat([x_p, x_e], axis=1)
    seg_ids = np.array([0] * N + [1] * M)
    return z + p[f"{prefix}.pos_emb"] + tn.embedding_lookup(p[f"{prefix}.seg_emb"], seg_ids)


def vit_forward(images, p: dict, cfg, prefix: str = "vit", trace: list | None = None) -> EncodedTokens:
    """Run the pre-norm stack and split the output into visual / expert rows.

    ``images`` is ``[H, W, C]`` or ``[B, H, W, C]``; outputs keep the batch
    axis only if the input had one.
    """
    squeeze = tn.as_tensor(images).ndim == 3
    z = embed_tokens(images, p, cfg, prefix)
    eps = cfg.ln_eps
    for l in range(cfg.vit_layers):
        q = f"{prefix}.layers.{l}"
        h = tn.layer_norm(z, p[f"{q}.ln1.gain"], p[f"{q}.ln1.bias"], eps)
        z = z + msa(h, p, f"{q}.attn", cfg.heads, trace)
        h = tn.layer_norm(z, p[f"{q}.ln2.gain"], p[f"{q}.ln2.bias"], eps)
        z = z + mlp(h, p, f"{q}.mlp")
    N = z.shape[1] - p[f"{prefix}.expert_tokens"].shape[0]
    z_v, z_e = z[:, :N], z[:, N:]
    if squeeze:
        z_v, z_e = z_v[0], z_e[0]
    return EncodedTokens(z_v, z_e)


def init_embed(cfg, rng: np.random.Generator, prefix: str = "embed") -> dict:
    D, DB = cfg.dim, cfg.bilinear_dim
    return {
        f"{prefix}.w": Tensor(rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, DB)), requires_grad=True),
        f"{prefix}.b": Tensor(np.zeros(DB), requires_grad=True),
    }


def embed_to_bilinear(z: EncodedTokens, p: dict, prefix: str = "embed") -> EncodedTokens:
    """Shared linear projection ``D -> D_B`` followed by ReLU."""
    w, b = p[f"{prefix}.w"], p[f"{prefix}.b"]
    return EncodedTokens(tn.relu(tn.linear(z.z_v, w, b)), tn.relu(tn.linear(z.z_e, w, b)))


def expert_attention_map(z_e, z_v) -> Tensor:
    """Softmax over visual tokens of expert/visual dot products: ``[..., M, N]``."""
    z_e, z_v = tn.as_tensor(z_e), tn.as_tensor(z_v)
    return tn.softmax(tn.matmul(z_e, tn.swapaxes(z_v, -1, -2)), axis=-1)
