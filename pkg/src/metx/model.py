"""Parameter construction and the full image -> per-expert logits pass."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .bilinear import bilinear_encoder_forward, init_bilinear_encoder
from .decoder import decoder_forward, generate_averaged, generate_greedy, init_decoder
from .encoder import embed_to_bilinear, init_embed, init_vit, vit_forward


class Features(NamedTuple):
    f_e: tn.Tensor  # [B, M, D_B]
    f_v: tn.Tensor  # [B, N, D_B]


def init_params(cfg, vocab_size: int, seed: int | None = None) -> dict:
    """Ordered ``name -> Tensor`` map for the whole network."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    params.update(init_vit(cfg, rng))
    params.update(init_embed(cfg, rng))
    if cfg.use_bilinear_encoder:
        params.update(init_bilinear_encoder(cfg, rng))
    params.update(init_decoder(cfg, vocab_size, rng))
    for name, t in params.items():
        t.name = name
    return params


def encode_images(params: dict, cfg, images, trace: list | None = None) -> Features:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    z = embed_to_bilinear(vit_forward(images, params, cfg, trace=trace), params)
    if cfg.use_bilinear_encoder:
        f_e, f_v = bilinear_encoder_forward(z.z_e, z.z_v, params, cfg.enc_layers, eps=cfg.ln_eps)
    else:
        f_e, f_v = z.z_e, z.z_v
    return Features(f_e, f_v)


def forward(params: dict, cfg, images, report_ids) -> tuple:
    """Teacher-forced pass.  ``report_ids [B, T]`` includes BOS; inputs are
    ``ids[:, :-1]``.  Returns ``(logits [B, M, T-1, V], features)``."""
    feats = encode_images(params, cfg, images)
    logits = decoder_forward(feats.f_e, feats.f_v, np.asarray(report_ids)[:, :-1], params, cfg)
    return logits, feats


def generate(params: dict, cfg, images, averaged: bool = False) -> tuple:
    """Returns ``(ids, features)``; ids are ``[B, M, T]`` or ``[B, T]`` when
    ``averaged``."""
    with tn.no_grad():
        feats = encode_images(params, cfg, images)
        if averaged:
            ids = generate_averaged(feats.f_e, feats.f_v, params, cfg)
        else:
            ids = generate_greedy(feats.f_e, feats.f_v, params, cfg)
    return ids, feats


def param_census(params: dict) -> dict:
    """Trainable-parameter counts grouped by top-level module."""
    groups: dict = {}
    for name, t in params.items():
        key = name.split(".")[0]
        groups[key] = groups.get(key, 0) + t.size
    groups["total"] = sum(t.size for t in params.values())
    return groups
