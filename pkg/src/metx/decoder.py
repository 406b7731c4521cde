"""Expert-conditioned bilinear decoder and greedy generation.

All ``M`` experts decode in parallel: the expert axis is folded into the
batch axis, so a batch of ``B`` images runs ``B*M`` streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .bilinear import _fan_in, eba, init_eba
from .data import BOS, EOS, PAD
from .tensor import Tensor

EMBED_STD = 0.5


@dataclass
class ExpertOutputs:
    logits: np.ndarray | None  # [M, T, V]
    reports: list  # M token-id lists (BOS .. EOS)
    texts: list
    votes: list
    winner: int


def init_decoder(cfg, vocab_size: int, rng: np.random.Generator, prefix: str = "dec") -> dict:
    D = cfg.bilinear_dim
    p = {
        f"{prefix}.word_emb": Tensor(rng.normal(0.0, EMBED_STD, (vocab_size, D)), requires_grad=True),
        f"{prefix}.word_pos_emb": Tensor(rng.normal(0.0, EMBED_STD, (cfg.max_len, D)), requires_grad=True),
    }
    for i in range(cfg.dec_layers):
        q = f"{prefix}.layers.{i}"
        for name in ("adj_word.W_e", "adj_word.W_v", "adj_vis.W_e", "adj_vis.W_v"):
            p[f"{q}.{name}"] = _fan_in(rng, (D, D))
        p.update(init_eba(rng, f"{q}.eba_mask", D, D, D, D, cfg.mid_dim))
        p.update(init_eba(rng, f"{q}.eba_cross", D, D, D, D, cfg.mid_dim))
        p[f"{q}.fuse"] = _fan_in(rng, (2 * D, D))
        for ln in ("ln_mid", "ln_cross", "ln_out"):
            p[f"{q}.{ln}.gain"] = Tensor(np.ones(D), requires_grad=True)
            p[f"{q}.{ln}.bias"] = Tensor(np.zeros(D), requires_grad=True)
    p[f"{prefix}.head"] = _fan_in(rng, (D, vocab_size))
    return p


def adjust(f_e, x, W_e, W_v) -> Tensor:
    """``relu(f_e W_e) * relu(x W_v)``; ``f_e [..., D]`` gates every row of
    ``x [..., T, D]``."""
    f_e, x = tn.as_tensor(f_e), tn.as_tensor(x)
    gate = tn.relu(tn.matmul(tn.reshape(f_e, (*f_e.shape[:-1], 1, f_e.shape[-1])), W_e))
    return gate * tn.relu(tn.matmul(x, W_v))


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def decoder_forward(f_e, f_v, report_ids, p: dict, cfg, prefix: str = "dec") -> Tensor:
    """Teacher-forced logits.

    ``f_e [B, M, D]``, ``f_v [B, N, D]``; ``report_ids`` is ``[B, T]`` (shared
    by every expert) or ``[B, M, T]`` (one prefix per expert).  Returns
    ``[B, M, T, V]``.  Unbatched inputs (``[M, D]``, ``[N, D]``, ``[T]`` or
    ``[M, T]``) give ``[M, T, V]``.
    """
    f_e, f_v = tn.as_tensor(f_e), tn.as_tensor(f_v)
    ids = np.asarray(report_ids, dtype=np.int64)
    squeeze = f_e.ndim == 2
    if squeeze:
        f_e = tn.reshape(f_e, (1, *f_e.shape))
        f_v = tn.reshape(f_v, (1, *f_v.shape))
        ids = ids[None]
    B, M, D = f_e.shape
    N = f_v.shape[1]
    T = ids.shape[-1]
    if T > p[f"{prefix}.word_pos_emb"].shape[0]:
        raise ValueError(f"report length {T} exceeds max_len={p[f'{prefix}.word_pos_emb'].shape[0]}")
    if ids.ndim == 2:
        ids = np.broadcast_to(ids[:, None, :], (B, M, T))
    BM = B * M

    E_r = tn.embedding_lookup(p[f"{prefix}.word_emb"], ids.reshape(BM, T))
    E_r = E_r + p[f"{prefix}.word_pos_emb"][:T]
    fe = tn.reshape(f_e, (BM, D))
    fv = tn.reshape(tn.broadcast_to(tn.reshape(f_v, (B, 1, N, D)), (B, M, N, D)), (BM, N, D))
    mask = causal_mask(T)
    eps = cfg.ln_eps

    def ln(x, name):
        return tn.layer_norm(x, p[f"{name}.gain"], p[f"{name}.bias"], eps)

    E_c = None
    for i in range(cfg.dec_layers):
        q = f"{prefix}.layers.{i}"
        E_hat = adjust(fe, E_r, p[f"{q}.adj_word.W_e"], p[f"{q}.adj_word.W_v"])
        E_mid = ln(eba(E_hat, E_r, E_r, p, f"{q}.eba_mask", mask=mask) + E_r, f"{q}.ln_mid")
        fv_hat = adjust(fe, fv, p[f"{q}.adj_vis.W_e"], p[f"{q}.adj_vis.W_v"])
        E_c = ln(eba(E_mid, fv_hat, fv_hat, p, f"{q}.eba_cross") + E_mid, f"{q}.ln_cross")
        E_r = ln(tn.matmul(tn.concat([E_r, E_c], axis=-1), p[f"{q}.fuse"]) + E_r, f"{q}.ln_out")
    logits = tn.matmul(E_c, p[f"{prefix}.head"])
    logits = tn.reshape(logits, (B, M, T, logits.shape[-1]))
    return logits[0] if squeeze else logits


class IncrementalDecoder:
    """Causal decoding one position at a time.

    Each layer caches its input rows ``E_r^{(i-1)}`` for the positions seen so
    far; a new position only needs its own row against that cache, since
    earlier rows never see later tokens.  Produces the same logits as
    ``decoder_forward`` on the full prefix.
    """

    def __init__(self, f_e, f_v, p: dict, cfg, prefix: str = "dec"):
        f_e, f_v = tn.as_tensor(f_e), tn.as_tensor(f_v)
        B, M, D = f_e.shape
        N = f_v.shape[1]
        self.B, self.M, self.p, self.cfg, self.prefix = B, M, p, cfg, prefix
        fe = tn.reshape(f_e, (B * M, D))
        fv = tn.reshape(tn.broadcast_to(tn.reshape(f_v, (B, 1, N, D)), (B, M, N, D)), (B * M, N, D))
        self.word_gate, self.fv_hat, self.cache = [], [], []
        for i in range(cfg.dec_layers):
            q = f"{prefix}.layers.{i}"
            self.word_gate.append(tn.relu(tn.matmul(tn.reshape(fe, (B * M, 1, D)), p[f"{q}.adj_word.W_e"])))
            self.fv_hat.append(adjust(fe, fv, p[f"{q}.adj_vis.W_e"], p[f"{q}.adj_vis.W_v"]))
            self.cache.append(None)
        self.t = 0

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Feed ``tokens [B, M]`` at the next position; returns logits ``[B, M, V]``."""
        p, q0, eps = self.p, self.prefix, self.cfg.ln_eps
        BM = self.B * self.M
        if self.t >= p[f"{q0}.word_pos_emb"].shape[0]:
            raise ValueError("decoding past max_len")
        x = tn.embedding_lookup(p[f"{q0}.word_emb"], np.asarray(tokens).reshape(BM, 1))
        x = x + p[f"{q0}.word_pos_emb"][self.t:self.t + 1]

        def ln(v, name):
            return tn.layer_norm(v, p[f"{name}.gain"], p[f"{name}.bias"], eps)

        for i in range(self.cfg.dec_layers):
            q = f"{q0}.layers.{i}"
            prev = self.cache[i]
            keys = x if prev is None else tn.concat([prev, x], axis=1)
            self.cache[i] = keys
            x_hat = self.word_gate[i] * tn.relu(tn.matmul(x, p[f"{q}.adj_word.W_v"]))
            e_mid = ln(eba(x_hat, keys, keys, p, f"{q}.eba_mask") + x, f"{q}.ln_mid")
            e_c = ln(eba(e_mid, self.fv_hat[i], self.fv_hat[i], p, f"{q}.eba_cross") + e_mid,
                     f"{q}.ln_cross")
            x = ln(tn.matmul(tn.concat([x, e_c], axis=-1), p[f"{q}.fuse"]) + x, f"{q}.ln_out")
        self.t += 1
        logits = tn.matmul(e_c, p[f"{q0}.head"]).data
        return logits.reshape(self.B, self.M, -1)


def _prepare(f_e, f_v):
    f_e, f_v = tn.as_tensor(f_e), tn.as_tensor(f_v)
    squeeze = f_e.ndim == 2
    if squeeze:
        f_e = tn.reshape(f_e, (1, *f_e.shape))
        f_v = tn.reshape(f_v, (1, *f_v.shape))
    return f_e, f_v, squeeze


def generate_greedy(f_e, f_v, p: dict, cfg, t_max: int | None = None, prefix: str = "dec") -> np.ndarray:
    """Per-expert argmax decoding from BOS until EOS or ``t_max`` tokens.

    Returns ids ``[B, M, T']`` (or ``[M, T']`` unbatched) starting with BOS,
    PAD after EOS.  Ties go to the lowest token id.
    """
    t_max = t_max or cfg.max_len
    with tn.no_grad():
        f_e, f_v, squeeze = _prepare(f_e, f_v)
        B, M, _ = f_e.shape
        dec = IncrementalDecoder(f_e, f_v, p, cfg, prefix)
        ids = np.full((B, M, 1), BOS, np.int64)
        done = np.zeros((B, M), bool)
        while ids.shape[-1] < t_max and not done.all():
            logits = dec.step(ids[:, :, -1])
            nxt = np.where(done, PAD, logits.argmax(axis=-1))
            ids = np.concatenate([ids, nxt[..., None]], axis=-1)
            done |= nxt == EOS
    return ids[0] if squeeze else ids


def generate_averaged(f_e, f_v, p: dict, cfg, t_max: int | None = None, prefix: str = "dec") -> np.ndarray:
    """One shared report per image: each step takes the argmax of the
    expert-averaged word probabilities.  Returns ``[B, T']`` (``[T']``
    unbatched)."""
    t_max = t_max or cfg.max_len
    with tn.no_grad():
        f_e, f_v, squeeze = _prepare(f_e, f_v)
        B, M, _ = f_e.shape
        dec = IncrementalDecoder(f_e, f_v, p, cfg, prefix)
        ids = np.full((B, 1), BOS, np.int64)
        done = np.zeros(B, bool)
        while ids.shape[-1] < t_max and not done.all():
            logits = dec.step(np.broadcast_to(ids[:, -1:], (B, M)))
            z = logits - logits.max(axis=-1, keepdims=True)
            probs = np.exp(z)
            probs /= probs.sum(axis=-1, keepdims=True)
            nxt = np.where(done, PAD, probs.mean(axis=1).argmax(axis=-1))
            ids = np.concatenate([ids, nxt[:, None]], axis=-1)
            done |= nxt == EOS
    return ids[0] if squeeze else ids
