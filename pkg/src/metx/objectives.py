"""Orthogonal loss, report cross-entropy, combined objective and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .data import PAD
from .tensor import Tensor


@dataclass
class LossReport:
    ce: float
    orl: float
    total: float
    lam: float


def orthogonal_loss(z_e, eps: float = 1e-8) -> Tensor:
    """``||Z Z^T - I||_F^2 / M`` with rows of ``Z`` L2-normalized.

    ``z_e`` is ``[M, D]`` or ``[B, M, D]``; a batch is averaged.
    """
    z_e = tn.as_tensor(z_e)
    M = z_e.shape[-2]
    z = tn.l2_normalize(z_e, axis=-1, eps=eps)
    gram = tn.matmul(z, tn.swapaxes(z, -1, -2))
    diff = gram - np.eye(M, dtype=z_e.data.dtype)
    per = tn.scale(tn.sum_(diff * diff, axis=(-2, -1)), 1.0 / M)
    return tn.mean(per) if per.ndim else per


def ce_loss(logits, targets, normalize: bool = True) -> Tensor:
    """Expert-averaged negative log-likelihood of ``targets``.

    ``logits [B, M, T, V]`` with ``targets [B, T]`` (or ``[M, T, V]`` with
    ``[T]``).  PAD targets are skipped.  With ``normalize`` the sum is divided
    by ``M`` times the number of real tokens; otherwise by ``M * B``.
    """
    logits = tn.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 3:
        logits = tn.reshape(logits, (1, *logits.shape))
        targets = targets[None]
    B, M, T, V = logits.shape
    keep = targets != PAD
    n_tok = int(keep.sum())
    if n_tok == 0:
        raise ValueError("ce_loss: every target is PAD")
    tgt = np.broadcast_to(np.where(keep, targets, 0)[:, None, :], (B, M, T))
    nll = tn.cross_entropy_rowwise(logits, tgt)
    weights = np.broadcast_to(keep[:, None, :], (B, M, T)).astype(logits.data.dtype)
    total = tn.sum_(nll * weights)
    return tn.scale(total, 1.0 / (M * (n_tok if normalize else B)))


def total_loss(ce, orl, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return tn.add(ce, tn.scale(orl, lam))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class Adam:
    """Adam with bias correction; the only thing that mutates parameters."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 state: OptimizerState | None = None):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = state or OptimizerState()

    def step(self, params: dict) -> None:
        for name, p in params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        st = self.state
        st.step += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** st.step
        c2 = 1 - b2 ** st.step
        for name, p in params.items():
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = st.m.get(name)
            if m is None:
                m = st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
            v = st.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
            p.data -= upd


def optimizer_step(params: dict, state: OptimizerState, lr: float = 1e-3,
                   betas=(0.9, 0.999), eps: float = 1e-8) -> OptimizerState:
    Adam(lr, betas, eps, state).step(params)
    return state


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None
