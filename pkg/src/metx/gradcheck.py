"""Finite-difference audit of every layer's backward pass.

Each check builds a tiny instance (extents <= 8) with values drawn from
[-1, 1], reduces its output to a scalar through a fixed random projection,
and compares ``backward`` against central differences.  Everything runs in
float64 so the comparison measures the derivative, not float32 rounding.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .bilinear import bilinear_encoder_forward, eba
from .config import RunConfig
from .decoder import adjust, decoder_forward
from .encoder import embed_to_bilinear, EncodedTokens, mlp, msa, vit_forward
from .objectives import ce_loss, orthogonal_loss, total_loss
from .tensor import Tensor

TOLERANCE = 1e-2
STEP = 1e-4


@dataclass
class LayerReport:
    layer: str
    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    kinks: int = 0

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE


@dataclass
class GradcheckReport:
    layers: list
    seconds: float
    covered: set = field(default_factory=set)

    @property
    def ok(self) -> bool:
        return all(l.ok for l in self.layers)

    def text(self) -> str:
        lines = [f"{'layer':<22}{'max rel err':>14}{'kinks':>7}  status"]
        for l in self.layers:
            lines.append(f"{l.layer:<22}{l.max_rel_error:>14.3e}{l.kinks:>7}  {'ok' if l.ok else 'FAIL'}")
        lines.append(f"{len(self.covered)} parameter tensors covered in {self.seconds:.1f}s")
        return "\n".join(lines)


def tiny_config(**kw) -> RunConfig:
    base = dict(image_size=4, channels=2, patch_size=2, dim=8, heads=2, vit_layers=1,
                num_expert=3, bilinear_dim=4, mid_dim=2, enc_layers=2, dec_layers=2,
                max_len=4, ln_eps=1e-5, init_std=0.5)
    base.update(kw)
    return RunConfig(**base)


def _uniform(rng, shape, name=None):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True, name=name)


def check(fn, leaves: dict, rng, layer: str, coords: int | None = None) -> LayerReport:
    """Compare analytic and numeric gradients of ``sum(fn() * R)``.

    ``coords`` limits the finite-difference probe to that many random entries
    per leaf (used for the whole-model and zero-head checks).
    """
    out = fn()
    proj = rng.uniform(-1, 1, size=out.shape) if out.size > 1 else None

    def scalar():
        o = fn()
        return tn.sum_(o * proj) if proj is not None else tn.sum_(o)

    for t in leaves.values():
        t.grad = None
    tn.backward(scalar())
    report = LayerReport(layer, 0.0)
    for name, t in leaves.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        idx = None if coords is None or t.size <= coords else rng.choice(t.size, size=coords, replace=False)
        err = _leaf_error(scalar, t, analytic, idx, STEP)
        if err > TOLERANCE:
            # a ReLU kink within one step of the probe point biases the central
            # difference; a true backward bug does not shrink with the step
            retry = _leaf_error(scalar, t, analytic, idx, STEP / 10)
            if retry <= TOLERANCE:
                report.kinks += 1
                err = retry
        report.per_param[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    return report


def _leaf_error(scalar, t: Tensor, analytic, idx, step: float) -> float:
    if idx is None:
        return tn.max_relative_error(analytic, tn.finite_diff_grad(lambda _x: scalar(), t, step))
    return tn.max_relative_error(analytic.reshape(-1)[idx], _fd_at(scalar, t, idx, step))


def _fd_at(scalar, t: Tensor, idx, step: float) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.zeros(len(idx))
    with tn.no_grad():
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            hi = scalar().item()
            flat[i] = orig - step
            lo = scalar().item()
            flat[i] = orig
            out[k] = (hi - lo) / (2 * step)
    return out


def _uniform_params(params: dict, rng) -> dict:
    for name, t in params.items():
        t.data = rng.uniform(-1, 1, size=t.shape)
    return params


# --------------------------------------------------------------- layer cases


def case_matmul_softmax_ce(rng):
    a, b = _uniform(rng, (3, 4), "a"), _uniform(rng, (4, 5), "b")
    tgt = rng.integers(0, 5, size=3)
    return "matmul+softmax+ce", (lambda: tn.cross_entropy_rowwise(tn.matmul(a, b), tgt)), {"a": a, "b": b}


def case_layer_norm(rng):
    x, g, b = _uniform(rng, (3, 6)), _uniform(rng, (6,)), _uniform(rng, (6,))
    return "layer_norm", (lambda: tn.layer_norm(x, g, b)), {"x": x, "gain": g, "bias": b}


def case_msa(rng, cfg):
    D = cfg.dim
    p = {f"a.{n}": _uniform(rng, (D, D)) for n in ("wq", "wk", "wv", "wo")}
    p.update({f"a.{n}_bias": _uniform(rng, (D,)) for n in ("wq", "wk", "wv", "wo")})
    x = _uniform(rng, (2, 5, D))
    return "msa", (lambda: msa(x, p, "a", cfg.heads)), {"x": x, **p}


def case_mlp(rng, cfg):
    D = cfg.dim
    p = {"m.w1": _uniform(rng, (D, 4 * D) if 4 * D <= 8 else (D, 8)), }
    H = p["m.w1"].shape[1]
    p.update({"m.b1": _uniform(rng, (H,)), "m.w2": _uniform(rng, (H, D)), "m.b2": _uniform(rng, (D,))})
    x = _uniform(rng, (2, 3, D))
    return "mlp", (lambda: mlp(x, p, "m")), {"x": x, **p}


def case_vit(rng, cfg):
    from .encoder import init_vit
    p = _uniform_params(init_vit(cfg, rng), rng)
    img = _uniform(rng, (cfg.image_size, cfg.image_size, cfg.channels))

    def fn():
        z = vit_forward(img, p, cfg)
        return tn.concat([z.z_v, z.z_e], axis=0)

    return "vit_encoder", fn, {"image": img, **p}


def case_embed(rng, cfg):
    zv, ze = _uniform(rng, (4, cfg.dim)), _uniform(rng, (3, cfg.dim))
    p = {"embed.w": _uniform(rng, (cfg.dim, cfg.bilinear_dim)), "embed.b": _uniform(rng, (cfg.bilinear_dim,))}

    def fn():
        z = embed_to_bilinear(EncodedTokens(zv, ze), p)
        return tn.concat([z.z_v, z.z_e], axis=0)

    return "embed", fn, {"z_v": zv, "z_e": ze, **p}


def _eba_params(rng, d_q, d_k, d_v, d_b, d_mid, prefix="e"):
    shapes = {"W_k": (d_k, d_b), "W_v": (d_v, d_b), "W_qk": (d_q, d_b), "W_qv": (d_q, d_b),
              "W_Bk": (d_b, d_mid), "w_s": (d_mid, 1), "W_c": (d_mid, d_b)}
    return {f"{prefix}.{k}": _uniform(rng, s) for k, s in shapes.items()}


def case_eba(rng, masked: bool):
    Tq, Tk, D = (4, 4, 5) if masked else (3, 5, 4)
    p = _eba_params(rng, D, D, D, 6, 3)
    q, k, v = _uniform(rng, (2, Tq, D)), _uniform(rng, (2, Tk, D)), _uniform(rng, (2, Tk, D))
    mask = np.tril(np.ones((Tq, Tk), bool)) if masked else None
    name = "eba_masked" if masked else "eba"
    return name, (lambda: eba(q, k, v, p, "e", mask=mask)), {"query": q, "key": k, "value": v, **p}


def case_eba_paths(rng):
    """Spatial weights and channel gate checked through their own outputs."""
    p = _eba_params(rng, 4, 4, 4, 5, 3)
    q, k = _uniform(rng, (1, 3, 4)), _uniform(rng, (1, 4, 4))

    def fn():
        tr = {}
        out = eba(q, k, k, p, "e", trace=tr)
        return out

    return "eba_spatial_channel", fn, {"query": q, "key": k, **p}


def case_bilinear_encoder(rng, cfg):
    from .bilinear import init_bilinear_encoder
    p = _uniform_params(init_bilinear_encoder(cfg, rng), rng)
    ze, zv = _uniform(rng, (cfg.experts, cfg.bilinear_dim)), _uniform(rng, (4, cfg.bilinear_dim))

    def fn():
        fe, fv = bilinear_encoder_forward(ze, zv, p, cfg.enc_layers)
        return tn.concat([fe, fv], axis=0)

    return "bilinear_encoder", fn, {"z_e": ze, "z_v": zv, **p}


def case_adjust(rng):
    fe, x = _uniform(rng, (3, 5)), _uniform(rng, (3, 4, 5))
    We, Wv = _uniform(rng, (5, 5)), _uniform(rng, (5, 5))
    return "adjust", (lambda: adjust(fe, x, We, Wv)), {"f_e": fe, "x": x, "W_e": We, "W_v": Wv}


def case_decoder(rng, cfg, zero_head: bool = False):
    from .decoder import init_decoder
    V = 6
    p = _uniform_params(init_decoder(cfg, V, rng), rng)
    if zero_head:
        p["dec.head"].data[:] = 0
    fe, fv = _uniform(rng, (cfg.experts, cfg.bilinear_dim)), _uniform(rng, (4, cfg.bilinear_dim))
    ids = np.concatenate([[1], rng.integers(4, V, size=cfg.max_len - 2)])
    name = "decoder_zero_head" if zero_head else "decoder"
    return name, (lambda: decoder_forward(fe, fv, ids, p, cfg)), {"f_e": fe, "f_v": fv, **p}


def case_orthogonal(rng, cfg):
    z = _uniform(rng, (2, cfg.experts, 5))
    return "orthogonal_loss", (lambda: orthogonal_loss(z)), {"z_e": z}


def case_ce(rng):
    logits = _uniform(rng, (2, 3, 4, 6))
    tgt = rng.integers(1, 6, size=(2, 4))
    tgt[1, 3] = 0  # PAD is skipped
    return "ce_loss", (lambda: ce_loss(logits, tgt)), {"logits": logits}


def case_total(rng, cfg):
    logits = _uniform(rng, (3, 4, 6))
    z = _uniform(rng, (cfg.experts, 5))
    tgt = rng.integers(1, 6, size=4)
    return "total_loss", (lambda: total_loss(ce_loss(logits, tgt), orthogonal_loss(z), 2.0)), \
        {"logits": logits, "z_e": z}


def case_full_model(rng, cfg):
    from . import model
    V = 6
    p = _uniform_params(model.init_params(cfg, V, seed=int(rng.integers(1 << 30))), rng)
    images = rng.uniform(0, 1, size=(2, cfg.image_size, cfg.image_size, cfg.channels))
    ids = np.concatenate([np.ones((2, 1), np.int64), rng.integers(4, V, size=(2, cfg.max_len - 1))], axis=1)
    ids[1, -1] = 0

    def fn():
        logits, feats = model.forward(p, cfg, images, ids)
        return total_loss(ce_loss(logits, ids[:, 1:]), orthogonal_loss(feats.f_e), 2.0)

    return "full_model", fn, p


def run(cfg: RunConfig | None = None, n_trials: int = 10, seed: int = 0, full_coords: int = 2) -> GradcheckReport:
    cfg = cfg or tiny_config()
    start = time.time()
    worst: dict = {}
    covered = set()
    with tn.precision(np.float64):
        for trial in range(n_trials):
            rng = np.random.default_rng([seed, trial])
            cases = [
                case_matmul_softmax_ce(rng), case_layer_norm(rng), case_msa(rng, cfg), case_mlp(rng, cfg),
                case_vit(rng, cfg), case_embed(rng, cfg), case_eba(rng, False), case_eba(rng, True),
                case_eba_paths(rng), case_bilinear_encoder(rng, cfg), case_adjust(rng),
                case_decoder(rng, cfg), case_decoder(rng, cfg, zero_head=True),
                case_orthogonal(rng, cfg), case_ce(rng), case_total(rng, cfg),
            ]
            for name, fn, leaves in cases:
                # the zero-head case repeats the decoder graph, so a sample of entries suffices
                rep = check(fn, leaves, rng, name, coords=3 if name == "decoder_zero_head" else None)
                _merge(worst, rep)
            name, fn, leaves = case_full_model(rng, cfg)
            rep = check(fn, leaves, rng, name, coords=full_coords)
            covered.update(leaves)
            _merge(worst, rep)
    return GradcheckReport(list(worst.values()), time.time() - start, covered)


def _merge(worst: dict, rep: LayerReport) -> None:
    cur = worst.get(rep.layer)
    if cur is None:
        worst[rep.layer] = rep
        return
    for k, v in rep.per_param.items():
        cur.per_param[k] = max(cur.per_param.get(k, 0.0), v)
    cur.max_rel_error = max(cur.max_rel_error, rep.max_rel_error)
    cur.kinks += rep.kinks
