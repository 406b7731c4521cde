"""Training, evaluation, ablation and parameter census."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from . import metrics, model
from . import objectives as ob
from . import tensor as tn
from .config import RunConfig
from .data import GridSpec, Vocab, batchify, build_vocab, decode, generate_corpus, split_corpus
from .encoder import expert_attention_map

log = logging.getLogger(__name__)

EVAL_CHUNK = 64


class TrainingDiverged(RuntimeError):
    pass


class VocabMismatch(ValueError):
    pass


@dataclass
class TrainResult:
    params: dict
    vocab: Vocab
    config: RunConfig
    history: list = field(default_factory=list)  # (step, ce, orl, total)
    val_history: list = field(default_factory=list)  # (epoch, cider)
    final_path: str | None = None
    best_path: str | None = None


@dataclass
class EvalResult:
    table: dict
    records: list

    def table_text(self) -> str:
        return "".join(f"{k}\t{v:.10f}\n" for k, v in self.table.items())

    def records_text(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def make_splits(cfg: RunConfig):
    if cfg.channels != 3:
        raise ValueError("the synthetic corpus is RGB; channels must be 3")
    corpus = generate_corpus(cfg.seed, cfg.n_samples, GridSpec(image_size=cfg.image_size))
    vocab = build_vocab(corpus)
    train, val, test = split_corpus(corpus, cfg.seed)
    return vocab, train, val, test


def train_step(params: dict, cfg: RunConfig, batch, opt: ob.Adam) -> ob.LossReport:
    logits, feats = model.forward(params, cfg, batch.images, batch.reports)
    ce = ob.ce_loss(logits, batch.reports[:, 1:], normalize=cfg.normalize_ce)
    lam = cfg.effective_lambda
    orl = ob.orthogonal_loss(feats.f_e)
    total = ob.total_loss(ce, orl, lam)
    ob.zero_grads(params)
    tn.backward(total)
    opt.step(params)
    return ob.LossReport(ce.item(), orl.item(), total.item(), lam)


def train(cfg: RunConfig, splits=None, write: bool = True) -> TrainResult:
    """Seeded end-to-end training.  Writes ``final.ckpt``, ``best.ckpt`` and
    ``metrics.log`` under ``cfg.out_dir`` when ``write``."""
    vocab, train_set, val_set, _ = splits or make_splits(cfg)
    params = model.init_params(cfg, len(vocab))
    opt = ob.Adam(cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    result = TrainResult(params, vocab, cfg)
    if write:
        os.makedirs(cfg.out_dir, exist_ok=True)
        log_fh = open(os.path.join(cfg.out_dir, "metrics.log"), "w")
        log_fh.write("step\tce\torl\ttotal\n")
    best = -math.inf
    step = 0
    try:
        for epoch in range(cfg.epochs):
            for batch in batchify(train_set, cfg.batch_size, cfg.seed * 100003 + epoch, vocab, cfg.max_len):
                try:
                    rep = train_step(params, cfg, batch, opt)
                except FloatingPointError as exc:
                    tn.current_tape().clear()
                    if write:
                        ckpt_io.save(ckpt_io.Checkpoint(cfg, vocab, params),
                                     os.path.join(cfg.out_dir, "last_good.ckpt"))
                    raise TrainingDiverged(f"step {step}: {exc}") from exc
                step += 1
                result.history.append((step, rep.ce, rep.orl, rep.total))
                if write:
                    log_fh.write(f"{step}\t{rep.ce:.8f}\t{rep.orl:.8f}\t{rep.total:.8f}\n")
            log.info("epoch %d: ce=%.4f orl=%.4f", epoch + 1, rep.ce, rep.orl)
            last = epoch + 1 == cfg.epochs
            if val_set and cfg.validate_every > 0 and ((epoch + 1) % cfg.validate_every == 0 or last):
                score = evaluate_params(params, cfg, vocab, val_set).table["CIDEr"]
                result.val_history.append((epoch + 1, score))
                if score > best:
                    best = score
                    if write:
                        result.best_path = os.path.join(cfg.out_dir, "best.ckpt")
                        ckpt_io.save(ckpt_io.Checkpoint(cfg, vocab, params), result.best_path)
    finally:
        if write:
            log_fh.close()
    if write:
        result.final_path = os.path.join(cfg.out_dir, "final.ckpt")
        ckpt_io.save(ckpt_io.Checkpoint(cfg, vocab, params), result.final_path)
    return result


def check_vocab(vocab: Vocab, samples) -> None:
    unknown = {w for s in samples for w in s.report.split() if w not in vocab.stoi}
    if unknown:
        raise VocabMismatch(f"corpus words missing from checkpoint vocab: {sorted(unknown)[:10]}")


def expert_reports(params: dict, cfg: RunConfig, vocab: Vocab, images) -> list:
    """Per image: ``(texts, winner, scores)`` under the config's aggregation
    (single expert, probability averaging, or voting)."""
    out = []
    for lo in range(0, len(images), EVAL_CHUNK):
        chunk = images[lo:lo + EVAL_CHUNK]
        if cfg.experts > 1 and not cfg.use_expert_voting:
            ids, _ = model.generate(params, cfg, chunk, averaged=True)
            out.extend(([decode(r, vocab)], 0, [0.0]) for r in ids)
            continue
        ids, _ = model.generate(params, cfg, chunk)
        for per_expert in ids:
            texts = [decode(r, vocab) for r in per_expert]
            if cfg.use_expert_voting:
                winner, scores = metrics.vote(texts)
            else:
                winner, scores = 0, [0.0] * len(texts)
            out.append((texts, winner, scores))
    return out


def score_table(candidates, references) -> dict:
    table = {f"BLEU-{n}": metrics.bleu(candidates, references, n) for n in range(1, 5)}
    table["ROUGE-L"] = metrics.corpus_rouge_l(candidates, references)
    table["CIDEr"] = metrics.corpus_cider(candidates, references)
    return table


def evaluate_params(params: dict, cfg: RunConfig, vocab: Vocab, samples) -> EvalResult:
    check_vocab(vocab, samples)
    images = np.stack([s.image for s in samples])
    gen = expert_reports(params, cfg, vocab, images)
    candidates = [texts[w] for texts, w, _ in gen]
    references = [s.report for s in samples]
    records = [{"sample": i, "winner": w, "scores": [round(x, 10) for x in sc], "reports": texts}
               for i, (texts, w, sc) in enumerate(gen)]
    return EvalResult(score_table(candidates, references), records)


def evaluate(checkpoint, samples, out_dir: str | None = None) -> EvalResult:
    """``checkpoint`` is a path or a loaded ``Checkpoint``."""
    ck = ckpt_io.load(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    res = evaluate_params(ck.params, ck.config, ck.vocab, samples)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "eval_table.tsv"), "w") as fh:
            fh.write(res.table_text())
        with open(os.path.join(out_dir, "eval_records.jsonl"), "w") as fh:
            fh.write(res.records_text())
    return res


def expert_cosine(params: dict, cfg: RunConfig, images) -> float:
    """Mean off-diagonal cosine between expert embeddings ``f_e``, averaged
    over images."""
    if cfg.experts < 2:
        return 1.0
    with tn.no_grad():
        f_e = model.encode_images(params, cfg, images).f_e.data.astype(np.float64)
    z = f_e / np.maximum(np.linalg.norm(f_e, axis=-1, keepdims=True), 1e-12)
    gram = z @ z.swapaxes(-1, -2)
    M = gram.shape[-1]
    off = ~np.eye(M, dtype=bool)
    return float(gram[:, off].mean())


def attention_maps(params: dict, cfg: RunConfig, image) -> np.ndarray:
    """Expert-to-patch attention for one image as ``[M, gh, gw]`` grids."""
    with tn.no_grad():
        feats = model.encode_images(params, cfg, image)
        amap = expert_attention_map(feats.f_e[0], feats.f_v[0]).data
    g = cfg.image_size // cfg.patch_size
    return amap.reshape(amap.shape[0], g, g)


# ------------------------------------------------------------------ ablation

ABLATION_ROWS = (
    ("BASELINE", dict(use_bilinear_encoder=False, use_expert_tokens=False,
                      use_orthogonal_loss=False, use_expert_voting=False)),
    ("+BE", dict(use_bilinear_encoder=True, use_expert_tokens=False,
                 use_orthogonal_loss=False, use_expert_voting=False)),
    ("+BE+ETs", dict(use_bilinear_encoder=True, use_expert_tokens=True,
                     use_orthogonal_loss=False, use_expert_voting=False)),
    ("+BE+ETs+OrL", dict(use_bilinear_encoder=True, use_expert_tokens=True,
                         use_orthogonal_loss=True, use_expert_voting=False)),
    ("+BE+ETs+OrL+EV", dict(use_bilinear_encoder=True, use_expert_tokens=True,
                            use_orthogonal_loss=True, use_expert_voting=True)),
)
ABLATION_METRICS = ("BLEU-4", "ROUGE-L", "CIDEr")


@dataclass
class AblationResult:
    rows: list  # (name, {metric: value}, avg_delta or None)
    trained: dict = field(default_factory=dict)  # row name -> TrainResult

    def text(self) -> str:
        head = f"{'#':<3}{'Model':<18}" + "".join(f"{m:>10}" for m in ABLATION_METRICS) + f"{'AVG. Δ':>10}\n"
        lines = [head]
        for i, (name, vals, delta) in enumerate(self.rows, 1):
            d = "—" if delta is None else f"{delta * 100:+.1f}%"
            lines.append(f"{i:<3}{name:<18}" + "".join(f"{vals[m]:>10.3f}" for m in ABLATION_METRICS)
                         + f"{d:>10}\n")
        return "".join(lines)


def avg_delta(vals: dict, base: dict):
    """Mean relative change over the ablation metrics; metrics with a zero
    baseline are skipped."""
    rel = [vals[m] / base[m] - 1 for m in ABLATION_METRICS if base[m] > 0]
    return sum(rel) / len(rel) if rel else float("nan")


def ablate(base: RunConfig, splits=None, write: bool = False) -> AblationResult:
    """Train and evaluate the five cumulative configurations.

    Rows that differ only in expert voting share one trained model, since
    voting acts at inference time and training is deterministic.
    """
    splits = splits or make_splits(base)
    vocab, _, _, test = splits
    rows, trained, cache = [], {}, {}
    for name, flags in ABLATION_ROWS:
        cfg = base.replace(**flags, out_dir=os.path.join(base.out_dir, name.strip("+").replace("+", "_")))
        key = cfg.replace(use_expert_voting=False, out_dir="").to_text()
        if key not in cache:
            cache[key] = train(cfg, splits, write=write)
        tr = cache[key]
        trained[name] = tr
        table = evaluate_params(tr.params, cfg, vocab, test).table
        vals = {m: table[m] for m in ABLATION_METRICS}
        rows.append((name, vals, None if not rows else avg_delta(vals, rows[0][1])))
    return AblationResult(rows, trained)


def param_count(cfg: RunConfig, vocab_size: int | None = None) -> dict:
    if vocab_size is None:
        vocab_size = len(build_vocab(generate_corpus(0, 200)))
    return model.param_census(model.init_params(cfg, vocab_size))
