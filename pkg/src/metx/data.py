"""Synthetic shape-grid corpus, whitespace vocabulary and batching.

Each image is a 64x64x3 canvas split into a 2x2 grid.  A region is either
empty or holds one shape (square, disc, cross, ring) in one of three colors.
The report has one sentence per region in raster order, so its content is
fully determined by the pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

SHAPES = ("square", "disc", "cross", "ring")
COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}
REGION_NAMES = ("upper left", "upper right", "lower left", "lower right")


@dataclass(frozen=True)
class GridSpec:
    image_size: int = 64
    grid: int = 2
    empty_prob: float = 0.25
    shapes: tuple = SHAPES
    colors: tuple = tuple(COLORS)

    @property
    def cell(self) -> int:
        return self.image_size // self.grid

    def region_names(self) -> tuple:
        if self.grid == 2:
            return REGION_NAMES
        return tuple(f"row {r} column {c}" for r in range(self.grid) for c in range(self.grid))


@dataclass
class Sample:
    image: np.ndarray  # [H, W, C] float32 in [0, 1]
    report: str
    regions: tuple = ()  # per region: None or (color, shape)


@dataclass
class Vocab:
    itos: list
    stoi: dict = field(init=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != RESERVED:
            raise ValueError("vocab must start with the reserved tokens")
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocab tokens must be unique")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos


@dataclass
class Batch:
    images: np.ndarray  # [B, H, W, C]
    reports: np.ndarray  # [B, T] int64, PAD-filled after EOS
    lengths: np.ndarray  # [B]
    indices: np.ndarray  # positions in the source corpus


# ------------------------------------------------------------------ rendering


def _shape_mask(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of a shape on a ``size x size`` cell, with jitter."""
    extent = int(rng.integers(size // 2, size - 6))
    extent -= extent % 2
    off_r = int(rng.integers(2, size - extent - 1))
    off_c = int(rng.integers(2, size - extent - 1))
    yy, xx = np.mgrid[0:extent, 0:extent].astype(np.float64) + 0.5
    c = extent / 2
    r2 = (yy - c) ** 2 + (xx - c) ** 2
    if shape == "square":
        m = np.ones((extent, extent), bool)
    elif shape == "disc":
        m = r2 <= c ** 2
    elif shape == "ring":
        m = (r2 <= c ** 2) & (r2 >= (0.55 * c) ** 2)
    elif shape == "cross":
        w = extent / 3
        m = (np.abs(yy - c) <= w / 2) | (np.abs(xx - c) <= w / 2)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    full = np.zeros((size, size), bool)
    full[off_r:off_r + extent, off_c:off_c + extent] = m
    return full


def render_report(regions: Sequence, spec: GridSpec = GridSpec()) -> str:
    """Template text for a region descriptor (None = empty)."""
    parts = []
    for name, content in zip(spec.region_names(), regions):
        if content is None:
            parts.append(f"the {name} is clear .")
        else:
            color, shape = content
            parts.append(f"there is a {color} {shape} in the {name} .")
    return " ".join(parts)


def make_sample(seed: int, index: int, spec: GridSpec = GridSpec()) -> Sample:
    rng = np.random.default_rng([seed, index])
    size, cell = spec.image_size, spec.cell
    image = np.zeros((size, size, 3), np.float32)
    regions = []
    for r in range(spec.grid):
        for c in range(spec.grid):
            if rng.random() < spec.empty_prob:
                regions.append(None)
                continue
            shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
            color = spec.colors[int(rng.integers(len(spec.colors)))]
            mask = _shape_mask(shape, cell, rng)
            sl = image[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell]
            sl[mask] = COLORS[color]
            regions.append((color, shape))
    regions = tuple(regions)
    return Sample(image=image, report=render_report(regions, spec), regions=regions)


def generate_corpus(seed: int, n_samples: int, grid_spec: GridSpec = GridSpec()) -> list:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return [make_sample(seed, i, grid_spec) for i in range(n_samples)]


def describe_image(image: np.ndarray, spec: GridSpec = GridSpec()) -> tuple:
    """Recover the region descriptor from pixels alone."""
    cell = spec.cell
    out = []
    for r in range(spec.grid):
        for c in range(spec.grid):
            sl = image[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell]
            lit = sl.max(axis=2) > 0.5
            if not lit.any():
                out.append(None)
                continue
            channel = int(np.argmax(sl[lit].sum(axis=0)))
            color = ("red", "green", "blue")[channel]
            rows = np.flatnonzero(lit.any(axis=1))
            cols = np.flatnonzero(lit.any(axis=0))
            box = lit[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
            h, w = box.shape
            fill = box.mean()
            centre = box[h // 2 - 1:h // 2 + 1, w // 2 - 1:w // 2 + 1].all()
            if fill > 0.97:
                shape = "square"
            elif not centre:
                shape = "ring"
            elif fill > 0.68:
                shape = "disc"
            else:
                shape = "cross"
            out.append((color, shape))
    return tuple(out)


# ---------------------------------------------------------------- vocabulary


def build_vocab(corpus: Sequence) -> Vocab:
    if len(corpus) == 0:
        raise ValueError("build_vocab needs a non-empty corpus")
    words = set()
    for s in corpus:
        text = s.report if isinstance(s, Sample) else s
        words.update(text.split())
    words -= set(RESERVED)
    return Vocab(list(RESERVED) + sorted(words))


def encode(text: str, vocab: Vocab) -> list:
    return [BOS] + [vocab.stoi.get(w, UNK) for w in text.split()] + [EOS]


def decode(ids, vocab: Vocab) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.itos[i])
    return " ".join(words)


# ------------------------------------------------------------------ batching


def collate(samples: Sequence, vocab: Vocab, t_max: int = 48, indices=None) -> Batch:
    ids = [encode(s.report, vocab) for s in samples]
    for seq in ids:
        if len(seq) > t_max:
            raise ValueError(f"report of {len(seq)} tokens exceeds t_max={t_max}")
    T = max(len(seq) for seq in ids)
    reports = np.full((len(ids), T), PAD, np.int64)
    for i, seq in enumerate(ids):
        reports[i, :len(seq)] = seq
    return Batch(
        images=np.stack([s.image for s in samples]).astype(np.float32),
        reports=reports,
        lengths=np.array([len(seq) for seq in ids], np.int64),
        indices=np.arange(len(samples)) if indices is None else np.asarray(indices),
    )


def batchify(corpus: Sequence, batch_size: int, shuffle_seed: int | None,
             vocab: Vocab, t_max: int = 48) -> Iterator[Batch]:
    """Yield batches; ``shuffle_seed=None`` keeps corpus order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(corpus))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(corpus))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield collate([corpus[i] for i in idx], vocab, t_max, idx)


def split_corpus(corpus: Sequence, seed: int, fractions=(0.8, 0.1, 0.1)) -> tuple:
    """Seeded train/val/test partition."""
    n = len(corpus)
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    n_train = n - n_val - n_test
    pick = lambda ix: [corpus[i] for i in sorted(ix)]
    return (pick(order[:n_train]), pick(order[n_train:n_train + n_val]),
            pick(order[n_train + n_val:]))


# ------------------------------------------------------------- export/import


def export_corpus(corpus: Sequence, path) -> None:
    """One JSON object per line: ``id``, ``shape``, ``image_hex``, ``report``.

    ``image_hex`` is the image quantized to uint8 (``round(v * 255)``) in
    row-major (row, col, channel) order, hex encoded.
    """
    with open(path, "w") as fh:
        for i, s in enumerate(corpus):
            q = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
            fh.write(json.dumps({"id": i, "shape": list(q.shape),
                                 "image_hex": q.tobytes().hex(), "report": s.report}) + "\n")


def import_corpus(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            img = np.frombuffer(bytes.fromhex(rec["image_hex"]), np.uint8).reshape(rec["shape"])
            out.append(Sample(image=(img.astype(np.float32) / 255).astype(np.float32), report=rec["report"]))
    return out
