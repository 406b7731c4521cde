"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # architecture
    image_size: int = 64
    channels: int = 3
    patch_size: int = 16
    dim: int = 64
    heads: int = 4
    vit_layers: int = 2
    num_expert: int = 7
    bilinear_dim: int = 64
    mid_dim: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    max_len: int = 48
    ln_eps: float = 1e-5
    init_std: float = 0.02
    # training
    seed: int = 0
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 2.0
    n_samples: int = 500
    normalize_ce: bool = True
    validate_every: int = 1
    # ablation switches
    use_bilinear_encoder: bool = True
    use_expert_tokens: bool = True
    use_orthogonal_loss: bool = True
    use_expert_voting: bool = True
    vote_idf: str = "candidates"
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def experts(self) -> int:
        """Expert count actually instantiated."""
        return self.num_expert if self.use_expert_tokens else 1

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.use_orthogonal_loss else 0.0

    def validate(self):
        if self.num_expert < 1:
            raise ConfigError("num_expert must be >= 1")
        if self.dim % self.heads:
            raise ConfigError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.use_expert_voting and self.experts < 2:
            raise ConfigError("use_expert_voting requires more than one expert")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.enc_layers < 1 and self.use_bilinear_encoder:
            raise ConfigError("enc_layers must be >= 1 with the bilinear encoder on")
        if self.vote_idf not in ("candidates",):
            raise ConfigError(f"unsupported vote_idf {self.vote_idf!r}")
        for name in ("batch_size", "dec_layers", "bilinear_dim", "mid_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kw[key] = _parse(value, types[key], key)
        return cls(**kw)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(value: str, typ, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


# slower settings of the original full-scale training
REFERENCE_PRESET = dict(learning_rate=1e-4, lam=2.0, batch_size=16, enc_layers=2, dec_layers=2, epochs=20)
