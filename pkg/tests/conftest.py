import numpy as np
import pytest

from metx.config import RunConfig


def tiny(**kw) -> RunConfig:
    base = dict(image_size=32, channels=3, patch_size=8, dim=8, heads=2, vit_layers=1,
                num_expert=3, bilinear_dim=8, mid_dim=4, enc_layers=1, dec_layers=1,
                max_len=12, n_samples=24, epochs=1, batch_size=8, out_dir="")
    base.update(kw)
    base.setdefault("use_expert_voting", base["num_expert"] > 1 and base.get("use_expert_tokens", True))
    return RunConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_run(**kw):
    """``tiny`` with room for full-length reports, for anything that trains."""
    kw.setdefault("max_len", 48)
    return tiny(**kw)
