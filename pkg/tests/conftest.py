"""Shared fixtures.

The expensive frozen artifacts (codec, style encoder, shape classifier, base
generative model) are built once per session and shared by every test that
needs them. Point FLOWSTYLE_TEST_WARMUPS at a directory to reuse artifacts
across sessions; otherwise they are trained into a session tmp dir.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def warmup_dir(tmp_path_factory) -> Path:
    from flowstyle.trainer import ensure_warmups

    override = os.environ.get("FLOWSTYLE_TEST_WARMUPS")
    if override:
        out = Path(override)
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = tmp_path_factory.mktemp("warmups")
    return ensure_warmups(out)


@pytest.fixture(scope="session")
def codec(warmup_dir):
    from flowstyle.encoders import ImageCodec, load_checkpoint

    c = ImageCodec()
    load_checkpoint(warmup_dir / "codec.pt", c)
    c.eval()
    return c


@pytest.fixture(scope="session")
def style_encoder(warmup_dir):
    from flowstyle.encoders import StyleEncoder, load_checkpoint

    enc = StyleEncoder()
    load_checkpoint(warmup_dir / "style_encoder.pt", enc)
    enc.eval()
    return enc


@pytest.fixture(scope="session")
def classifier(warmup_dir):
    from flowstyle.evalbench import load_classifier

    return load_classifier(warmup_dir / "classifier.pt")


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory) -> Path:
    """A small curated triplet dataset shared across training tests."""
    from flowstyle import synthworld as sw

    out = tmp_path_factory.mktemp("dataset")
    cfg = sw.DatasetConfig(preserved=48, shifted=48, seed=7)
    sw.build_dataset(cfg, out)
    return out


@pytest.fixture(scope="session")
def triplet_data(dataset_dir):
    from flowstyle.trainer import TripletDataset

    return TripletDataset(dataset_dir / "manifest.jsonl")


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
