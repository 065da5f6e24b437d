import os

# pin BLAS pools before numpy loads so training runs are reproducible
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from sdrl import data as sdata
from sdrl import nn


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small generated dataset shared by pipeline-level tests."""
    root = tmp_path_factory.mktemp("tinydata")
    gen = sdata.GeneratorConfig(size=128, building_count=(6, 10), building_size=(8, 18))
    manifest = sdata.generate_dataset(root, "tiny", 8, 64, 7, generator=gen,
                                      fractions={"train": 0.7, "val": 0.1, "test": 0.2})
    return root, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_encoder():
    return nn.EncoderConfig(stage_channels=[8, 16], blocks_per_stage=1, out_channels=16)


@pytest.fixture
def small_heads():
    return nn.HeadConfig(projector_hidden=24, predictor_hidden=8, out_dim=24)
