"""
Shared pytest fixtures
Modules live at the repository root, so it goes on sys.path first.
"""

import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from attn_calibration import AttentionDump  # noqa: E402
from var_model import ModelConfig, ScaleSchedule, build_model  # noqa: E402

DESK_SIDES = (1, 2, 3, 4, 5, 6)


@pytest.fixture(scope='session')
def tiny_config():
    return ModelConfig(schedule=ScaleSchedule(DESK_SIDES), depth=2, heads=2, dim=16, vocab=32, seed=3)


@pytest.fixture(scope='session')
def tiny_model(tiny_config):
    return build_model(tiny_config)


@pytest.fixture(scope='session')
def desk_config():
    return ModelConfig()


@pytest.fixture(scope='session')
def desk_model(desk_config):
    return build_model(desk_config)


@pytest.fixture(scope='session')
def planted_model():
    return build_model(ModelConfig(outlier_factor=100.0))


def random_dump(sides, depth=1, heads=1, samples=2, seed=0, sharpness=4.0):
    """Synthetic dump with row-normalized random attention (higher sharpness = peakier rows)"""
    schedule = ScaleSchedule(tuple(sides))
    gen = torch.Generator().manual_seed(seed)
    dump = AttentionDump(schedule, depth, heads, labels=list(range(samples)))
    for _ in range(samples):
        blocks = []
        for _ in range(depth):
            per_scale = []
            for k in range(1, schedule.num_scales + 1):
                raw = torch.rand(heads, schedule.token_count(k), schedule.cum_tokens(k), generator=gen) ** sharpness
                raw = raw + 1e-6
                per_scale.append((raw / raw.sum(dim=-1, keepdim=True)).to(torch.float32))
            blocks.append(per_scale)
        dump.maps.append(blocks)
    return dump


@pytest.fixture
def make_dump():
    return random_dump
