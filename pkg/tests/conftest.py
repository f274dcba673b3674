import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from usrn.grids import FeatureGrid, LabelGrid
from usrn.netcore import init_params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_model(seed=0, share_mode="low", in_dim=3, width=4, classes=3, subclasses=5):
    return init_params(in_dim, width, classes, subclasses, share_mode, seed=seed)


def random_instance(seed, h=2, w=3, in_dim=3, classes=3, subclasses=5, share_mode="low",
                    with_ignore=True):
    """Random small model + input + class/subclass targets (some IGNORE pixels)."""
    r = np.random.default_rng(seed)
    params = small_model(seed=seed, share_mode=share_mode, in_dim=in_dim,
                         classes=classes, subclasses=subclasses)
    grid = FeatureGrid(r.normal(size=(h, w, in_dim)))
    hi_cls = classes + 1 if with_ignore else classes
    hi_sub = subclasses + 1 if with_ignore else subclasses
    target_cls = LabelGrid(r.integers(0, hi_cls, size=(h, w)), classes)
    target_sub = LabelGrid(r.integers(0, hi_sub, size=(h, w)), subclasses)
    return params, grid, target_cls, target_sub
