import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes `oracles` importable

from soleprint.raster import FootprintImage


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_image(pixels, ppi=200.0, id="test"):
    return FootprintImage(pixels=np.asarray(pixels, dtype=np.float64), ppi=ppi, id=id)


def random_bitonal(rng, h=64, w=64, ink_fraction=0.4):
    return (rng.random((h, w)) >= ink_fraction).astype(np.float64)


@pytest.fixture
def manifest_csv(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text(
        "id,image_path,sex,age,side,source,ridge_counts\n"
        "a01,a01.png,F,34,left,walker,18;17;17\n"
        "a02,a02.png,M,51,right,walker,\n"
        "a03,a03.png,F,22,right,bournemouth,15;16;14\n",
        encoding="utf-8",
    )
    return path
