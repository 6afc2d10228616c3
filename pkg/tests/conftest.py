import sys
from pathlib import Path

import numpy as np
import pytest

SCRIPTS_DIR = Path(__file__).resolve().parent.parent / "scripts"
if str(SCRIPTS_DIR) not in sys.path:
    sys.path.insert(0, str(SCRIPTS_DIR))

from neglearn.datasets import Label, LabeledSample


def make_digit_samples(n: int = 200, size: int = 8, seed: int = 0) -> list[LabeledSample]:
    """Cheap stand-in samples: random images tagged with digits 0-9."""
    rng = np.random.default_rng(seed)
    return [
        LabeledSample(
            image=rng.integers(0, 256, size=(1, size, size), dtype=np.uint8),
            label=Label.NORMAL,
            source_id=i,
            class_tag=int(i % 10),
        )
        for i in range(n)
    ]


@pytest.fixture
def digit_samples() -> list[LabeledSample]:
    return make_digit_samples()


@pytest.fixture(scope="session")
def tiny_synthetic_split():
    from neglearn.datasets import make_synthetic_patch_dataset

    return make_synthetic_patch_dataset(60, 12, seed=5)
