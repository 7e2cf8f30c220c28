import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from moon.config import load_config  # noqa: E402
from moon.harness import CaseArrays  # noqa: E402
from moon.synth import SynthConfig, case_grades, synthesize_case  # noqa: E402

TINY_DIMS = {"esophagus": (8, 8, 12), "liver": (12, 12, 6), "spleen": (10, 10, 6)}

TINY = {
    "model.encoder": {"channels": [4, 8, 8, 8], "heads": 2},
    "model.input_dims": {o: list(d) for o, d in TINY_DIMS.items()},
    "model.ori_grid": [2, 2, 2],
    "synth.esophagus_dims": list(TINY_DIMS["esophagus"]),
    "synth.liver_dims": list(TINY_DIMS["liver"]),
    "synth.spleen_dims": list(TINY_DIMS["spleen"]),
    "train.lr": 1e-3,
    "train.epochs": 2,
}


def tiny_config(**overrides):
    items = dict(TINY)
    items.update({k.replace("__", "."): v for k, v in overrides.items()})
    return load_config("default", list(items.items()))


def tiny_arrays(counts=(4, 4, 4), seed=0) -> CaseArrays:
    cfg = SynthConfig(seed=seed, counts=counts, esophagus_dims=TINY_DIMS["esophagus"],
                      liver_dims=TINY_DIMS["liver"], spleen_dims=TINY_DIMS["spleen"])
    cases = [synthesize_case((seed, i), g, cfg) for i, g in enumerate(case_grades(cfg))]
    return CaseArrays(
        [f"case{i:04d}" for i in range(len(cases))],
        {o: np.stack([c.volumes[o].data for c in cases]) for o in TINY_DIMS},
        np.array([int(c.grade) for c in cases]),
        np.stack([c.lesion_mask for c in cases]),
    )


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_data():
    return tiny_arrays()
