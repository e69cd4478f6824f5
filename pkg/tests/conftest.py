import copy

import numpy as np
import pytest

from localmim.config import from_dict

TINY = {
    "model": {"arch": "columnar", "img_size": 32, "patch_size": 8, "embed_dim": 16, "depth": 8, "num_heads": 2,
              "decoder": {"dim": 16, "heads": 2, "blocks": 1}},
    "train": {"batch_size": 4, "epochs": 2, "warmup_epochs": 1, "seed": 0, "dtype": "float64"},
    "data": {"count": 8},
    "out_dir": "out",
}

TINY_PYRAMID = {
    "model": {"arch": "pyramid", "img_size": 32, "patch_size": 2, "embed_dim": 8, "depth": [1, 1, 2, 1],
              "num_heads": [1, 2, 2, 4], "decoder": {"dim": 16, "heads": 2, "blocks": 1}},
    "train": {"batch_size": 2, "epochs": 2, "warmup_epochs": 1, "seed": 0, "dtype": "float64"},
    "data": {"count": 4},
    "out_dir": "out",
}


def merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


@pytest.fixture
def make_cfg(tmp_path):
    def build(base=TINY, **sections):
        doc = merge(base, sections)
        doc.setdefault("out_dir", str(tmp_path / "run"))
        if doc["out_dir"] == "out":
            doc["out_dir"] = str(tmp_path / "run")
        return from_dict(doc)

    return build


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
