import hashlib
import os
import pathlib
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from hddnet import evaluation as EV  # noqa: E402
from hddnet import formats as F  # noqa: E402
from hddnet import training as TR  # noqa: E402
from hddnet.config import Config  # noqa: E402

ROOT = pathlib.Path(__file__).resolve().parents[1]
RUN_CACHE = pathlib.Path(os.environ.get("HDDNET_RUN_CACHE", ROOT / ".runs"))

# Shared desk budget for every acceptance training run: 250 alternating
# steps of 8 pairs = 2000 synthetic 96x96 pairs.
DESK = {"train.steps": "250", "train.batch": "8", "train.lr": "0.05"}
VARIANTS = {
    "rd": {},
    "msip": {"loss.detector": "msip"},
    "trip": {"loss.detector": "trip"},
    "single_scale": {"descriptor.multiscale": "off"},
    "no_split": {"block.sign_split": "off"},
}


def _source_digest():
    h = hashlib.sha256()
    for path in sorted((ROOT / "src" / "hddnet").glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


class Runs:
    """Trains each desk variant once; finished checkpoints are reused while code and config match."""

    def __init__(self):
        self.corpus = TR.make_corpus(0, 12)
        self.tag = _source_digest()
        self._models = {}

    def config(self, name):
        return Config().with_flat({**DESK, **VARIANTS[name]})

    def model(self, name):
        if name not in self._models:
            cfg = self.config(name)
            path = RUN_CACHE / f"{name}-{cfg.digest()[:12]}-{self.tag}.hddw"
            if path.exists():
                model, _ = F.load_checkpoint(path)
            else:
                model, _ = TR.train(cfg, self.corpus)
                path.parent.mkdir(parents=True, exist_ok=True)
                F.save_checkpoint(path, model)
            self._models[name] = model
        return self._models[name]

    def init_model(self, name="rd"):
        cfg = self.config(name)
        return TR.init_weights(np.random.default_rng(cfg.train_seed), cfg)

    def evaluate(self, model, split="viewpoint"):
        cfg = model.config
        pairs = EV.heldout_pairs(cfg, EV.heldout_corpus(cfg), split)
        return EV.evaluate_pairs(model, pairs, cfg.eval_top)


@pytest.fixture(scope="session")
def runs():
    return Runs()


# -- acceptance summary ----------------------------------------------------------

_criteria = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    marker = "test_acceptance.py::test_criterion_"
    if marker not in report.nodeid:
        return
    number = int(report.nodeid.split(marker, 1)[1].split("_", 1)[0])
    ok = report.passed
    _criteria[number] = _criteria.get(number, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if _criteria[number] else 'FAIL'}")
