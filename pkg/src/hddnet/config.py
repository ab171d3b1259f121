"""Flat ``key = value`` configuration shared by training, evaluation and the CLI."""

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from .gabor import FILTER_KINDS, GaborParams

DETECTOR_LOSSES = ("rd", "msip", "trip")


def _ints(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _floats(text):
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _switch(text):
    v = str(text).strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


@dataclass
class Config:
    # hand-crafted descriptor block
    gabor_size: int = 9
    gabor_sigma: float = 2.0
    gabor_lambda: float = 4.0
    gabor_gamma: float = 0.5
    gabor_psi: float = 0.0
    block_filter: str = "gabor"
    block_sign_split: bool = True
    block_orientations: int = 16
    # descriptor network
    descriptor_multiscale: bool = True
    descriptor_levels: int = 3
    descriptor_width: int = 32
    descriptor_features: int = 64
    descriptor_dim: int = 32
    # detector network
    detector_levels: int = 3
    detector_width: int = 16
    detector_nms_window: int = 15
    detector_topk: int = 100
    detector_temperature: float = 1.0
    detector_normalize: bool = True
    # losses
    loss_mu: float = 1.0
    loss_beta: float = 0.4
    loss_windows: tuple = (8, 16, 24, 32)
    loss_lambdas: tuple = (64.0, 16.0, 4.0, 1.0)
    loss_exclusion_cells: int = 1
    loss_exclusion_px: float = 8.0
    loss_detector: str = "rd"
    # training
    train_crop: int = 96
    train_source: int = 200
    train_batch: int = 8
    train_k: int = 20
    train_steps: int = 500
    train_lr: float = 0.01
    train_momentum: float = 0.9
    train_lr_halve_every: int = 1000
    train_alternation: int = 1
    train_seed: int = 0
    train_checkpoint_every: int = 100
    train_jitter: bool = True
    train_clip: float = 1.0
    # evaluation
    eval_pairs: int = 50
    eval_top: int = 100
    eval_seed: int = 1000
    eval_mma_px: float = 5.0
    eval_rep_px: float = 3.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.block_filter not in FILTER_KINDS:
            raise ValueError(f"block.filter must be one of {FILTER_KINDS}")
        if self.loss_detector not in DETECTOR_LOSSES:
            raise ValueError(f"loss.detector must be one of {DETECTOR_LOSSES}")
        if len(self.loss_windows) != len(self.loss_lambdas):
            raise ValueError("loss.windows and loss.lambdas differ in length")
        if any(s <= 0 for s in self.loss_windows) or any(v <= 0 for v in self.loss_lambdas):
            raise ValueError("loss windows and weights must be positive")
        if self.train_crop % 4 or self.train_crop % max(self.loss_windows):
            raise ValueError("train.crop must be divisible by 4 and by the largest loss window")
        if self.block_orientations % 2 or self.block_orientations < 4:
            raise ValueError("block.orientations must be even and >= 4")

    @property
    def gabor(self):
        return GaborParams(self.gabor_size, self.gabor_sigma, self.gabor_lambda,
                           self.gabor_gamma, self.gabor_psi)

    @property
    def pyramid_levels(self):
        return self.descriptor_levels if self.descriptor_multiscale else 1

    # -- flat key mapping ---------------------------------------------------

    @staticmethod
    def key_for(attr):
        return attr.replace("_", ".", 1)

    @classmethod
    def keys(cls):
        return [cls.key_for(f.name) for f in fields(cls)]

    def to_flat(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "on" if v else "off"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out[self.key_for(f.name)] = str(v)
        return out

    def digest(self):
        """Short stable hash of the full configuration."""
        text = "\n".join(f"{k} = {v}" for k, v in sorted(self.to_flat().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_flat(self, flat):
        return self.replace(**_parse_flat(flat))

    @classmethod
    def from_flat(cls, flat):
        return cls().with_flat(flat)


_PROFILES = {
    "desk": {},
    "full": {"descriptor.width": "64", "descriptor.features": "128",
              "descriptor.dim": "256", "train.crop": "192"},
}


def _parse_flat(flat):
    flat = dict(flat)
    profile = flat.pop("profile", None)
    if profile is not None:
        if profile not in _PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        merged = dict(_PROFILES[profile])
        merged.update(flat)
        flat = merged
    types = {f.name: f.type for f in fields(Config)}
    defaults = Config()
    changes = {}
    for key, raw in flat.items():
        attr = key.replace(".", "_")
        if attr not in types:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(defaults, attr)
        if isinstance(current, bool):
            changes[attr] = _switch(raw)
        elif isinstance(current, int):
            changes[attr] = int(raw)
        elif isinstance(current, float):
            changes[attr] = float(raw)
        elif isinstance(current, tuple):
            changes[attr] = _ints(raw) if attr == "loss_windows" else _floats(raw)
        else:
            changes[attr] = str(raw).strip()
    return changes


def parse_text(text):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        flat[key.strip()] = value.strip()
    return flat


def load_config(path):
    with open(path) as fh:
        return Config.from_flat(parse_text(fh.read()))
