"""On-disk formats: HDDW weight checkpoints, HDDN feature files, images, homographies.

All binary values are little-endian. A checkpoint is

    b"HDDW" | u16 version | records until EOF

with each record ``u16 name_len | name (utf-8) | u8 rank | u32 dims[rank] | f64 values``.
The run configuration travels inside the checkpoint as the record
``meta.config``: a rank-1 array holding the utf-8 bytes of the ``key = value``
text, one byte per f64 slot.

A feature file is

    b"HDDN" | u16 version | u32 count | u32 dim | count * (f32 x, f32 y, f32 score, f32 desc[dim])

with a JSON sidecar (``<file>.json``) carrying image size and truncation info.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .config import Config, parse_text
from .geometry import Homography

CKPT_MAGIC = b"HDDW"
CKPT_VERSION = 1
FEAT_MAGIC = b"HDDN"
FEAT_VERSION = 1
CONFIG_RECORD = "meta.config"


class FormatError(ValueError):
    """Malformed file."""


class CheckpointVersionError(FormatError):
    """Checkpoint has an unknown version or does not fit the requested model."""


# -- checkpoints ------------------------------------------------------------


def encode_records(records):
    out = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_records(blob):
    if blob[:4] != CKPT_MAGIC:
        raise FormatError("not an HDDW checkpoint")
    if len(blob) < 6:
        raise FormatError("truncated header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    pos, records = 6, {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", blob, pos)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 1)
            pos += 1 + 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise FormatError(f"record {name!r} truncated")
            records[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except struct.error as exc:
        raise FormatError(f"truncated record: {exc}") from None
    return records


def config_text(cfg):
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_flat().items())


def save_checkpoint(path, model, extra=None):
    """Write params, buffers, the config and any ``extra`` arrays (optimiser state, step)."""
    records = dict(model.state())
    records[CONFIG_RECORD] = np.frombuffer(config_text(model.config).encode("utf-8"), dtype=np.uint8)
    records.update(extra or {})
    with open(path, "wb") as fh:
        fh.write(encode_records(records))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_records(fh.read())


def load_checkpoint(path, config=None):
    """Rebuild a Model; returns ``(model, extras)`` where extras are non-model records.

    With ``config`` given, every stored tensor must match the shapes that
    config would create, otherwise CheckpointVersionError.
    """
    from .training import init_weights  # local: training imports this module

    records = read_checkpoint(path)
    if config is None:
        if CONFIG_RECORD not in records:
            raise CheckpointVersionError("checkpoint carries no configuration")
        raw = records[CONFIG_RECORD].astype(np.uint8).tobytes().decode("utf-8")
        config = Config.from_flat(parse_text(raw))
    model = init_weights(np.random.default_rng(0), config)
    for name, ref in model.state().items():
        if name not in records:
            raise CheckpointVersionError(f"checkpoint lacks {name!r}")
        if records[name].shape != ref.shape:
            raise CheckpointVersionError(f"{name}: stored {records[name].shape}, model needs {ref.shape}")
        if name in model.params:
            model.params[name].data[...] = records[name]
        else:
            model.buffers[name] = records[name].copy()
    extras = {k: v for k, v in records.items() if k not in model.state() and k != CONFIG_RECORD}
    return model, extras


# -- feature files -------------------------------------------------------------


@dataclass
class FeatureSet:
    """Keypoints sorted by descending score with unit descriptors."""

    xy: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray
    width: int
    height: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        n = len(self.xy)
        desc = np.asarray(self.descriptors, dtype=np.float64)
        self.descriptors = desc.reshape(n, -1) if n else desc.reshape(0, desc.shape[-1] if desc.ndim == 2 else 0)

    def __len__(self):
        return len(self.xy)

    @property
    def dim(self):
        return self.descriptors.shape[1]


def encode_features(fs):
    body = np.concatenate([fs.xy, fs.scores[:, None], fs.descriptors], axis=1).astype("<f4")
    return FEAT_MAGIC + struct.pack("<HII", FEAT_VERSION, len(fs), fs.dim) + body.tobytes()


def decode_features(blob, width=0, height=0, meta=None):
    if blob[:4] != FEAT_MAGIC or len(blob) < 14:
        raise FormatError("not an HDDN feature file")
    version, count, dim = struct.unpack_from("<HII", blob, 4)
    if version != FEAT_VERSION:
        raise FormatError(f"feature file version {version}, expected {FEAT_VERSION}")
    n = count * (3 + dim)
    if len(blob) != 14 + 4 * n:
        raise FormatError("feature file size does not match its header")
    body = np.frombuffer(blob, dtype="<f4", count=n, offset=14).reshape(count, 3 + dim).astype(np.float64)
    return FeatureSet(body[:, :2], body[:, 2], body[:, 3:], width, height, dict(meta or {}))


def save_features(path, fs):
    with open(path, "wb") as fh:
        fh.write(encode_features(fs))
    meta = {"width": fs.width, "height": fs.height, "count": len(fs), "dim": fs.dim}
    meta.update(fs.meta)
    with open(f"{path}.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_features(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    meta = {}
    try:
        with open(f"{path}.json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    fs = decode_features(blob, meta.get("width", 0), meta.get("height", 0))
    fs.meta = {k: v for k, v in meta.items() if k not in ("width", "height", "count", "dim")}
    return fs


# -- images and homographies -------------------------------------------------


def read_image(path):
    """Grey image as float64 in [0, 1]; colour inputs are converted to luminance."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return arr


def write_image(path, image):
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_homography(path):
    with open(path) as fh:
        vals = [float(v) for v in fh.read().split()]
    if len(vals) != 9:
        raise FormatError(f"{path}: expected 9 values, got {len(vals)}")
    return Homography(np.array(vals).reshape(3, 3))


def write_homography(path, h):
    m = h.m if isinstance(h, Homography) else np.asarray(h)
    with open(path, "w") as fh:
        for row in m:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
