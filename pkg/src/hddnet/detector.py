"""Hybrid keypoint detector: hand-crafted differential features, a shallow learned head, NMS.

Derivative stencils (cross-correlation, replicate padding), applied on every
pyramid level:

    I_x  = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]] / 8       (Sobel)
    I_y  = transpose of I_x
    I_xx = [[1, -2, 1], [2, -4, 2], [1, -2, 1]] / 4        (smoothed second difference)
    I_yy = transpose of I_xx
    I_xy = [[1, 0, -1], [0, 0, 0], [-1, 0, 1]] / 4

The five base derivatives are upsampled to full resolution and summed over
levels; the ten output channels are then

    I_x, I_y, I_x^2, I_y^2, I_x I_y, I_xx, I_yy, I_xx I_yy, I_xy, I_xx + I_yy
"""

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .descriptor import gaussian_pyramid

PREFIX = "det."
N_FEATURES = 10
NORM_EPS = 1e-6

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8.0
_SECOND_X = np.array([[1, -2, 1], [2, -4, 2], [1, -2, 1]], dtype=np.float64) / 4.0
_CROSS = np.array([[1, 0, -1], [0, 0, 0], [-1, 0, 1]], dtype=np.float64) / 4.0
STENCILS = np.stack([_SOBEL_X, _SOBEL_X.T, _SECOND_X, _SECOND_X.T, _CROSS])[:, None]


@dataclass
class Keypoint:
    x: float
    y: float
    score: float


def handcrafted_detector_features(image, levels=3):
    """(N, 1, H, W) or (1, H, W) image -> (…, 10, H, W) differential features."""
    image = E.const(image)
    single = image.ndim == 3
    if single:
        image = image.reshape((1,) + image.shape)
    h, w = image.shape[-2:]
    total = None
    for lvl in gaussian_pyramid(image, levels):
        d = E.conv2d(E.pad2d(lvl.image, 1, 1, mode="edge"), STENCILS, padding="valid")
        if d.shape[-2:] != (h, w):
            d = E.bilinear_resize(d, h, w)
        total = d if total is None else total + d
    ix, iy, ixx, iyy, ixy = (total[:, i:i + 1] for i in range(5))
    feats = E.concat([ix, iy, ix * ix, iy * iy, ix * iy, ixx, iyy, ixx * iyy, ixy, ixx + iyy], axis=1)
    return feats[0] if single else feats


def head_layout(cfg):
    w = cfg.detector_width
    return [("head0", N_FEATURES, w), ("head1", w, w), ("head2", w, 1)]


def init_detector_weights(model, rng):
    for name, cin, cout in head_layout(model.config):
        bound = np.sqrt(6.0 / (cin * 9))
        model.add_param(f"{PREFIX}{name}.w", rng.uniform(-bound, bound, size=(cout, cin, 3, 3)))
        model.add_param(f"{PREFIX}{name}.b", np.zeros(cout))


def standardise(x, eps=NORM_EPS, per_channel=False):
    """Per-image zero mean / unit variance over the spatial map of (N, C, H, W) activations.

    With ``per_channel`` every channel is standardised on its own.
    """
    axes = (2, 3) if per_channel else (1, 2, 3)
    mu = x.mean(axis=axes, keepdims=True)
    centred = x - mu
    var = (centred * centred).mean(axis=axes, keepdims=True)
    return centred / E.sqrt(var + eps)


def score_head(features, model):
    layout = head_layout(model.config)
    x = features
    for i, (name, _, _) in enumerate(layout):
        x = E.conv2d(x, model[f"{PREFIX}{name}.w"], bias=model[f"{PREFIX}{name}.b"])
        if model.config.detector_normalize:
            # without a fixed scale, both detector losses are minimised by a flat map;
            # hidden channels are normalised too so none can die out entirely
            x = standardise(x, per_channel=i < len(layout) - 1)
        x = E.relu(x)
    return x


def score_map(image, model, features=None):
    """Non-negative (N, 1, H, W) score map (or (1, H, W) for one image)."""
    image = E.const(image)
    single = image.ndim == 3
    if features is None:
        features = handcrafted_detector_features(image, model.config.detector_levels)
    if single and features.ndim == 3:
        features = features.reshape((1,) + features.shape)
    out = score_head(features, model)
    return out[0] if single else out


def soft_argmax_window(window, temperature=1.0, flat=False):
    """Expected (x, y) under softmax(t * r) over an s x s window.

    ``window`` is (…, s, s), or (…, s*s) row-major when ``flat``. Returns
    DiffArrays ``(u, v)`` in window-local coordinates.
    """
    window = E.const(window)
    if flat:
        s = int(round(np.sqrt(window.shape[-1])))
        if s * s != window.shape[-1]:
            raise ValueError("flat window must hold s*s scores")
    else:
        s = window.shape[-1]
        if window.shape[-2] != s:
            raise ValueError("window must be square")
        window = window.reshape(window.shape[:-2] + (s * s,))
    p = E.softmax(window * temperature, axis=-1)
    dy, dx = np.mgrid[0:s, 0:s]
    u = (p * dx.ravel().astype(np.float64)).sum(axis=-1)
    v = (p * dy.ravel().astype(np.float64)).sum(axis=-1)
    return u, v


def nms(score, window=15, k=100):
    """Greedy NMS: strongest first, then (y, x); keeps points > window//2 apart (Chebyshev).

    Pixels with score <= 0 are never keypoints. Returns up to ``k`` Keypoints.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    r = np.asarray(score.data if isinstance(score, E.DiffArray) else score, dtype=np.float64)
    r = r.reshape(r.shape[-2:])
    h, w = r.shape
    radius = window // 2
    ys, xs = np.nonzero(r > 0)
    order = np.lexsort((xs, ys, -r[ys, xs]))
    blocked = np.zeros((h + 2 * radius, w + 2 * radius), dtype=bool)
    out = []
    for i in order:
        y, x = ys[i], xs[i]
        if blocked[y + radius, x + radius]:
            continue
        out.append(Keypoint(float(x), float(y), float(r[y, x])))
        if len(out) == k:
            break
        blocked[y:y + 2 * radius + 1, x:x + 2 * radius + 1] = True
    return out
