"""Oriented filter bank, sign split and cyclic max-pooling (the descriptor's hand-crafted block)."""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import engine as E
from .engine import DiffArray

ORIENTATIONS = 16
FILTER_KINDS = ("gabor", "deriv1", "deriv2", "learned")


@dataclass(frozen=True)
class GaborParams:
    size: int = 9
    sigma: float = 2.0
    wavelength: float = 4.0
    gamma: float = 0.5
    psi: float = 0.0

    def __post_init__(self):
        if self.size % 2 == 0 or self.size < 1:
            raise ValueError("filter size must be odd")
        if self.sigma <= 0 or self.wavelength <= 0:
            raise ValueError("sigma and wavelength must be positive")


def _grid(size):
    r = size // 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    return x, y


def gabor_kernel(p=GaborParams()):
    """Real Gabor at orientation 0, mean-subtracted to sum to zero."""
    x, y = _grid(p.size)
    envelope = np.exp(-(x ** 2 + p.gamma ** 2 * y ** 2) / (2 * p.sigma ** 2))
    k = envelope * np.cos(2 * np.pi * x / p.wavelength + p.psi)
    return k - k.mean()


def derivative_kernel(p=GaborParams(), order=1):
    """First or second x-derivative of a Gaussian with the Gabor envelope width, zero-mean."""
    x, y = _grid(p.size)
    g = np.exp(-(x ** 2 + y ** 2) / (2 * p.sigma ** 2))
    if order == 1:
        k = -x / p.sigma ** 2 * g
    elif order == 2:
        k = (x ** 2 / p.sigma ** 4 - 1 / p.sigma ** 2) * g
    else:
        raise ValueError("order must be 1 or 2")
    k = k / np.abs(k).max()
    return k - k.mean()


def base_filter(kind, p=GaborParams()):
    if kind == "gabor":
        return gabor_kernel(p)
    if kind == "deriv1":
        return derivative_kernel(p, 1)
    if kind == "deriv2":
        return derivative_kernel(p, 2)
    raise ValueError(f"no hand-crafted base filter for kind {kind!r}")


def circular_mask(size):
    x, y = _grid(size)
    r = (size - 1) / 2.0
    return (x ** 2 + y ** 2 <= r ** 2 + 1e-9).astype(np.float64)


def _snap(v):
    r = round(v)
    return float(r) if abs(v - r) < 1e-12 else v


@lru_cache(maxsize=256)
def rotation_operator(size, theta_deg):
    """Matrix M with vec(rotated) = M @ vec(w): bilinear pull-back, zero outside the support.

    Output pixel p reads the input at R(-theta) p about the filter centre, so
    positive angles rotate the pattern clockwise on screen (y axis down).
    """
    t = np.deg2rad(theta_deg)
    c, s = _snap(np.cos(t)), _snap(np.sin(t))
    x, y = _grid(size)
    r = size // 2
    # source = R(-theta) p
    sx = c * x + s * y + r
    sy = -s * x + c * y + r
    m = np.zeros((size * size, size * size))
    out_idx = np.arange(size * size)
    sx, sy = sx.ravel(), sy.ravel()
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < size) & (yi >= 0) & (yi < size) & (wgt != 0)
        np.add.at(m, (out_idx[ok], yi[ok] * size + xi[ok]), wgt[ok])
    m.setflags(write=False)
    return m


def rotate_filter(w, theta_deg, mask=None):
    """``mask * bilinear_rotate(w, theta)``; differentiable in ``w``."""
    w = E.const(w)
    size = w.shape[-1]
    if mask is None:
        mask = circular_mask(size)
    m = rotation_operator(size, float(theta_deg))
    return (E.matmul(m, w.reshape(-1)) * mask.ravel()).reshape(size, size)


def orientation_angles(n=ORIENTATIONS):
    return [360.0 / n * r for r in range(1, n + 1)]


class FilterBank:
    """R rotated, masked copies of one base filter.

    Channel ``r - 1`` holds the filter rotated by ``360 / R * r`` degrees. For
    fixed filters each copy is re-centred to zero mean inside the mask, so a
    constant image gives no response.
    """

    def __init__(self, base, orientations=ORIENTATIONS, zero_dc=True):
        self.base = base if isinstance(base, DiffArray) else DiffArray(base)
        self.size = self.base.shape[-1]
        self.mask = circular_mask(self.size)
        self.angles = orientation_angles(orientations)
        rotated = [rotate_filter(self.base, a, self.mask) for a in self.angles]
        if zero_dc:
            inside = self.mask.sum()
            rotated = [w - (w.sum() * (1.0 / inside)) * self.mask for w in rotated]
        self.kernels = E.stack(rotated)  # (R, n, n)

    def __len__(self):
        return len(self.angles)

    @classmethod
    def from_kind(cls, kind="gabor", params=GaborParams(), orientations=ORIENTATIONS):
        return cls(base_filter(kind, params), orientations)


def orientation_responses(image, bank):
    """(…, 1, H, W) image -> (…, R, H, W) responses, replicate-padded so borders see no seam."""
    image = E.const(image)
    if image.shape[-3] != 1:
        raise E.ShapeError("orientation_responses expects a single-channel image")
    r = bank.size // 2
    padded = E.pad2d(image, r, r, mode="edge")
    kernels = bank.kernels.reshape(len(bank), 1, bank.size, bank.size)
    return E.conv2d(padded, kernels, padding="valid")


def sign_split(h):
    """Per orientation emit [h, h+, -h-]; output grouped by orientation (3R channels)."""
    h = E.const(h)
    pos = E.relu(h)
    neg = E.relu(-h)
    stacked = E.stack([h, pos, neg], axis=-3)  # (..., R, 3, H, W)
    shape = h.shape[:-3] + (3 * h.shape[-3],) + h.shape[-2:]
    return stacked.reshape(shape)


def handcrafted_forward(image, bank, split=True):
    """Responses -> optional sign split -> cyclic max-pool per sign group.

    Returns 3R/2 channels ([raw, positive, negative] groups of R/2) with the
    split, R/2 without.
    """
    h = orientation_responses(image, bank)
    if not split:
        return E.channel_max3(h)
    r = h.shape[-3]
    split_maps = sign_split(h)
    groups = []
    for g in range(3):
        idx = (Ellipsis, slice(g, 3 * r, 3), slice(None), slice(None))
        groups.append(E.channel_max3(split_maps[idx]))
    return E.concat(groups, axis=-3)


def block_channels(split=True, orientations=ORIENTATIONS):
    return (3 if split else 1) * orientations // 2
