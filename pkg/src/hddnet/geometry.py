"""Homographies, warping, and the window grids shared by the losses.

Coordinates are (x, y) in pixel-centre units: pixel (row=r, col=c) sits at
x=c, y=r, and the top-left pixel centre is the origin.
"""

from dataclasses import dataclass

import numpy as np

from .engine import DiffArray, const

HOMOGRAPHY_RANGES = {"rot_deg": 30.0, "scale": (0.5, 2.0), "skew": 0.6}


class Homography:
    """3x3 projective transform, stored with m[2, 2] == 1."""

    def __init__(self, m):
        m = np.array(m, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) < 1e-15:
            raise ValueError("homography with m[2,2] == 0 cannot be normalised")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is singular")
        self.m = m

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx, ty):
        return cls([[1, 0, tx], [0, 1, ty], [0, 0, 1]])

    def inverse(self):
        return Homography(np.linalg.inv(self.m))

    def compose(self, other):
        """``self @ other``: apply ``other`` first."""
        return Homography(self.m @ other.m)

    def __matmul__(self, other):
        return self.compose(other)

    def __repr__(self):
        return f"Homography({self.m.tolist()})"

    def __eq__(self, other):
        return isinstance(other, Homography) and np.array_equal(self.m, other.m)


def rotation_about(theta_deg, center):
    cx, cy = center
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    return _translate(cx, cy) @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]]) @ _translate(-cx, -cy)


def _translate(tx, ty):
    return np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1.0]])


def compose_homography(center, rot_deg=0.0, sx=1.0, sy=1.0, kx=0.0, ky=0.0):
    """T(c) R(theta) S(sx, sy) K(kx, ky) T(-c)."""
    cx, cy = center
    t = np.deg2rad(rot_deg)
    c, s = np.cos(t), np.sin(t)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    scale = np.diag([sx, sy, 1.0])
    skew = np.array([[1, kx, 0], [ky, 1, 0], [0, 0, 1.0]])
    return Homography(_translate(cx, cy) @ rot @ scale @ skew @ _translate(-cx, -cy))


def sample_homography(rng, center, rot_deg=30.0, scale=(0.5, 2.0), skew=0.6):
    """Random rotation / isotropic scale / skew about ``center``, drawn uniformly."""
    theta = rng.uniform(-rot_deg, rot_deg)
    s = rng.uniform(scale[0], scale[1])
    kx, ky = rng.uniform(-skew, skew, size=2)
    return compose_homography(center, theta, s, s, kx, ky)


def warp_points(h, points):
    """Map (M, 2) points through ``h``. Returns (mapped, valid); w ~ 0 is flagged invalid."""
    m = h.m if isinstance(h, Homography) else np.asarray(h)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    hom = pts @ m[:, :2].T + m[:, 2]
    w = hom[:, 2]
    valid = np.abs(w) > 1e-12
    safe = np.where(valid, w, 1.0)
    mapped = hom[:, :2] / safe[:, None]
    mapped[~valid] = np.nan
    return mapped, valid


def warp_point(h, p):
    mapped, valid = warp_points(h, [p])
    if not valid[0]:
        return None
    return float(mapped[0, 0]), float(mapped[0, 1])


def warp_coords(h, x, y):
    """Differentiable mapping of coordinate arrays (DiffArray or ndarray) through ``h``."""
    m = h.m
    x, y = const(x), const(y)
    den = x * m[2, 0] + y * m[2, 1] + m[2, 2]
    xs = (x * m[0, 0] + y * m[0, 1] + m[0, 2]) / den
    ys = (x * m[1, 0] + y * m[1, 1] + m[1, 2]) / den
    return xs, ys


def _bilinear_lookup(img, xs, ys):
    # img (C, H, W); xs, ys (H', W') source coordinates, all in bounds
    _, h, w = img.shape
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = img[:, y0, x0] * (1 - fx) + img[:, y0, x1] * fx
    bottom = img[:, y1, x0] * (1 - fx) + img[:, y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def warp_image(h, image, out_shape=None, source=None, offset=(0.0, 0.0)):
    """Warp ``image`` (C, H, W) by ``h`` with bilinear sampling.

    Output pixel q takes the value of the input at h^-1(q). Returns
    ``(warped, valid_mask)``; invalid pixels are zero.

    ``source`` optionally supplies a larger canvas in which ``image`` sits at
    ``offset`` (x, y); samples then come from the canvas, which is how
    training pairs avoid empty borders.
    """
    data = image.data if isinstance(image, DiffArray) else np.asarray(image, dtype=np.float64)
    if data.size == 0:
        raise ValueError("empty image")
    squeeze = data.ndim == 2
    if squeeze:
        data = data[None]
    oh, ow = out_shape if out_shape is not None else data.shape[-2:]
    canvas = data if source is None else np.asarray(source, dtype=np.float64)
    if canvas.ndim == 2:
        canvas = canvas[None]
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    src, ok = warp_points(h.inverse(), np.stack([xs.ravel(), ys.ravel()], axis=1))
    sx = src[:, 0] + offset[0]
    sy = src[:, 1] + offset[1]
    ch, cw = canvas.shape[-2:]
    eps = 1e-9
    valid = ok & (sx >= -eps) & (sy >= -eps) & (sx <= cw - 1 + eps) & (sy <= ch - 1 + eps)
    sx = np.where(valid, np.clip(sx, 0, cw - 1), 0.0).reshape(oh, ow)
    sy = np.where(valid, np.clip(sy, 0, ch - 1), 0.0).reshape(oh, ow)
    valid = valid.reshape(oh, ow)
    out = _bilinear_lookup(canvas, sx, sy) * valid
    if squeeze:
        out = out[0]
    return out, valid


# -- window grids ----------------------------------------------------------


@dataclass(frozen=True)
class Window:
    row: int
    col: int
    x0: int
    y0: int
    size: int

    @property
    def center(self):
        half = (self.size - 1) / 2.0
        return self.x0 + half, self.y0 + half


@dataclass
class WindowGrid:
    """Disjoint s x s windows tiling an image from the origin; partial border windows dropped."""

    height: int
    width: int
    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError("window size must be >= 2")
        self.rows = self.height // self.size
        self.cols = self.width // self.size

    def __len__(self):
        return self.rows * self.cols

    @property
    def windows(self):
        s = self.size
        return [Window(r, c, c * s, r * s, s) for r in range(self.rows) for c in range(self.cols)]

    def origins(self):
        """(N, 2) array of window top-left (x0, y0), row-major."""
        r, c = np.mgrid[0:self.rows, 0:self.cols]
        return np.stack([c.ravel() * self.size, r.ravel() * self.size], axis=1)

    def cells(self):
        """(N, 2) array of (row, col) grid cells, row-major."""
        r, c = np.mgrid[0:self.rows, 0:self.cols]
        return np.stack([r.ravel(), c.ravel()], axis=1)

    def centers(self):
        return self.origins() + (self.size - 1) / 2.0


def window_grid(h, w, s):
    return WindowGrid(h, w, s)


def corresponding_origins(hom, origins, size, target_shape):
    """Vectorised corresponding_window: returns (target origins (N, 2) int, keep mask)."""
    half = (size - 1) / 2.0
    centers = np.asarray(origins, dtype=np.float64) + half
    mapped, ok = warp_points(hom, centers)
    th, tw = target_shape
    with np.errstate(invalid="ignore"):
        tl = np.floor(mapped - half + 0.5)
        keep = ok & (tl[:, 0] >= 0) & (tl[:, 1] >= 0) & (tl[:, 0] + size <= tw) & (tl[:, 1] + size <= th)
    tl = np.where(keep[:, None], tl, 0).astype(int)
    return tl, keep


def corresponding_window(hom, win, target_shape):
    """The s x s window in the target image centred on ``hom(win.center)``, or None."""
    tl, keep = corresponding_origins(hom, [[win.x0, win.y0]], win.size, target_shape)
    if not keep[0]:
        return None
    s = win.size
    x0, y0 = int(tl[0, 0]), int(tl[0, 1])
    return Window(y0 // s, x0 // s, x0, y0, s)


def window_indices(origins, size, width):
    """Flat pixel indices (N, s*s) of s x s windows at ``origins`` in an image of ``width``."""
    dy, dx = np.mgrid[0:size, 0:size]
    rows = origins[:, 1][:, None] + dy.ravel()[None]
    cols = origins[:, 0][:, None] + dx.ravel()[None]
    return rows * width + cols


def window_offsets(size):
    """(s*s, 2) local (x, y) coordinates of window pixels, row-major."""
    dy, dx = np.mgrid[0:size, 0:size]
    return np.stack([dx.ravel(), dy.ravel()], axis=1).astype(np.float64)
