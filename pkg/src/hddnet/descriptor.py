"""Dense multi-scale hybrid descriptor.

Each pyramid level goes through the hand-crafted rotation block and a shared
strided encoder; the per-level features are upsampled back to full
resolution, concatenated, fused by a 1x1 convolution and L2-normalised per
pixel.
"""

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import DiffArray
from .gabor import FilterBank, base_filter, block_channels, handcrafted_forward

PREFIX = "desc."
NORM_MOMENTUM = 0.1
NORM_EPS = 1e-5


def gaussian_kernel(size=5, sigma=1.0):
    r = size // 2
    g = np.exp(-np.arange(-r, r + 1) ** 2 / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


_BLUR = gaussian_kernel(5, 1.0)


@dataclass
class PyramidLevel:
    scale: int
    image: DiffArray


def gaussian_pyramid(image, levels=3):
    """Level 0 is the input; each next level is blurred (5x5, sigma 1) then subsampled by 2."""
    image = E.const(image)
    h, w = image.shape[-2:]
    factor = 2 ** (levels - 1)
    if h % factor or w % factor:
        raise E.ShapeError(f"image {h}x{w} not divisible by {factor} for {levels} levels")
    out = [PyramidLevel(1, image)]
    cur = image
    kernel = _BLUR.reshape(1, 1, 5, 5)
    for lvl in range(1, levels):
        lead = cur.shape[:-2]
        flat = cur.reshape((-1, 1) + cur.shape[-2:])
        blurred = E.conv2d(E.pad2d(flat, 2, 2, mode="edge"), kernel, padding="valid")
        blurred = blurred.reshape(lead + blurred.shape[-2:])
        cur = blurred[..., ::2, ::2]
        out.append(PyramidLevel(2 ** lvl, cur))
    return out


def encoder_layout(cfg):
    """(name, in, out, stride) for the four encoder convolutions."""
    cin = block_channels(cfg.block_sign_split, cfg.block_orientations)
    w, f = cfg.descriptor_width, cfg.descriptor_features
    return [("enc0", cin, w, 1), ("enc1", w, w, 2), ("enc2", w, 2 * w, 2), ("enc3", 2 * w, f, 1)]


def init_descriptor_weights(model, rng):
    cfg = model.config
    for name, cin, cout, _ in encoder_layout(cfg):
        bound = np.sqrt(6.0 / (cin * 9))
        model.add_param(f"{PREFIX}{name}.w", rng.uniform(-bound, bound, size=(cout, cin, 3, 3)))
        model.add_param(f"{PREFIX}{name}.gamma", np.ones(cout))
        model.add_param(f"{PREFIX}{name}.beta", np.zeros(cout))
        for lvl in range(cfg.pyramid_levels):
            model.add_buffer(f"{PREFIX}{name}.mean.l{lvl}", np.zeros(cout))
            model.add_buffer(f"{PREFIX}{name}.var.l{lvl}", np.ones(cout))
    fin = cfg.descriptor_features * cfg.pyramid_levels
    bound = np.sqrt(6.0 / fin)
    model.add_param(f"{PREFIX}fuse.w", rng.uniform(-bound, bound, size=(cfg.descriptor_dim, fin, 1, 1)))
    model.add_param(f"{PREFIX}fuse.b", np.zeros(cfg.descriptor_dim))
    if cfg.block_filter == "learned":
        n = cfg.gabor_size
        bound = np.sqrt(6.0 / (n * n))
        model.add_param(f"{PREFIX}block.filter", rng.uniform(-bound, bound, size=(n, n)))


def filter_bank(model):
    """The rotated bank; fixed banks are built once per model and cached."""
    cfg = model.config
    if cfg.block_filter == "learned":
        return FilterBank(model[f"{PREFIX}block.filter"], cfg.block_orientations, zero_dc=False)
    if model._bank_cache is None:
        model._bank_cache = FilterBank(base_filter(cfg.block_filter, cfg.gabor), cfg.block_orientations)
    return model._bank_cache


def affine_norm(x, model, name, level, train, update_stats=True):
    """Per-channel normalisation with learned scale/shift.

    Training mode normalises with batch statistics and folds them into the
    per-level running buffers; eval mode uses the frozen buffers.
    """
    c = x.shape[1]
    gamma = model[f"{PREFIX}{name}.gamma"].reshape(1, c, 1, 1)
    beta = model[f"{PREFIX}{name}.beta"].reshape(1, c, 1, 1)
    mkey, vkey = f"{PREFIX}{name}.mean.l{level}", f"{PREFIX}{name}.var.l{level}"
    if train:
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        centred = x - mu
        var = (centred * centred).mean(axis=(0, 2, 3), keepdims=True)
        if update_stats:
            m = NORM_MOMENTUM
            model.buffers[mkey] = (1 - m) * model.buffers[mkey] + m * mu.data.reshape(c)
            model.buffers[vkey] = (1 - m) * model.buffers[vkey] + m * var.data.reshape(c)
        xhat = centred / E.sqrt(var + NORM_EPS)
    else:
        mu = model.buffers[mkey].reshape(1, c, 1, 1)
        sd = np.sqrt(model.buffers[vkey] + NORM_EPS).reshape(1, c, 1, 1)
        xhat = (x - mu) / sd
    return xhat * gamma + beta


def encoder_stream(features, model, level=0, train=False, update_stats=True):
    """(N, C, h, w) block features -> (N, F, h/4, w/4); weights shared across levels."""
    x = features
    for name, _, _, stride in encoder_layout(model.config):
        x = E.conv2d(x, model[f"{PREFIX}{name}.w"], stride=stride)
        x = affine_norm(x, model, name, level, train, update_stats)
        x = E.relu(x)
    return x


def describe(image, model, train=False, update_stats=True):
    """Dense descriptors (N, D, H, W) (or (D, H, W) for a single image), unit norm per pixel."""
    cfg = model.config
    image = E.const(image)
    single = image.ndim == 3
    if single:
        image = image.reshape((1,) + image.shape)
    h, w = image.shape[-2:]
    bank = filter_bank(model)
    fw, f = model[f"{PREFIX}fuse.w"], cfg.descriptor_features
    out = None
    for level, lvl in enumerate(gaussian_pyramid(image, cfg.pyramid_levels)):
        feats = handcrafted_forward(lvl.image, bank, cfg.block_sign_split)
        enc = encoder_stream(feats, model, level, train, update_stats)
        # the 1x1 fusion commutes with bilinear upsampling, so each level's
        # share of it runs at that level's resolution
        part = E.conv2d(enc, fw[:, level * f:(level + 1) * f], padding="valid")
        part = E.bilinear_resize(part, h, w)
        out = part if out is None else out + part
    out = out + model[f"{PREFIX}fuse.b"].reshape(1, -1, 1, 1)
    out = E.l2_normalize(out, axis=1)
    return out[0] if single else out


def describe_reference(image, model):
    """Literal upsample-concatenate-fuse order of ``describe``, eval mode; used to check it."""
    cfg = model.config
    image = E.const(image)
    if image.ndim == 3:
        image = image.reshape((1,) + image.shape)
    h, w = image.shape[-2:]
    bank = filter_bank(model)
    streams = []
    for level, lvl in enumerate(gaussian_pyramid(image, cfg.pyramid_levels)):
        enc = encoder_stream(handcrafted_forward(lvl.image, bank, cfg.block_sign_split), model, level)
        streams.append(E.bilinear_resize(enc, h, w))
    fused = E.concat(streams, axis=1)
    out = E.conv2d(fused, model[f"{PREFIX}fuse.w"], bias=model[f"{PREFIX}fuse.b"], padding="valid")
    return E.l2_normalize(out, axis=1)


def sample_descriptor(desc_map, p):
    """Bilinear sample of a (D, H, W) map at one (x, y) point, re-normalised."""
    pts = p if isinstance(p, DiffArray) else np.asarray(p, dtype=np.float64)
    pts = E.const(pts).reshape(1, 2)
    return sample_descriptors(desc_map, pts)[0]


def sample_descriptors(desc_map, points):
    """(M, 2) points -> (M, D) unit descriptors; raises ValueError outside the map."""
    return E.l2_normalize(E.sample_bilinear(desc_map, points), axis=1)
