"""Synthetic homography pairs and the alternating detector / descriptor optimisation."""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from skimage import draw

from . import engine as E
from .config import Config
from .descriptor import describe, init_descriptor_weights
from .detector import init_detector_weights, nms, score_map
from .geometry import Homography, sample_homography, warp_image, warp_points
from .losses import PairMaps, TripletConfig, combined_detector_loss, descriptor_hard_triplet
from .model import DESCRIPTOR, DETECTOR, Model

MIN_COVERAGE = 0.7
MAX_DRAWS = 20
BRIGHTNESS = 0.1
CONTRAST = (0.8, 1.25)
IMAGE_SUFFIXES = (".pgm", ".ppm", ".png")


class SourceRejected(ValueError):
    """No homography with enough valid coverage was found for a source image."""


class NonFiniteLoss(FloatingPointError):
    """Training hit a NaN/inf loss; the batch description was written to disk."""


# -- synthetic corpus ------------------------------------------------------


def synthetic_image(rng, size=200):
    """Piecewise-constant shapes and lines over a smooth shaded background, in [0, 1]."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / size
    a, b = rng.uniform(-0.4, 0.4, size=2)
    img = 0.5 + a * (xx - 0.5) + b * (yy - 0.5)
    for _ in range(rng.integers(18, 30)):
        kind = rng.integers(0, 3)
        val = rng.uniform(0, 1)
        if kind == 0:
            n = rng.integers(3, 7)
            cx, cy = rng.uniform(0, size, size=2)
            radius = rng.uniform(6, size / 6)
            ang = np.sort(rng.uniform(0, 2 * np.pi, size=n))
            rr, cc = draw.polygon(cy + radius * np.sin(ang), cx + radius * np.cos(ang), shape=(h, w))
        elif kind == 1:
            cy, cx = rng.uniform(0, size, size=2)
            rr, cc = draw.ellipse(cy, cx, rng.uniform(4, size / 8), rng.uniform(4, size / 8),
                                  shape=(h, w), rotation=rng.uniform(0, np.pi))
        else:
            y0, x0 = rng.uniform(0, size - 1, size=2)
            y1, x1 = rng.uniform(0, size - 1, size=2)
            rr, cc, aa = draw.line_aa(int(y0), int(x0), int(y1), int(x1))
            img[rr, cc] = img[rr, cc] * (1 - aa) + val * aa
            continue
        img[rr, cc] = val
    img += gaussian_filter(rng.normal(0, 0.04, size=(h, w)), 1.0)
    img = gaussian_filter(img, 0.7)
    lo, hi = img.min(), img.max()
    return (img - lo) / max(hi - lo, 1e-12)


def make_corpus(seed, count=12, size=200):
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, size) for _ in range(count)]


def write_corpus(directory, images):
    from .formats import write_image

    os.makedirs(directory, exist_ok=True)
    for i, img in enumerate(images):
        write_image(os.path.join(directory, f"img_{i:04d}.pgm"), img)


def load_corpus(directory):
    from .formats import read_image

    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(IMAGE_SUFFIXES))
    return [read_image(os.path.join(directory, n)) for n in names]


# -- training pairs ----------------------------------------------------------


@dataclass
class TrainPair:
    image_a: np.ndarray
    image_b: np.ndarray
    h_ba: Homography
    valid: np.ndarray

    @property
    def h_ab(self):
        return self.h_ba.inverse()


def make_pair(rng, source, crop=96, jitter=True, homography=None):
    """Random crop A of ``source``; B is the view of A's plane under a random homography.

    B is sampled from the whole source so it has no empty border where the
    source covers it. Homographies are re-drawn until at least 70% of B is
    valid; after 20 failures the source is rejected.
    """
    source = np.asarray(source, dtype=np.float64)
    sh, sw = source.shape
    if sh < crop or sw < crop:
        raise ValueError(f"source {sh}x{sw} smaller than crop {crop}")
    x0 = int(rng.integers(0, sw - crop + 1))
    y0 = int(rng.integers(0, sh - crop + 1))
    image_a = source[y0:y0 + crop, x0:x0 + crop].copy()
    centre = ((crop - 1) / 2.0, (crop - 1) / 2.0)
    for _ in range(MAX_DRAWS):
        h_ab = homography if homography is not None else sample_homography(rng, centre)
        image_b, valid = warp_image(h_ab, image_a, source=source, offset=(x0, y0))
        if valid.mean() >= MIN_COVERAGE:
            break
        if homography is not None:
            raise SourceRejected("forced homography leaves too little valid area")
    else:
        raise SourceRejected(f"no valid homography in {MAX_DRAWS} draws")
    if jitter:
        offset = rng.uniform(-BRIGHTNESS, BRIGHTNESS)
        gain = np.exp(rng.uniform(np.log(CONTRAST[0]), np.log(CONTRAST[1])))
        image_b = np.clip(image_b * gain + offset, 0.0, 1.0) * valid
    return TrainPair(image_a, image_b, h_ab.inverse(), valid)


def draw_pair(rng, corpus, crop, jitter=True):
    """Pick sources until one yields a pair; returns (source index, pair)."""
    for _ in range(10 * len(corpus)):
        idx = int(rng.integers(0, len(corpus)))
        try:
            return idx, make_pair(rng, corpus[idx], crop, jitter)
        except SourceRejected:
            continue
    raise SourceRejected("every source image was rejected")


def make_pairs(seed, corpus, count, crop=96, jitter=True):
    rng = np.random.default_rng(seed)
    return [draw_pair(rng, corpus, crop, jitter)[1] for _ in range(count)]


# -- weights and optimiser ---------------------------------------------------


def init_weights(rng, cfg=None):
    """Fresh model: detector head first, then the descriptor, from one generator."""
    model = Model(cfg or Config())
    init_detector_weights(model, rng)
    init_descriptor_weights(model, rng)
    return model


class SGD:
    """Momentum SGD: v <- m v + g; w <- w - lr v."""

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.velocity = {}

    def step(self, model, names, lr, clip=0.0):
        """One update of ``names``; with ``clip`` > 0 the joint gradient norm is capped at it."""
        scale = 1.0
        if clip > 0:
            norm = np.sqrt(sum(float((model[n].grad ** 2).sum()) for n in names if model[n].grad is not None))
            if norm > clip:
                scale = clip / norm
        for n in names:
            p = model[n]
            if p.grad is None:
                continue
            v = self.velocity.get(n)
            g = p.grad * scale
            v = g if v is None else self.momentum * v + g
            self.velocity[n] = v
            p.data -= lr * v

    def state(self):
        return {f"optim.{n}": v for n, v in self.velocity.items()}

    def load(self, records):
        self.velocity = {k[len("optim."):]: v.copy() for k, v in records.items() if k.startswith("optim.")}


def learning_rate(cfg, step):
    return cfg.train_lr * 0.5 ** (step // cfg.train_lr_halve_every)


def phase_of(cfg, step):
    return "detector" if (step // cfg.train_alternation) % 2 == 0 else "descriptor"


# -- losses on a batch -----------------------------------------------------------


def _stack(pairs):
    a = np.stack([p.image_a for p in pairs])[:, None]
    b = np.stack([p.image_b for p in pairs])[:, None]
    return np.concatenate([a, b], axis=0)


def detector_batch_loss(model, pairs, mode=None):
    """Mean combined detector loss over pairs; descriptors are frozen (eval mode, no tape)."""
    cfg = model.config
    n = len(pairs)
    images = _stack(pairs)
    with E.no_grad():
        desc = describe(images, model, train=False).data
    scores = score_map(images, model)
    tcfg = TripletConfig.from_config(cfg)
    total = None
    for i, p in enumerate(pairs):
        maps = PairMaps(scores[i], scores[n + i], desc[i], desc[n + i], p.h_ba)
        loss, _ = combined_detector_loss(maps, tcfg, mode or cfg.loss_detector, cfg.detector_temperature)
        total = loss if total is None else total + loss
    return total * (1.0 / n)


def anchor_correspondences(model, pairs, scores=None):
    """Top-K NMS detections of each A image and their positions in B.

    Keeps anchors whose B position lies in bounds and on B's valid mask.
    Returns (groups, anchor_xy, positive_xy) as arrays.
    """
    cfg = model.config
    n = len(pairs)
    if scores is None:
        with E.no_grad():
            scores = score_map(_stack(pairs)[:n], model).data
    groups, axy, pxy = [], [], []
    for i, p in enumerate(pairs):
        kps = nms(scores[i], cfg.detector_nms_window, cfg.train_k)
        if not kps:
            continue
        pts = np.array([[k.x, k.y] for k in kps])
        mapped, ok = warp_points(p.h_ab, pts)
        h, w = p.image_b.shape
        ok &= (mapped[:, 0] >= 0) & (mapped[:, 0] <= w - 1) & (mapped[:, 1] >= 0) & (mapped[:, 1] <= h - 1)
        rows = np.clip(np.round(np.nan_to_num(mapped[:, 1])).astype(int), 0, h - 1)
        cols = np.clip(np.round(np.nan_to_num(mapped[:, 0])).astype(int), 0, w - 1)
        ok &= p.valid[rows, cols]
        groups += [i] * int(ok.sum())
        axy.append(pts[ok])
        pxy.append(mapped[ok])
    if not groups:
        return np.zeros(0, int), np.zeros((0, 2)), np.zeros((0, 2))
    return np.array(groups), np.concatenate(axy), np.concatenate(pxy)


def descriptor_batch_loss(model, pairs, train=True, update_stats=True):
    """Hard-mined triplet over NMS anchors; the detector is frozen. None if < 2 anchors."""
    cfg = model.config
    n = len(pairs)
    images = _stack(pairs)
    with E.no_grad():
        scores = score_map(images[:n], model).data
    groups, axy, pxy = anchor_correspondences(model, pairs, scores)
    if len(groups) < 2:
        return None
    desc = describe(images, model, train=train, update_stats=update_stats)
    da = E.l2_normalize(E.sample_bilinear(desc, E.const(axy), batch=groups), axis=1)
    dp = E.l2_normalize(E.sample_bilinear(desc, E.const(pxy), batch=groups + n), axis=1)
    return descriptor_hard_triplet(da, dp, groups, axy, pxy, cfg.loss_mu, cfg.loss_exclusion_px)


def validation_loss(model, pairs, mode=None):
    with E.no_grad():
        return detector_batch_loss(model, pairs, mode).item()


# -- training loop -------------------------------------------------------------


def checkpoint_path(out_dir, step):
    return os.path.join(out_dir, f"ckpt_{step:06d}.hddw")


def train(cfg, corpus, out_dir=None, model=None, optimizer=None, start_step=0, log=None):
    """Alternate detector and descriptor updates for ``cfg.train_steps`` steps.

    Each step draws its batch from ``default_rng([seed, step])`` so a resumed
    run continues exactly as an uninterrupted one would. Returns
    ``(model, history)`` where history rows are ``(step, phase, loss)``.
    """
    from .formats import save_checkpoint

    if len(corpus) < 1:
        raise ValueError("empty corpus")
    model = model if model is not None else init_weights(np.random.default_rng(cfg.train_seed), cfg)
    optimizer = optimizer or SGD(cfg.train_momentum)
    history = []
    csv_path = os.path.join(out_dir, "losses.csv") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        if start_step == 0 or not os.path.exists(csv_path):
            with open(csv_path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step", "phase", "loss"])
        if start_step == 0:
            save_checkpoint(checkpoint_path(out_dir, 0), model, _extras(optimizer, 0))

    for step in range(start_step, cfg.train_steps):
        rng = np.random.default_rng([cfg.train_seed, step])
        drawn = [draw_pair(rng, corpus, cfg.train_crop, cfg.train_jitter) for _ in range(cfg.train_batch)]
        pairs = [p for _, p in drawn]
        phase = phase_of(cfg, step)
        prefix = DETECTOR if phase == "detector" else DESCRIPTOR
        model.zero_grad()
        loss = detector_batch_loss(model, pairs) if phase == "detector" else descriptor_batch_loss(model, pairs)
        value = float("nan") if loss is None else loss.item()
        if loss is not None:
            if not np.isfinite(value):
                _persist_failure(out_dir, cfg, step, phase, [i for i, _ in drawn], value)
                raise NonFiniteLoss(f"non-finite {phase} loss at step {step}")
            E.backward(loss)
            optimizer.step(model, model.names(prefix), learning_rate(cfg, step), cfg.train_clip)
        history.append((step, phase, value))
        if log is not None:
            log(step, phase, value)
        if csv_path:
            with open(csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow([step, phase, repr(value)])
        done = step + 1
        if out_dir and (done % cfg.train_checkpoint_every == 0 or done == cfg.train_steps):
            save_checkpoint(checkpoint_path(out_dir, done), model, _extras(optimizer, done))
    model.zero_grad()
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "final.hddw"), model, _extras(optimizer, cfg.train_steps))
    return model, history


def _extras(optimizer, step):
    out = optimizer.state()
    out["train.step"] = np.array([float(step)])
    return out


def _persist_failure(out_dir, cfg, step, phase, sources, value):
    if not out_dir:
        return
    record = {"step": step, "phase": phase, "loss": repr(value), "seed": cfg.train_seed,
              "rng": [cfg.train_seed, step], "sources": sources, "config": cfg.digest()}
    with open(os.path.join(out_dir, f"failed_batch_{step:06d}.json"), "w") as fh:
        json.dump(record, fh, indent=2)


def resume(path, corpus, out_dir=None, cfg=None, log=None):
    """Continue training from a checkpoint written by ``train``."""
    from .formats import load_checkpoint

    model, extras = load_checkpoint(path)
    if cfg is not None:
        model.config = cfg
    optimizer = SGD(model.config.train_momentum)
    optimizer.load(extras)
    start = int(extras.get("train.step", np.zeros(1))[0])
    return train(model.config, corpus, out_dir, model, optimizer, start, log)
