"""Feature extraction, mutual-NN matching, MMA / repeatability, and the ablation harness."""

import csv
import traceback
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .config import Config
from .descriptor import describe, sample_descriptors
from .detector import nms, score_map
from .formats import FeatureSet
from .geometry import Homography, warp_points

REPORT_FIELDS = ["variant", "config_hash", "detector_loss", "block_filter", "sign_split",
                 "multiscale", "steps", "mma_viewpoint", "mma_illumination",
                 "repeatability", "n_pairs", "status"]


def usable_size(h, w, levels):
    f = 2 ** (levels - 1)
    return h - h % f, w - w % f


def extract(image, model, top_n=None):
    """score map -> NMS -> bilinear descriptors. The image is cropped (bottom/right)
    to a size the pyramid accepts."""
    cfg = model.config
    top_n = top_n or cfg.detector_topk
    img = np.asarray(image, dtype=np.float64)
    levels = max(cfg.pyramid_levels, cfg.detector_levels)
    h, w = usable_size(*img.shape, levels)
    img = img[:h, :w][None]
    with E.no_grad():
        scores = score_map(img, model).data
        kps = nms(scores, cfg.detector_nms_window, top_n)
        if kps:
            xy = np.array([[k.x, k.y] for k in kps])
            desc = sample_descriptors(describe(img, model).data, xy).data
        else:
            xy = np.zeros((0, 2))
            desc = np.zeros((0, cfg.descriptor_dim))
    meta = {"requested": int(top_n), "returned": len(kps), "truncated": len(kps) < top_n}
    return FeatureSet(xy, [k.score for k in kps], desc, w, h, meta)


@dataclass
class MatchResult:
    index_a: np.ndarray
    index_b: np.ndarray
    distance: np.ndarray
    xy_a: np.ndarray
    xy_b: np.ndarray
    n_a: int
    n_b: int

    def __len__(self):
        return len(self.index_a)

    def correct(self, h_ab, threshold=5.0):
        """Per-match flag: one-way transfer error of A's point through ``h_ab``."""
        if len(self) == 0:
            return np.zeros(0, dtype=bool)
        proj, ok = warp_points(h_ab, self.xy_a)
        err = np.linalg.norm(proj - self.xy_b, axis=1)
        return ok & (np.nan_to_num(err, nan=np.inf) <= threshold)


def descriptor_distances(da, db):
    da, db = np.asarray(da, dtype=np.float64), np.asarray(db, dtype=np.float64)
    d2 = (da * da).sum(1)[:, None] + (db * db).sum(1)[None, :] - 2.0 * da @ db.T
    return np.sqrt(np.maximum(d2, 0.0))


def match(fa, fb):
    """Mutual nearest neighbours in Euclidean descriptor space (ties -> lower index)."""
    if len(fa) == 0 or len(fb) == 0:
        e = np.zeros(0, dtype=int)
        return MatchResult(e, e, np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)), len(fa), len(fb))
    dist = descriptor_distances(fa.descriptors, fb.descriptors)
    ab = dist.argmin(axis=1)
    ba = dist.argmin(axis=0)
    ia = np.nonzero(ba[ab] == np.arange(len(fa)))[0]
    ib = ab[ia]
    return MatchResult(ia, ib, dist[ia, ib], fa.xy[ia], fb.xy[ib], len(fa), len(fb))


def mma(result, h_ab, threshold=5.0):
    """Correct matches over the number of features detected in A."""
    if result.n_a == 0:
        return 0.0
    return float(result.correct(h_ab, threshold).sum()) / result.n_a


def repeatability(xy_a, xy_b, h_ab, threshold=3.0):
    """Share of A's keypoints whose projection pairs one-to-one (greedy by distance) with B's."""
    xy_a = np.asarray(xy_a, dtype=np.float64).reshape(-1, 2)
    xy_b = np.asarray(xy_b, dtype=np.float64).reshape(-1, 2)
    if len(xy_a) == 0:
        return 0.0
    if len(xy_b) == 0:
        return 0.0
    proj, ok = warp_points(h_ab, xy_a)
    dist = np.linalg.norm(proj[:, None, :] - xy_b[None, :, :], axis=-1)
    dist[~ok] = np.inf
    ia, ib = np.nonzero(dist <= threshold)
    order = np.lexsort((ib, ia, dist[ia, ib]))
    used_a, used_b, hits = set(), set(), 0
    for k in order:
        a, b = ia[k], ib[k]
        if a in used_a or b in used_b:
            continue
        used_a.add(a)
        used_b.add(b)
        hits += 1
    return hits / len(xy_a)


@dataclass
class PairScore:
    mma: float
    repeatability: float
    n_a: int
    n_matches: int


def evaluate_pair(model, image_a, image_b, h_ab, top_n=None, mma_px=None, rep_px=None):
    cfg = model.config
    fa, fb = extract(image_a, model, top_n), extract(image_b, model, top_n)
    res = match(fa, fb)
    return PairScore(mma(res, h_ab, mma_px or cfg.eval_mma_px),
                     repeatability(fa.xy, fb.xy, h_ab, rep_px or cfg.eval_rep_px), len(fa), len(res))


def evaluate_pairs(model, pairs, top_n=None):
    """Mean MMA and repeatability over TrainPair-like objects (``image_a``, ``image_b``, ``h_ab``)."""
    scores = [evaluate_pair(model, p.image_a, p.image_b, p.h_ab, top_n) for p in pairs]
    return {
        "mma": float(np.mean([s.mma for s in scores])) if scores else 0.0,
        "repeatability": float(np.mean([s.repeatability for s in scores])) if scores else 0.0,
        "pairs": scores,
    }


# -- held-out synthetic benchmark ------------------------------------------------


def heldout_pairs(cfg, corpus, split="viewpoint"):
    """Deterministic evaluation pairs: ``viewpoint`` = random homography, no photometric change;
    ``illumination`` = identity geometry with brightness/contrast change."""
    from .training import draw_pair, make_pair

    rng = np.random.default_rng([cfg.eval_seed, 0 if split == "viewpoint" else 1])
    out = []
    for _ in range(cfg.eval_pairs):
        if split == "viewpoint":
            out.append(draw_pair(rng, corpus, cfg.train_crop, jitter=False)[1])
        else:
            idx = int(rng.integers(0, len(corpus)))
            out.append(make_pair(rng, corpus[idx], cfg.train_crop, True, Homography.identity()))
    return out


def heldout_corpus(cfg, count=12):
    from .training import make_corpus

    return make_corpus(cfg.eval_seed + 7, count, cfg.train_source)


# -- ablations -----------------------------------------------------------------


def parse_matrix(text):
    """``[name]`` sections of ``key = value`` lines; lines before the first section are shared."""
    from .config import parse_text

    base, variants, current = [], {}, None
    for line in text.splitlines():
        stripped = line.split("#", 1)[0].strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if not current or current in variants:
                raise ValueError(f"bad or duplicate variant name {current!r}")
            variants[current] = []
            continue
        (base if current is None else variants[current]).append(line)
    shared = parse_text("\n".join(base))
    if not variants:
        variants["default"] = []
    return [(name, {**shared, **parse_text("\n".join(lines))}) for name, lines in variants.items()]


def ablation_row(name, cfg, corpus, eval_corpus=None, out_dir=None):
    from .training import train

    row = {"variant": name, "config_hash": cfg.digest(), "detector_loss": cfg.loss_detector,
           "block_filter": cfg.block_filter, "sign_split": "on" if cfg.block_sign_split else "off",
           "multiscale": "on" if cfg.descriptor_multiscale else "off", "steps": cfg.train_steps}
    model, _ = train(cfg, corpus, out_dir)
    eval_corpus = eval_corpus if eval_corpus is not None else heldout_corpus(cfg)
    view = evaluate_pairs(model, heldout_pairs(cfg, eval_corpus, "viewpoint"), cfg.eval_top)
    illum = evaluate_pairs(model, heldout_pairs(cfg, eval_corpus, "illumination"), cfg.eval_top)
    row.update(mma_viewpoint=f"{view['mma']:.6f}", mma_illumination=f"{illum['mma']:.6f}",
               repeatability=f"{view['repeatability']:.6f}", n_pairs=len(view["pairs"]), status="ok")
    return row


def ablation_run(variants, corpus, out_csv=None, eval_corpus=None, base=None):
    """Train and evaluate each ``(name, flat overrides)`` variant; failures become error rows."""
    base = base or Config()
    rows = []
    for name, flat in variants:
        try:
            cfg = base.with_flat(flat)
        except (KeyError, ValueError) as exc:
            rows.append({"variant": name, "config_hash": "", "status": f"error: {exc}"})
            continue
        try:
            rows.append(ablation_row(name, cfg, corpus, eval_corpus))
        except Exception as exc:  # a failed variant must not abort the report
            traceback.print_exc()
            rows.append({"variant": name, "config_hash": cfg.digest(),
                         "status": f"error: {type(exc).__name__}: {exc}"})
    if out_csv:
        write_rows(out_csv, rows)
    return rows


def write_rows(path, rows, fields=REPORT_FIELDS):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k, "") for k in fields})
