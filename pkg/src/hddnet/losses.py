"""Training objectives.

Detector side: the multi-scale index-proposal repeatability loss (M-SIP), the
soft-descriptor triplet family, and their weighted combination. Descriptor
side: hard-mining triplet over point descriptors sampled at detections.
"""

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .detector import soft_argmax_window
from .geometry import corresponding_origins, warp_coords, window_grid, window_indices

DIST_EPS = 1e-24
WINDOWS = (8, 16, 24, 32)
LAMBDAS = (64.0, 16.0, 4.0, 1.0)


class DegeneratePairError(ValueError):
    """No window of a pair has a valid correspondence."""


@dataclass
class TripletConfig:
    mu: float = 1.0
    windows: tuple = WINDOWS
    lambdas: tuple = LAMBDAS
    beta: float = 0.4
    exclusion_cells: int = 1

    def __post_init__(self):
        if len(self.windows) != len(self.lambdas):
            raise ValueError("windows and lambdas must have equal length")
        if any(v <= 0 for v in self.windows) or any(v <= 0 for v in self.lambdas):
            raise ValueError("windows and lambdas must be positive")

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.loss_mu, tuple(cfg.loss_windows), tuple(cfg.loss_lambdas),
                   cfg.loss_beta, cfg.loss_exclusion_cells)


@dataclass
class SoftWindowSample:
    """Soft-scores and unit soft-descriptors for a set of windows."""

    ids: np.ndarray
    rbar: E.DiffArray
    dbar: E.DiffArray
    centers: np.ndarray

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        return SoftWindowSample(self.ids[i:i + 1], self.rbar[i:i + 1], self.dbar[i:i + 1],
                                self.centers[i:i + 1])


@dataclass
class PairMaps:
    """Detector scores and (frozen) descriptors of a corresponding image pair."""

    score_a: E.DiffArray
    score_b: E.DiffArray
    desc_a: object
    desc_b: object
    h_ba: object


def _hw(score):
    score = E.const(score)
    if score.ndim == 3:
        score = score[0]
    return score


def descriptor_distance(a, b):
    """Row-wise Euclidean distance between (…, D) descriptors."""
    diff = E.const(a) - E.const(b)
    return E.sqrt((diff * diff).sum(axis=-1) + DIST_EPS)


def pairwise_distance(a, b):
    """(M, C) Euclidean distances between rows of plain arrays."""
    a, b = np.asarray(a), np.asarray(b)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return np.sqrt(d2 + DIST_EPS)


def gather_windows(score, origins, size):
    """(H, W) map -> (M, s*s) window contents."""
    score = _hw(score)
    idx = window_indices(np.asarray(origins), size, score.shape[-1])
    return score.reshape(-1)[idx]


def gather_descriptor_windows(desc, origins, size):
    """(D, H, W) map -> (M, s*s, D) window descriptors (plain array or DiffArray)."""
    idx = window_indices(np.asarray(origins), size, desc.shape[-1])
    d = desc.shape[0]
    if isinstance(desc, E.DiffArray):
        return desc.reshape(d, -1)[:, idx].transpose(1, 2, 0)
    return np.asarray(desc).reshape(d, -1)[:, idx].transpose(1, 2, 0)


# -- M-SIP ---------------------------------------------------------------


def msip_loss(score_a, score_b, h_ba, window_sizes=WINDOWS, temperature=1.0):
    """Sum over scales and windows of |pos_a - H_ba(pos_b)|^2 for soft-argmax positions.

    Windows tile image A; each is paired with the window of B centred on the
    mapped window centre. Pairs leaving B are skipped.
    """
    a, b = _hw(score_a), _hw(score_b)
    h_ab = h_ba.inverse()
    total = None
    for s in window_sizes:
        grid = window_grid(a.shape[0], a.shape[1], s)
        if len(grid) == 0:
            continue
        oa = grid.origins()
        ob, keep = corresponding_origins(h_ab, oa, s, b.shape)
        if not keep.any():
            continue
        oa, ob = oa[keep], ob[keep]
        ua, va = soft_argmax_window(gather_windows(a, oa, s), temperature, flat=True)
        ub, vb = soft_argmax_window(gather_windows(b, ob, s), temperature, flat=True)
        xa, ya = ua + oa[:, 0].astype(float), va + oa[:, 1].astype(float)
        xb, yb = warp_coords(h_ba, ub + ob[:, 0].astype(float), vb + ob[:, 1].astype(float))
        dx, dy = xa - xb, ya - yb
        term = (dx * dx + dy * dy).sum()
        total = term if total is None else total + term
    if total is None:
        raise DegeneratePairError("no window has a valid correspondence")
    return total


# -- soft aggregation and mining -------------------------------------------


def soft_aggregate(scores, descriptors):
    """Soft-score and re-normalised soft-descriptor of windows.

    ``scores`` is (…, P); ``descriptors`` is (…, P, D). With p = softmax(scores),
    returns ``rbar = sum(r * p)`` and ``dbar = normalise(sum(d * p))``.
    """
    scores = E.const(scores)
    p = E.softmax(scores, axis=-1)
    rbar = (scores * p).sum(axis=-1)
    weights = p.reshape(p.shape + (1,))
    if isinstance(descriptors, E.DiffArray):
        dsum = (descriptors * weights).sum(axis=-2)
    else:
        # frozen descriptors: weighted sum as one matmul, differentiable in p only
        dsum = E.matmul(p.reshape(p.shape[:-1] + (1, p.shape[-1])), np.asarray(descriptors))
        dsum = dsum.reshape(dsum.shape[:-2] + (dsum.shape[-1],))
    return rbar, E.l2_normalize(dsum, axis=-1)


def soft_windows(score, desc, origins, size):
    origins = np.asarray(origins)
    rbar, dbar = soft_aggregate(gather_windows(score, origins, size),
                                gather_descriptor_windows(desc, origins, size))
    return SoftWindowSample(np.arange(len(origins)), rbar, dbar, origins + (size - 1) / 2.0)


def mine_hardest(anchor_desc, candidate_desc, admissible):
    """Index of the closest admissible candidate per anchor; ties go to the lower index.

    Returns ``(index, found)``; rows without an admissible candidate have
    ``found`` False.
    """
    dist = pairwise_distance(anchor_desc, candidate_desc)
    dist = np.where(admissible, dist, np.inf)
    idx = dist.argmin(axis=1) if dist.shape[1] else np.zeros(len(dist), dtype=int)
    found = np.isfinite(dist[np.arange(len(dist)), idx]) if dist.shape[1] else np.zeros(len(dist), bool)
    return idx, found


def hardest_negative(anchor, candidates, admissible=None):
    """Closest admissible candidate to ``anchor`` by descriptor distance, or None if none qualify.

    ``anchor`` and each candidate expose a ``dbar`` of shape (1, D) (or (D,));
    ``admissible(i, candidate)`` filters candidates.
    """
    a = np.asarray(anchor.dbar.data).reshape(1, -1)
    keep = [i for i, c in enumerate(candidates) if admissible is None or admissible(i, c)]
    if not keep:
        return None
    cand = np.stack([np.asarray(candidates[i].dbar.data).reshape(-1) for i in keep])
    j, found = mine_hardest(a, cand, np.ones((1, len(keep)), dtype=bool))
    return candidates[keep[j[0]]] if found[0] else None


def chebyshev_cells(a, b):
    """(M, N) Chebyshev distance between (row, col) cell arrays."""
    return np.abs(np.asarray(a)[:, None, :] - np.asarray(b)[None, :, :]).max(axis=-1)


# -- detector triplet ------------------------------------------------------


def detector_triplet(rbar, d_anchor, d_positive, d_negative, mu=1.0):
    """sum_n rbar_n * max(0, mu + |a_n - p_n| - |a_n - n_n|).

    Descriptors are treated as constants: gradients reach only ``rbar`` (and
    whatever produced the descriptor arguments if they are DiffArrays).
    """
    dpos = descriptor_distance(d_anchor, d_positive)
    dneg = descriptor_distance(d_anchor, d_negative)
    return (E.const(rbar) * E.relu(mu + dpos - dneg)).sum()


@dataclass
class TripletMining:
    """What window_triplet picked; kept for inspection and oracle tests."""

    anchor_ids: np.ndarray
    negative_ids: np.ndarray
    n_candidates_a: int
    loss: E.DiffArray


def window_triplet(pair, size, mu=1.0, exclusion_cells=1):
    """Detector triplet over all s x s windows of image A (one scale).

    Positives are the corresponding windows of B; negatives are the hardest
    soft-descriptors among grid windows of A outside the anchor's cell
    neighbourhood and grid windows of B outside the positive's neighbourhood.
    """
    a, b = _hw(pair.score_a), _hw(pair.score_b)
    grid_a = window_grid(a.shape[0], a.shape[1], size)
    grid_b = window_grid(b.shape[0], b.shape[1], size)
    zero = E.DiffArray(0.0)
    if len(grid_a) == 0 or len(grid_b) == 0:
        return TripletMining(np.zeros(0, int), np.zeros(0, int), len(grid_a), zero)
    anchors = soft_windows(a, pair.desc_a, grid_a.origins(), size)
    cand_b = soft_windows(b, pair.desc_b, grid_b.origins(), size)
    pos_origins, keep = corresponding_origins(pair.h_ba.inverse(), grid_a.origins(), size, b.shape)
    ids = np.nonzero(keep)[0]
    if len(ids) == 0:
        return TripletMining(ids, ids, len(grid_a), zero)
    positives = soft_windows(b, pair.desc_b, pos_origins[ids], size)

    pos_cells = np.floor(positives.centers[:, ::-1] / size).astype(int)  # (row, col)
    adm_a = chebyshev_cells(grid_a.cells()[ids], grid_a.cells()) > exclusion_cells
    adm_b = chebyshev_cells(pos_cells, grid_b.cells()) > exclusion_cells
    admissible = np.concatenate([adm_a, adm_b], axis=1)
    pool = E.concat([anchors.dbar, cand_b.dbar], axis=0)
    d_anchor = anchors.dbar[ids]
    neg, found = mine_hardest(d_anchor.data, pool.data, admissible)
    if not found.any():
        return TripletMining(ids[:0], ids[:0], len(grid_a), zero)
    sel = np.nonzero(found)[0]
    loss = detector_triplet(anchors.rbar[ids[sel]], d_anchor[sel], positives.dbar[sel],
                            pool[neg[sel]], mu)
    return TripletMining(ids[sel], neg[sel], len(grid_a), loss)


def triplet_loss(pair, size, mu=1.0, exclusion_cells=1):
    return window_triplet(pair, size, mu, exclusion_cells).loss


def ms_trip(pair, config=TripletConfig()):
    """sum_j lambda_j * L_trip(s_j)."""
    total = None
    for s, lam in zip(config.windows, config.lambdas):
        term = triplet_loss(pair, s, config.mu, config.exclusion_cells) * float(lam)
        total = term if total is None else total + term
    return total


def combine(msip, mstrip, beta=0.4):
    return E.const(msip) + E.const(mstrip) * float(beta)


def combined_detector_loss(pair, config=TripletConfig(), mode="rd", temperature=1.0):
    """Detector objective: ``rd`` = M-SIP + beta * MS-Trip; ``msip`` / ``trip`` use one term.

    Returns ``(loss, terms)`` where ``terms`` holds the scalar components.
    """
    terms = {}
    msip = mstrip = None
    if mode in ("rd", "msip"):
        msip = msip_loss(pair.score_a, pair.score_b, pair.h_ba, config.windows, temperature)
        terms["msip"] = msip.item()
    if mode in ("rd", "trip"):
        mstrip = ms_trip(pair, config)
        terms["ms_trip"] = mstrip.item()
    if mode == "rd":
        loss = combine(msip, mstrip, config.beta)
    elif mode == "msip":
        loss = msip
    elif mode == "trip":
        loss = mstrip
    else:
        raise ValueError(f"unknown detector loss mode {mode!r}")
    return loss, terms


# -- descriptor triplet ----------------------------------------------------


def descriptor_negatives(anchors, positives, groups, anchor_xy, positive_xy, radius=8.0):
    """Hardest in-batch negative per anchor among non-matching positives and anchors.

    Candidates from the same pair within ``radius`` pixels of the true match
    (for positives) or of the anchor (for anchors) are excluded. Returns
    ``(index into concat(positives, anchors), found)``.
    """
    m = len(groups)
    groups = np.asarray(groups)
    same = groups[:, None] == groups[None, :]
    eye = np.eye(m, dtype=bool)
    pxy, axy = np.asarray(positive_xy, float), np.asarray(anchor_xy, float)
    near_p = same & (np.linalg.norm(pxy[:, None] - pxy[None], axis=-1) <= radius)
    near_a = same & (np.linalg.norm(axy[:, None] - axy[None], axis=-1) <= radius)
    admissible = np.concatenate([~eye & ~near_p, ~eye & ~near_a], axis=1)
    pool = np.concatenate([np.asarray(positives), np.asarray(anchors)], axis=0)
    return mine_hardest(np.asarray(anchors), pool, admissible)


def descriptor_hard_triplet(anchors, positives, groups, anchor_xy, positive_xy, mu=1.0, radius=8.0):
    """Mean over anchors of max(0, mu + d(a, p) - d(a, hardest negative))."""
    anchors, positives = E.const(anchors), E.const(positives)
    if anchors.shape[0] < 2:
        raise ValueError("descriptor triplet needs at least two anchors")
    neg, found = descriptor_negatives(anchors.data, positives.data, groups, anchor_xy, positive_xy, radius)
    sel = np.nonzero(found)[0]
    if len(sel) == 0:
        return E.DiffArray(0.0)
    pool = E.concat([positives, anchors], axis=0)
    dpos = descriptor_distance(anchors[sel], positives[sel])
    dneg = descriptor_distance(anchors[sel], pool[neg[sel]])
    return E.relu(mu + dpos - dneg).mean()
