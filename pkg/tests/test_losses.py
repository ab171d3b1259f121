from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles as O
from hddnet import engine as E
from hddnet import losses as L
from hddnet.config import Config
from hddnet.geometry import Homography


def _pair(rng, size=32, d=4, h=None):
    h = np.eye(3) if h is None else h
    return L.PairMaps(rng.random((1, size, size)), rng.random((1, size, size)),
                      O.unit_map(rng, d, size, size), O.unit_map(rng, d, size, size), Homography(h))


# -- M-SIP -------------------------------------------------------------------


def test_msip_identical_maps_identity_is_zero():
    a = np.random.default_rng(0).random((1, 32, 32))
    assert L.msip_loss(a, a, Homography.identity()).item() < 1e-9


def test_msip_translation_covariance():
    a = np.random.default_rng(1).random((1, 32, 32)) * 3
    b = np.zeros_like(a)
    b[..., 2:] = a[..., :-2]
    h_ba = Homography.translation(-2, 0)  # B pixel x lands on A pixel x - 2
    assert L.msip_loss(a, b, h_ba).item() < 1e-6


def test_msip_three_pixel_inconsistency_costs_nine():
    a = np.zeros((1, 16, 16))
    b = np.zeros((1, 16, 16))
    a[0, 2, 2] = 200.0
    b[0, 2, 5] = 200.0
    assert L.msip_loss(a, b, Homography.identity(), (8,)).item() == pytest.approx(9.0, abs=1e-9)


def test_msip_degenerate_pair_rejected():
    a = np.random.default_rng(2).random((1, 16, 16))
    with pytest.raises(L.DegeneratePairError):
        L.msip_loss(a, a, Homography.translation(100, 0), (8,))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_msip_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((24, 24)) * 2, rng.random((24, 24)) * 2
    h = O.mild_homography(rng, 24)
    got = L.msip_loss(a[None], b[None], Homography(h), (8, 12)).item()
    assert got == pytest.approx(O.msip(a, b, h, (8, 12)), rel=1e-12, abs=1e-12)


def test_msip_symmetric_under_identity():
    r = np.random.default_rng(3)
    a, b = r.random((1, 32, 32)), r.random((1, 32, 32))
    h = Homography.identity()
    assert L.msip_loss(a, b, h).item() == pytest.approx(L.msip_loss(b, a, h).item(), rel=1e-12)


def test_msip_gradient_fd():
    r = np.random.default_rng(4)
    a, b = E.param(r.random((1, 16, 16))), E.param(r.random((1, 16, 16)))
    h = Homography(O.mild_homography(r, 16))
    assert E.check_gradients(lambda: L.msip_loss(a, b, h, (8,)), [a, b]) < 1e-6


# -- soft aggregation ---------------------------------------------------------


def test_soft_aggregate_uniform():
    r = np.random.default_rng(5)
    d = r.normal(size=(9, 4))
    rbar, dbar = L.soft_aggregate(np.full(9, 0.7), d)
    assert rbar.item() == pytest.approx(0.7, abs=1e-15)
    m = d.mean(axis=0)
    np.testing.assert_allclose(dbar.data, m / np.linalg.norm(m), atol=1e-14)


def test_soft_aggregate_dominant_score():
    d = O.unit_rows(np.random.default_rng(6), 9, 4)
    s = np.zeros(9)
    s[3] = 100.0
    _, dbar = L.soft_aggregate(s, d)
    np.testing.assert_allclose(dbar.data, d[3], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 8))
def test_soft_aggregate_matches_exhaustive_sum(seed, s):
    r = np.random.default_rng(seed)
    scores, descs = r.random(s * s) * 3, r.normal(size=(s * s, 5))
    rbar, dbar = L.soft_aggregate(scores, descs)
    orb, odb = O.aggregate(scores, descs)
    assert abs(rbar.item() - orb) < 1e-12
    np.testing.assert_allclose(dbar.data, odb, atol=1e-12)
    # the frozen (plain array) and differentiable descriptor paths agree
    _, dbar2 = L.soft_aggregate(scores, E.const(descs))
    np.testing.assert_allclose(dbar2.data, dbar.data, atol=1e-14)


def test_soft_aggregate_gradients_fd():
    r = np.random.default_rng(7)
    s, d = E.param(r.random((3, 16))), E.param(r.normal(size=(3, 16, 4)))
    w = r.normal(size=(3, 4))
    fn = lambda: (lambda rd: rd[0].sum() + (rd[1] * w).sum())(L.soft_aggregate(s, d))
    assert E.check_gradients(fn, [s, d]) < 1e-6


# -- hardest negative -----------------------------------------------------------


def _sample(vec):
    return SimpleNamespace(dbar=E.const(np.asarray(vec, float).reshape(1, -1)))


def test_hardest_negative_skips_excluded():
    anchor = _sample([0.0, 0.0])
    cands = [_sample([1.2, 0]), _sample([0.3, 0]), _sample([0.9, 0])]
    got = L.hardest_negative(anchor, cands, lambda i, c: i != 1)
    assert got is cands[2]


def test_hardest_negative_single_and_empty():
    anchor = _sample([0.0, 1.0])
    c = [_sample([5.0, 5.0])]
    assert L.hardest_negative(anchor, c) is c[0]
    assert L.hardest_negative(anchor, c, lambda i, _: False) is None


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_hardest_negative_matches_scan(seed):
    r = np.random.default_rng(seed)
    anchor = _sample(O.unit_rows(r, 1, 8)[0])
    vecs = O.unit_rows(r, 200, 8)
    cands = [_sample(v) for v in vecs]
    banned = set(r.choice(200, 50, replace=False).tolist())
    got = L.hardest_negative(anchor, cands, lambda i, _: i not in banned)
    dist = [np.linalg.norm(anchor.dbar.data[0] - v) if i not in banned else np.inf for i, v in enumerate(vecs)]
    assert got is cands[int(np.argmin(dist))]


# -- detector triplet ------------------------------------------------------------


def _vec_at(dist):
    """Unit vectors a, b with |a - b| = dist."""
    t = 2 * np.arcsin(dist / 2)
    return np.array([1.0, 0.0]), np.array([np.cos(t), np.sin(t)])


def test_detector_triplet_arithmetic():
    a, p = _vec_at(0.2)
    _, n = _vec_at(1.0)
    loss = L.detector_triplet(np.array([0.5]), a[None], p[None], n[None], mu=1.0)
    assert loss.item() == pytest.approx(0.1, abs=1e-9)


def test_detector_triplet_hinge():
    a, p = _vec_at(0.2)
    _, n = _vec_at(1.9)
    assert L.detector_triplet(np.array([3.0]), a[None], p[None], n[None], mu=1.0).item() == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([8, 16]))
def test_window_triplet_matches_loop_oracle(seed, s):
    r = np.random.default_rng(seed)
    h = O.mild_homography(r, 32)
    pair = _pair(r, 32, 4, h)
    got = L.window_triplet(pair, s)
    want, picks = O.window_triplet(pair.score_a[0], pair.score_b[0], pair.desc_a, pair.desc_b, h, s)
    assert got.loss.item() == pytest.approx(want, rel=1e-12, abs=1e-12)
    assert list(zip(got.anchor_ids.tolist(), got.negative_ids.tolist())) == picks


def test_ms_trip_is_weighted_sum_of_scales():
    pair = _pair(np.random.default_rng(8), 32)
    per = [L.triplet_loss(pair, s).item() for s in (8, 16, 24, 32)]
    total = L.ms_trip(pair).item()
    assert total == pytest.approx(64 * per[0] + 16 * per[1] + 4 * per[2] + per[3], rel=1e-12)


def test_ms_trip_zero_when_all_scales_zero():
    cfg = L.TripletConfig(mu=0.0)
    a = np.ones((1, 32, 32))
    d = np.zeros((2, 32, 32))
    d[0] = 1.0  # every descriptor identical: d+ = d- = 0, hinge at margin 0
    pair = L.PairMaps(a, a, d, d, Homography.identity())
    assert L.ms_trip(pair, cfg).item() == 0


def test_triplet_config_validation():
    with pytest.raises(ValueError):
        L.TripletConfig(windows=(8, 16), lambdas=(1.0,))
    with pytest.raises(ValueError):
        L.TripletConfig(lambdas=(64, 16, 4, 0))
    cfg = L.TripletConfig.from_config(Config())
    assert cfg.windows == (8, 16, 24, 32) and cfg.lambdas == (64, 16, 4, 1) and cfg.beta == 0.4


def test_detector_triplet_gradient_reaches_scores_only():
    r = np.random.default_rng(9)
    sa, sb = E.param(r.random((1, 16, 16))), E.param(r.random((1, 16, 16)))
    da, db = E.param(O.unit_map(r, 4, 16, 16)), E.param(O.unit_map(r, 4, 16, 16))
    pair = L.PairMaps(sa, sb, da.data, db.data, Homography(O.mild_homography(r, 16)))
    assert E.check_gradients(lambda: L.triplet_loss(pair, 8), [sa, sb]) < 1e-6
    # descriptors enter as frozen arrays: nothing reaches the descriptor leaves
    E.backward(L.triplet_loss(pair, 8))
    assert da.grad is None and db.grad is None


# -- combined -----------------------------------------------------------------


def test_combine_arithmetic():
    assert L.combine(2.0, 5.0, 0.4).item() == pytest.approx(4.0, abs=1e-15)


def test_combined_beta_zero_is_msip():
    pair = _pair(np.random.default_rng(10), 32)
    loss, terms = L.combined_detector_loss(pair, L.TripletConfig(beta=0.0))
    assert loss.item() == pytest.approx(L.msip_loss(pair.score_a, pair.score_b, pair.h_ba).item(), rel=1e-15)
    assert set(terms) == {"msip", "ms_trip"}


def test_combined_modes():
    pair = _pair(np.random.default_rng(11), 32)
    rd, t = L.combined_detector_loss(pair)
    assert rd.item() == pytest.approx(t["msip"] + 0.4 * t["ms_trip"], rel=1e-13)
    assert L.combined_detector_loss(pair, mode="msip")[0].item() == pytest.approx(t["msip"], rel=1e-15)
    assert L.combined_detector_loss(pair, mode="trip")[0].item() == pytest.approx(t["ms_trip"], rel=1e-15)
    with pytest.raises(ValueError):
        L.combined_detector_loss(pair, mode="both")


def test_combined_gradient_is_linear_combination():
    r = np.random.default_rng(12)
    sa, sb = E.param(r.random((1, 32, 32))), E.param(r.random((1, 32, 32)))
    pair = L.PairMaps(sa, sb, O.unit_map(r, 4, 32, 32), O.unit_map(r, 4, 32, 32), Homography.identity())

    def grad(fn):
        sa.zero_grad()
        sb.zero_grad()
        E.backward(fn())
        return sa.grad.copy(), sb.grad.copy()

    g = grad(lambda: L.combined_detector_loss(pair)[0])
    g1 = grad(lambda: L.msip_loss(sa, sb, pair.h_ba))
    g2 = grad(lambda: L.ms_trip(pair))
    for k in range(2):
        np.testing.assert_allclose(g[k], g1[k] + 0.4 * g2[k], atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000))
def test_detector_losses_nonnegative_and_finite(seed):
    r = np.random.default_rng(seed)
    pair = _pair(r, 32, 4, O.mild_homography(r, 32))
    loss, terms = L.combined_detector_loss(pair)
    assert np.isfinite(loss.item()) and loss.item() >= 0
    assert all(v >= 0 for v in terms.values())


# -- descriptor triplet ----------------------------------------------------------


def test_descriptor_triplet_zero_when_separated():
    a = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    loss = L.descriptor_hard_triplet(a, a.copy(), [0, 1, 2], np.zeros((3, 2)), np.zeros((3, 2)), mu=1.0)
    assert loss.item() == 0  # d+ = 0, d- = sqrt(2) > 1


def test_descriptor_triplet_two_anchors_by_hand():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = np.array([[0.6, 0.8], [0.8, 0.6]])
    xy = np.array([[0.0, 0.0], [50.0, 50.0]])
    loss = L.descriptor_hard_triplet(a, p, [0, 0], xy, xy, mu=1.0).item()
    # anchor 0: d+ = |(0.4, -0.8)|, pool {p1, a1} -> nearest p1 at |(0.2, -0.6)|
    t0 = 1 + np.sqrt(0.16 + 0.64) - np.sqrt(0.04 + 0.36)
    # anchor 1: d+ = |(-0.8, 0.4)|, pool {p0, a0} -> nearest p0 at |(-0.6, 0.2)|
    t1 = 1 + np.sqrt(0.64 + 0.16) - np.sqrt(0.36 + 0.04)
    assert loss == pytest.approx((t0 + t1) / 2, abs=1e-9)


def test_descriptor_triplet_needs_two_anchors():
    with pytest.raises(ValueError):
        L.descriptor_hard_triplet(np.ones((1, 3)), np.ones((1, 3)), [0], np.zeros((1, 2)), np.zeros((1, 2)))


def _descriptor_batch(rng, pairs=8, k=20, d=8):
    groups = np.repeat(np.arange(pairs), k)
    m = pairs * k
    anchors = O.unit_rows(rng, m, d)
    positives = anchors + 0.3 * rng.normal(size=(m, d))
    positives /= np.linalg.norm(positives, axis=1, keepdims=True)
    axy = rng.uniform(0, 96, size=(m, 2))
    pxy = axy + rng.normal(0, 2, size=(m, 2))
    return anchors, positives, groups, axy, pxy


def test_descriptor_mining_matches_exhaustive_oracle_160():
    a, p, g, axy, pxy = _descriptor_batch(np.random.default_rng(13))
    neg, found = L.descriptor_negatives(a, p, g, axy, pxy)
    want_loss, want_neg = O.descriptor_triplet(a, p, g, axy, pxy)
    assert found.all()
    assert neg.tolist() == want_neg
    got = L.descriptor_hard_triplet(a, p, g, axy, pxy).item()
    assert got == pytest.approx(want_loss, rel=1e-12)


def test_descriptor_exclusion_radius():
    a = np.array([[1.0, 0.0], [0.99, 0.141], [0.0, 1.0]])
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    xy = np.array([[10.0, 10.0], [14.0, 10.0], [40.0, 40.0]])
    neg, _ = L.descriptor_negatives(a, a.copy(), [0, 0, 0], xy, xy, radius=8.0)
    assert neg[0] in (2, 5)  # index 1 and 4 are within 8 px of anchor 0
    neg, _ = L.descriptor_negatives(a, a.copy(), [0, 1, 0], xy, xy, radius=8.0)
    assert neg[0] == 1  # a different pair is never excluded


def test_descriptor_triplet_gradient_fd():
    a, p, g, axy, pxy = _descriptor_batch(np.random.default_rng(14), pairs=2, k=4, d=5)
    A, P = E.param(a), E.param(p)
    assert E.check_gradients(lambda: L.descriptor_hard_triplet(A, P, g, axy, pxy), [A, P]) < 1e-6
