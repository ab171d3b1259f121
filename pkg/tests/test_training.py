import json

import numpy as np
import pytest

from hddnet import engine as E
from hddnet import training as TR
from hddnet.config import Config
from hddnet.formats import load_checkpoint
from hddnet.geometry import Homography, warp_points
from hddnet.model import DESCRIPTOR, DETECTOR

TINY = Config().with_flat({
    "descriptor.width": "4", "descriptor.features": "4", "descriptor.dim": "4", "detector.width": "4",
    "train.crop": "32", "train.source": "64", "train.batch": "2", "train.k": "6",
    "loss.windows": "8,16", "loss.lambdas": "4,1", "train.checkpoint_every": "2",
})


@pytest.fixture(scope="module")
def corpus():
    return TR.make_corpus(0, 6, 64)


@pytest.fixture(scope="module")
def big_source():
    return TR.make_corpus(5, 1, 200)[0]


# -- pairs ----------------------------------------------------------------------------


def test_synthetic_image_range_and_determinism():
    a = TR.make_corpus(1, 2, 50)
    b = TR.make_corpus(1, 2, 50)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].min() == 0.0 and a[0].max() == 1.0
    assert not np.array_equal(a[0], a[1])


def test_pairs_are_deterministic(corpus):
    p = TR.make_pairs(3, corpus, 4, crop=32)
    q = TR.make_pairs(3, corpus, 4, crop=32)
    for x, y in zip(p, q):
        assert np.array_equal(x.image_a, y.image_a) and np.array_equal(x.image_b, y.image_b)
        assert np.array_equal(x.h_ba.m, y.h_ba.m)


def test_identity_pair_without_jitter_reproduces_a(big_source):
    p = TR.make_pair(np.random.default_rng(0), big_source, 96, jitter=False, homography=Homography.identity())
    assert p.valid.all()
    assert np.abs(p.image_a - p.image_b).max() < 1e-12


def test_b_samples_a_through_the_homography(big_source):
    rng = np.random.default_rng(1)
    p = TR.make_pair(rng, big_source, 96, jitter=False)
    # B pixel q shows A's plane point h_ba(q); check on interior points of A
    ys, xs = np.nonzero(p.valid)
    pts = np.column_stack([xs, ys]).astype(float)
    back, ok = warp_points(p.h_ba, pts)
    inside = ok & (back[:, 0] >= 1) & (back[:, 0] <= 94) & (back[:, 1] >= 1) & (back[:, 1] <= 94)
    sel = np.nonzero(inside)[0][::97]
    assert len(sel) > 20
    from scipy.ndimage import map_coordinates
    ref = map_coordinates(p.image_a, [back[sel, 1], back[sel, 0]], order=1)
    assert np.abs(ref - p.image_b[ys[sel], xs[sel]]).max() < 1e-9


def test_mean_coverage_over_a_thousand_pairs(big_source):
    rng = np.random.default_rng(2)
    cov = [TR.make_pair(rng, big_source, 96).valid.mean() for _ in range(1000)]
    assert min(cov) >= TR.MIN_COVERAGE
    assert np.mean(cov) >= 0.7


def test_forced_bad_homography_rejects_source(big_source):
    far = Homography.translation(500, 0)
    with pytest.raises(TR.SourceRejected):
        TR.make_pair(np.random.default_rng(0), big_source, 96, homography=far)


def test_small_source_rejected():
    with pytest.raises(ValueError):
        TR.make_pair(np.random.default_rng(0), np.zeros((50, 50)), 96)


# -- model and optimiser -----------------------------------------------------------------


def test_parameter_counts_by_hand():
    m = TR.init_weights(np.random.default_rng(0), Config())
    # detector head: 10 -> 16 -> 16 -> 1, 3x3 convs with bias
    det = (10 * 16 * 9 + 16) + (16 * 16 * 9 + 16) + (16 * 1 * 9 + 1)
    # encoder 24 -> 32 -> 32 -> 64 -> 64 with per-channel gamma/beta, then 1x1 fusion of 3 levels
    enc = sum(ci * co * 9 + 2 * co for ci, co in ((24, 32), (32, 32), (32, 64), (64, 64)))
    fuse = 3 * 64 * 32 + 32
    assert m.parameter_count(DETECTOR) == det == 3921
    assert m.parameter_count(DESCRIPTOR) == enc + fuse == 77984
    assert not any("block" in n for n in m.names())


def test_learned_filter_adds_one_kernel():
    base = TR.init_weights(np.random.default_rng(0), Config()).parameter_count()
    learned = TR.init_weights(np.random.default_rng(0), Config().with_flat({"block.filter": "learned"}))
    assert learned.parameter_count() == base + 81


def test_sgd_momentum_by_hand():
    m = TR.init_weights(np.random.default_rng(0), TINY)
    name = "det.head2.b"
    w0 = m[name].data.copy()
    opt = TR.SGD(0.5)
    m[name].grad = np.array([2.0])
    opt.step(m, [name], 0.1)
    m[name].grad = np.array([1.0])
    opt.step(m, [name], 0.1)
    # v1 = 2, v2 = 0.5 * 2 + 1 = 2 -> total step 0.1 * (2 + 2)
    assert m[name].data[0] == pytest.approx(w0[0] - 0.4)


def test_clip_caps_joint_norm():
    m = TR.init_weights(np.random.default_rng(0), TINY)
    names = ["det.head2.b", "det.head1.b"]
    before = {n: m[n].data.copy() for n in names}
    m["det.head2.b"].grad = np.array([3.0])
    m["det.head1.b"].grad = np.full(4, 2.0)  # norm 5 together
    TR.SGD(0.0).step(m, names, 1.0, clip=1.0)
    assert m["det.head2.b"].data[0] - before["det.head2.b"][0] == pytest.approx(-0.6)
    assert np.allclose(m["det.head1.b"].data - before["det.head1.b"], -0.4)


def test_schedule():
    cfg = Config().with_flat({"train.lr": "0.2", "train.lr_halve_every": "10", "train.alternation": "2"})
    assert [TR.learning_rate(cfg, s) for s in (0, 9, 10, 25)] == [0.2, 0.2, 0.1, 0.05]
    assert [TR.phase_of(cfg, s) for s in range(6)] == ["detector"] * 2 + ["descriptor"] * 2 + ["detector"] * 2


# -- gradient partitioning ---------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_pairs(corpus):
    return TR.make_pairs(4, corpus, 2, crop=32)


def _tiny_model():
    m = TR.init_weights(np.random.default_rng(7), TINY)
    for n in m.names("det.head"):
        if n.endswith(".b") and not n.startswith("det.head2"):
            m[n].data[:] = 0.05
    return m


def test_detector_loss_touches_only_detector(tiny_pairs):
    m = _tiny_model()
    m.zero_grad()
    E.backward(TR.detector_batch_loss(m, tiny_pairs))
    assert all(m[n].grad is None or not np.any(m[n].grad) for n in m.names(DESCRIPTOR))
    assert any(m[n].grad is not None and np.any(m[n].grad) for n in m.names(DETECTOR))
    # the triplet term reads frozen descriptors, so only the position term is
    # independent of them as a function; that is the part checked numerically
    fn = lambda: TR.detector_batch_loss(m, tiny_pairs, mode="msip")
    for name in ("desc.enc3.w", "desc.fuse.w"):
        w = m[name]
        fd = E.numerical_grad(fn, w, eps=1e-6, indices=range(0, w.size, 7))
        assert np.nanmax(np.abs(fd)) == 0.0


def test_descriptor_loss_touches_only_descriptor(tiny_pairs):
    m = _tiny_model()
    fn = lambda: TR.descriptor_batch_loss(m, tiny_pairs, update_stats=False)
    m.zero_grad()
    E.backward(fn())
    assert all(m[n].grad is None or not np.any(m[n].grad) for n in m.names(DETECTOR))
    assert any(m[n].grad is not None and np.any(m[n].grad) for n in m.names(DESCRIPTOR))
    w = m["det.head0.w"]
    fd = E.numerical_grad(fn, w, eps=1e-6, indices=range(0, w.size, 5))
    assert np.nanmax(np.abs(fd)) == 0.0


def test_detector_batch_loss_matches_finite_differences(tiny_pairs):
    m = _tiny_model()
    fn = lambda: TR.detector_batch_loss(m, tiny_pairs)
    m.zero_grad()
    E.backward(fn())
    w = m["det.head1.w"]
    idx = list(range(0, w.size, 11))
    fd = E.numerical_grad(fn, w, eps=1e-6, indices=idx)
    assert E.relative_error(w.grad.ravel()[idx], fd.ravel()[idx]) < 1e-4


def test_anchor_positions_map_into_b(tiny_pairs):
    m = _tiny_model()
    groups, axy, pxy = TR.anchor_correspondences(m, tiny_pairs)
    assert len(groups) == len(axy) == len(pxy) > 0
    for g, a, p in zip(groups, axy, pxy):
        q, _ = warp_points(tiny_pairs[g].h_ab, a[None])
        assert np.allclose(q[0], p)
        assert tiny_pairs[g].valid[int(round(p[1])), int(round(p[0]))]


# -- training loop ------------------------------------------------------------------------


def _states_equal(a, b):
    sa, sb = a.state(), b.state()
    return list(sa) == list(sb) and all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_zero_steps_returns_init(corpus):
    cfg = TINY.with_flat({"train.steps": "0"})
    m, hist = TR.train(cfg, corpus)
    assert hist == []
    assert _states_equal(m, TR.init_weights(np.random.default_rng(cfg.train_seed), cfg))


def test_zero_learning_rate_leaves_weights(corpus):
    cfg = TINY.with_flat({"train.steps": "2", "train.lr": "0"})
    m, hist = TR.train(cfg, corpus)
    init = TR.init_weights(np.random.default_rng(cfg.train_seed), cfg)
    assert all(np.array_equal(m[n].data, init[n].data) for n in m.names())
    assert [p for _, p, _ in hist] == ["detector", "descriptor"]


def test_phases_update_only_their_network(corpus):
    cfg = TINY.with_flat({"train.steps": "1"})
    m, _ = TR.train(cfg, corpus)
    init = TR.init_weights(np.random.default_rng(cfg.train_seed), cfg)
    assert all(np.array_equal(m[n].data, init[n].data) for n in m.names(DESCRIPTOR))
    assert any(not np.array_equal(m[n].data, init[n].data) for n in m.names(DETECTOR))
    cfg2 = TINY.with_flat({"train.steps": "2"})
    m2, _ = TR.train(cfg2, corpus)
    assert all(np.array_equal(m2[n].data, m[n].data) for n in m.names(DETECTOR))
    assert any(not np.array_equal(m2[n].data, m[n].data) for n in m.names(DESCRIPTOR))


def test_training_is_deterministic_and_writes_checkpoints(corpus, tmp_path):
    cfg = TINY.with_flat({"train.steps": "4"})
    a, ha = TR.train(cfg, corpus, tmp_path / "a")
    b, hb = TR.train(cfg, corpus, tmp_path / "b")
    assert ha == hb and _states_equal(a, b)
    for name in ("ckpt_000000.hddw", "ckpt_000002.hddw", "ckpt_000004.hddw", "final.hddw", "losses.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "losses.csv").read_text().splitlines()
    assert lines[0] == "step,phase,loss" and len(lines) == 5


def test_resume_matches_uninterrupted_run(corpus, tmp_path):
    cfg = TINY.with_flat({"train.steps": "4"})
    full, hist = TR.train(cfg, corpus, tmp_path / "full")
    TR.train(TINY.with_flat({"train.steps": "2"}), corpus, tmp_path / "half")
    resumed, rest = TR.resume(tmp_path / "half" / "ckpt_000002.hddw", corpus, tmp_path / "half", cfg)
    assert rest == hist[2:]
    assert _states_equal(full, resumed)
    assert (tmp_path / "full" / "final.hddw").read_bytes() == (tmp_path / "half" / "final.hddw").read_bytes()


def test_non_finite_loss_persists_the_batch(corpus, tmp_path):
    cfg = TINY.with_flat({"train.steps": "2"})
    model = TR.init_weights(np.random.default_rng(0), cfg)
    model["det.head2.w"].data[:] = np.nan
    with pytest.raises(TR.NonFiniteLoss):
        TR.train(cfg, corpus, tmp_path, model=model)
    record = json.loads((tmp_path / "failed_batch_000000.json").read_text())
    assert record["step"] == 0 and record["phase"] == "detector"
    assert record["config"] == cfg.digest() and len(record["sources"]) == cfg.train_batch


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        TR.train(TINY, [])


def test_corpus_directory_round_trip(tmp_path):
    imgs = TR.make_corpus(2, 3, 40)
    TR.write_corpus(tmp_path, imgs)
    back = TR.load_corpus(tmp_path)
    assert len(back) == 3
    assert all(np.abs(a - b).max() <= 0.5 / 255 + 1e-12 for a, b in zip(imgs, back))


@pytest.mark.slow
def test_detector_validation_loss_falls(corpus):
    cfg = TINY.with_flat({"train.steps": "60", "train.lr": "0.05"})
    val = TR.make_pairs(99, corpus, 4, crop=32, jitter=False)
    init = TR.init_weights(np.random.default_rng(cfg.train_seed), cfg)
    m, _ = TR.train(cfg, corpus)
    assert TR.validation_loss(m, val) < TR.validation_loss(init, val)
