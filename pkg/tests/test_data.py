import gzip
import inspect
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vbda import training
from vbda.autodiff import RngStream
from vbda.data import (
    Dataset,
    DomainBatch,
    DomainPair,
    SyntheticSpec,
    area_matrix,
    batch_iterator,
    downsample,
    generate,
    generate_nuisance_task,
    generate_rotated_moons,
    load_cache,
    load_idx,
    moon_centroids,
    save_cache,
    write_idx,
)
from vbda.errors import ContractError, FormatError


def plug_in_mi(a, b):
    """Mutual information (nats) of two discrete samples from their joint histogram."""
    ka, kb = a.max() + 1, b.max() + 1
    joint = np.zeros((ka, kb))
    np.add.at(joint, (a, b), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum())


def three_se_means(x1, x2):
    se = np.sqrt(x1.var(axis=0, ddof=1) / len(x1) + x2.var(axis=0, ddof=1) / len(x2))
    return np.all(np.abs(x1.mean(axis=0) - x2.mean(axis=0)) <= 3 * se)


# ---------------------------------------------------------------------------
# nuisance task


def test_default_shapes_and_widths():
    spec = SyntheticSpec()
    src, tgt = generate_nuisance_task(spec)
    assert src.x.shape == tgt.x.shape == (2000, spec.d_signal + spec.d_nuisance)
    assert spec.d_x == 18
    assert np.bincount(src.y).tolist() == [1000, 1000]


def test_rho_zero_domains_identically_distributed():
    src, tgt = generate_nuisance_task(SyntheticSpec(rho=0.0, n=5000, seed=3))
    assert three_se_means(src.x, tgt.x)


def test_rho_one_plug_in_mi():
    src, tgt = generate_nuisance_task(SyntheticSpec(rho=1.0, n=10_000, seed=1))
    assert np.array_equal(src.meta["nuisance_code"], src.y)
    assert plug_in_mi(src.y, src.meta["nuisance_code"]) == pytest.approx(math.log(2), abs=0.02)
    assert plug_in_mi(tgt.y, tgt.meta["nuisance_code"]) == pytest.approx(0.0, abs=0.02)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_nuisance_marginals_match_for_any_rho(rho, seed):
    spec = SyntheticSpec(rho=rho, n=4000, seed=seed)
    src, tgt = generate_nuisance_task(spec)
    nuis = slice(spec.d_signal, None)
    a, b = src.x[:, nuis], tgt.x[:, nuis]
    assert three_se_means(a, b)
    # variance: compare with the large-sample standard error of s^2
    var_se = np.sqrt(2 * (a.var(axis=0) ** 2 + b.var(axis=0) ** 2) / len(a))
    assert np.all(np.abs(a.var(axis=0) - b.var(axis=0)) <= 4 * var_se)


def test_generators_are_pure_functions_of_spec():
    for spec in (SyntheticSpec(seed=5), SyntheticSpec(kind="rotated_moons", seed=5)):
        a, b = generate(spec), generate(spec)
        assert a.source.x.tobytes() == b.source.x.tobytes()
        assert a.target_eval().x.tobytes() == b.target_eval().x.tobytes()
        assert a.target_eval().y.tobytes() == b.target_eval().y.tobytes()


@pytest.mark.parametrize(
    "bad",
    [dict(n_classes=1), dict(rho=1.5), dict(rho=-0.1), dict(n=0), dict(noise=-1.0), dict(d_nuisance=0),
     dict(kind="spirals")],
)
def test_invalid_specs_rejected(bad):
    with pytest.raises(ContractError):
        generate(SyntheticSpec(**bad))


# ---------------------------------------------------------------------------
# moons


def quadrature_centroids(m=200_001):
    t = np.linspace(0.0, math.pi, m)
    w = np.full(m, math.pi / (m - 1))
    w[[0, -1]] /= 2  # trapezoid
    w /= math.pi
    upper = np.array([(w * np.cos(t)).sum(), (w * np.sin(t)).sum()])
    lower = np.array([(w * (1 - np.cos(t))).sum(), (w * (0.5 - np.sin(t))).sum()])
    shift = np.array([0.5, 0.25])
    return np.vstack([upper - shift, lower - shift])


def test_moon_centroids_match_quadrature():
    np.testing.assert_allclose(moon_centroids(), quadrature_centroids(), atol=1e-9)


def test_moon_class_means_land_on_centroids():
    src, _ = generate_rotated_moons(SyntheticSpec(kind="rotated_moons", n=1000, noise=0.1, seed=2))
    ref = quadrature_centroids()
    for k in range(2):
        pts = src.x[src.y == k]
        se = pts.std(axis=0, ddof=1) / math.sqrt(len(pts))
        assert np.all(np.abs(pts.mean(axis=0) - ref[k]) <= 3 * se)


def test_moons_angle_zero_identical_distribution():
    src, tgt = generate_rotated_moons(SyntheticSpec(kind="rotated_moons", angle=0.0, n=4000, seed=4))
    assert three_se_means(src.x, tgt.x)


def test_moons_angle_180_is_negation():
    base = SyntheticSpec(kind="rotated_moons", angle=0.0, seed=6)
    flipped = SyntheticSpec(kind="rotated_moons", angle=180.0, seed=6)
    _, t0 = generate_rotated_moons(base)
    _, t180 = generate_rotated_moons(flipped)
    np.testing.assert_allclose(t180.x, -t0.x, atol=1e-12)
    np.testing.assert_array_equal(t180.y, t0.y)


def test_moons_need_two_classes():
    with pytest.raises(ContractError):
        generate_rotated_moons(SyntheticSpec(kind="rotated_moons", n_classes=3))


# ---------------------------------------------------------------------------
# batching


def small_pair(n_s=10, n_t=7):
    rng = np.random.default_rng(0)
    src = Dataset(np.arange(n_s, dtype=float)[:, None], rng.integers(0, 2, n_s), 2)
    tgt = Dataset(100 + np.arange(n_t, dtype=float)[:, None], rng.integers(0, 2, n_t), 2)
    return DomainPair(src, tgt)


def test_one_epoch_visits_each_source_example_at_most_once():
    it = batch_iterator(small_pair(), 3, 2, RngStream(0))
    seen = np.concatenate([next(it).x_s[:, 0] for _ in range(3)])
    assert len(seen) == len(set(seen)) == 9


def test_same_seed_same_batches():
    a = batch_iterator(small_pair(), 3, 2, RngStream(1))
    b = batch_iterator(small_pair(), 3, 2, RngStream(1))
    for _ in range(10):
        ba, bb = next(a), next(b)
        assert ba.x_s.tobytes() == bb.x_s.tobytes() and ba.x_t.tobytes() == bb.x_t.tobytes()


def test_full_batch_is_shuffled_dataset():
    pair = small_pair()
    batch = next(batch_iterator(pair, 10, 7, RngStream(2)))
    assert sorted(batch.x_s[:, 0]) == list(range(10))
    assert sorted(batch.x_t[:, 0]) == list(range(100, 107))


def test_batch_labels_follow_their_rows():
    pair = small_pair()
    batch = next(batch_iterator(pair, 4, 2, RngStream(3)))
    np.testing.assert_array_equal(batch.y_s, pair.source.y[batch.x_s[:, 0].astype(int)])


def test_batching_errors():
    with pytest.raises(ContractError):
        next(batch_iterator(small_pair(), 11, 2, RngStream(0)))
    with pytest.raises(ContractError):
        next(batch_iterator(small_pair(), 0, 2, RngStream(0)))
    empty = Dataset(np.zeros((0, 1)), np.zeros(0, dtype=np.int64), 2)
    with pytest.raises(ContractError):
        next(batch_iterator(DomainPair(empty, empty), 1, 1, RngStream(0)))


def test_target_labels_unreachable_from_training_interface():
    assert set(DomainBatch.__dataclass_fields__) == {"x_s", "y_s", "x_t"}
    pair = small_pair()
    assert not hasattr(pair, "target")
    assert "target_eval" not in inspect.getsource(training.train)
    assert "target_eval" not in inspect.getsource(batch_iterator)


# ---------------------------------------------------------------------------
# IDX


def write_pair(tmp_path, images, labels, gz=False):
    suffix = ".idx.gz" if gz else ".idx"
    ip, lp = tmp_path / f"img{suffix}", tmp_path / f"lab{suffix}"
    write_idx(ip, images)
    write_idx(lp, labels)
    return ip, lp


def test_idx_round_trip_and_scaling(tmp_path):
    images = np.random.default_rng(0).integers(0, 256, (5, 4, 3)).astype(np.uint8)
    labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
    ds = load_idx(*write_pair(tmp_path, images, labels))
    np.testing.assert_allclose(ds.x, images.reshape(5, -1) / 255.0)
    np.testing.assert_array_equal(ds.y, labels)
    assert ds.n_classes == 3


def test_idx_gzip_and_limit(tmp_path):
    images = np.zeros((6, 2, 2), dtype=np.uint8)
    ds = load_idx(*write_pair(tmp_path, images, np.arange(6, dtype=np.uint8), gz=True), limit=4, n_classes=10)
    assert ds.x.shape == (4, 4) and ds.n_classes == 10
    assert not ds.x.any()


def test_crop_removes_border_before_resize(tmp_path):
    images = np.zeros((1, 28, 28), dtype=np.uint8)
    images[0, 4:24, 4:24] = 255
    ds = load_idx(*write_pair(tmp_path, images, np.zeros(1, dtype=np.uint8)), downsample_to_16=True, crop=4)
    np.testing.assert_allclose(ds.x, 1.0, atol=1e-15)
    with pytest.raises(ContractError):
        load_idx(*write_pair(tmp_path, images, np.zeros(1, dtype=np.uint8)), crop=14)


def test_constant_255_image_downsamples_to_ones(tmp_path):
    images = np.full((2, 28, 28), 255, dtype=np.uint8)
    ds = load_idx(*write_pair(tmp_path, images, np.zeros(2, dtype=np.uint8)), downsample_to_16=True)
    assert ds.x.shape == (2, 256)
    np.testing.assert_allclose(ds.x, 1.0, atol=1e-15)


def test_area_average_oracle():
    rng = np.random.default_rng(1)
    img = rng.random((1, 28, 28))
    # independent oracle: upsample 28 -> 28*16 cells by repetition, then block-average
    fine = np.repeat(np.repeat(img[0], 16, axis=0), 16, axis=1)
    ref = fine.reshape(16, 28, 16, 28).mean(axis=(1, 3))
    np.testing.assert_allclose(downsample(img, 16)[0], ref, atol=1e-12)
    np.testing.assert_allclose(area_matrix(28, 16).sum(axis=1), 1.0, atol=1e-12)


def test_bad_magic_reports_offset(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((1, 2, 2), dtype=np.uint8), np.zeros(1, dtype=np.uint8))
    raw = bytearray(ip.read_bytes())
    raw[3] = 0x01
    ip.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="byte offset 0"):
        load_idx(ip, lp)


def test_truncated_payload_reports_offset(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((3, 4, 4), dtype=np.uint8), np.zeros(3, dtype=np.uint8))
    ip.write_bytes(ip.read_bytes()[:30])
    with pytest.raises(FormatError, match="byte offset 30"):
        load_idx(ip, lp)


def test_truncated_gzip_header(tmp_path):
    path = tmp_path / "short.idx.gz"
    with gzip.open(path, "wb") as fh:
        fh.write(b"\x00\x00")
    with pytest.raises(FormatError):
        load_idx(path, path)


def test_label_count_mismatch(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((3, 2, 2), dtype=np.uint8), np.zeros(2, dtype=np.uint8))
    with pytest.raises(FormatError):
        load_idx(ip, lp)


# ---------------------------------------------------------------------------
# cache


def test_cache_round_trip(tmp_path):
    src, _ = generate_nuisance_task(SyntheticSpec(n=50))
    save_cache(tmp_path / "c.bin", src)
    back = load_cache(tmp_path / "c.bin")
    assert back.x.tobytes() == src.x.tobytes()
    np.testing.assert_array_equal(back.y, src.y)
    assert back.n_classes == src.n_classes


def test_cache_rejects_truncation(tmp_path):
    src, _ = generate_nuisance_task(SyntheticSpec(n=10))
    path = tmp_path / "c.bin"
    save_cache(path, src)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_cache(path)
