import gzip
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cflsim import bench
from cflsim import supernet as sn
from cflsim.errors import ConfigError, PartitionError, StructuralError

from .oracles import total_variation

seeds = st.integers(0, 2**32 - 1)


def test_five_levels():
    assert [int(q) for q in bench.QualityLevel] == [0, 1, 2, 3, 4]
    assert [bench.BLUR_SIGMA[q] for q in (2, 3, 4)] == [0.5, 1.0, 1.5]


def test_blur_constant_invariance():
    img = np.full((1, 8, 8), 0.37)
    for s in (0.5, 1.0, 1.5):
        np.testing.assert_allclose(bench.gaussian_blur(img, s), img, atol=1e-12)


def test_blur_impulse_response():
    img = np.zeros((1, 9, 9))
    img[0, 4, 4] = 1.0
    out = bench.gaussian_blur(img, 1.0)
    r = np.arange(5) - 2
    g = np.exp(-(r**2) / 2.0)
    k = np.outer(g, g) / np.outer(g, g).sum()
    np.testing.assert_allclose(out[0, 2:7, 2:7], k, atol=1e-15)
    assert out.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("sigma", [0.0, -1.0])
def test_blur_rejects_nonpositive_sigma(sigma):
    with pytest.raises(ValueError):
        bench.gaussian_blur(np.zeros((1, 4, 4)), sigma)


@given(seeds)
def test_blur_reduces_total_variation(seed):
    img = np.random.default_rng(seed).random((1, 8, 8))
    assert total_variation(bench.gaussian_blur(img, 1.5)) < total_variation(img)


@given(seeds)
def test_sharpen_increases_total_variation_and_stays_in_range(seed):
    rng = np.random.default_rng(seed)
    img = 0.3 + 0.4 * rng.random((1, 8, 8))  # headroom so the clamp rarely binds
    out = bench.sharpen(img)
    assert total_variation(out) > total_variation(img)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    extreme = bench.sharpen(rng.random((1, 8, 8)))
    assert extreme.min() >= 0.0 and extreme.max() <= 1.0


def test_sharpen_constant():
    img = np.full((1, 6, 6), 0.5)
    np.testing.assert_allclose(bench.sharpen(img), img, atol=1e-12)


def test_tv_matches_oracle():
    img = np.random.default_rng(0).random((2, 1, 5, 7))
    assert bench.total_variation(img) == pytest.approx(total_variation(img), rel=1e-12)


def test_quality_iid_batch_sizes():
    batches = bench.partition_quality_iid(60000, seed=0)
    assert [len(b) for b in batches] == [12000] * 5
    allidx = np.concatenate(batches)
    assert len(np.unique(allidx)) == 60000


def test_quality_iid_histograms():
    labels = np.random.default_rng(1).integers(0, 10, 60000)
    global_h = np.bincount(labels, minlength=10) / len(labels)
    for b in bench.partition_quality_iid(60000, seed=3):
        h = np.bincount(labels[b], minlength=10) / len(b)
        assert np.max(np.abs(h - global_h)) < 0.03


def test_quality_iid_deterministic():
    a = bench.partition_quality_iid(1000, 5)
    b = bench.partition_quality_iid(1000, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_apply_quality_batches_tags_levels():
    ds = bench.synthetic_digits(50, 0)
    out = bench.apply_quality_batches(ds, bench.partition_quality_iid(50, 0))
    assert sorted(np.bincount(out.quality).tolist()) == [10] * 5
    for q in range(5):
        sel = out.quality == q
        np.testing.assert_array_equal(out.images[sel], bench.apply_quality(ds.images[sel], q))


def test_noniid_single_class_degenerate():
    labels = np.repeat(np.arange(10), 50)
    part = bench.partition_noniid(labels, 10, 1.0, seed=0)
    for k in range(10):
        assert set(labels[part.indices[k]].tolist()) == {part.dominant[k]}


def test_noniid_32_worker_setting_fraction():
    labels = np.random.default_rng(0).integers(0, 10, 60000)
    part = bench.partition_noniid(labels, 32, 0.8, seed=1)
    for k in range(32):
        assert 0.78 <= part.dominant_fraction(labels, k) <= 0.82


@given(seeds, st.integers(10, 40), st.floats(0.3, 1.0))
def test_noniid_exact_set_partition(seed, k, imbalance):
    labels = np.random.default_rng(seed).permutation(np.arange(3000) % 10)
    part = bench.partition_noniid(labels, k, imbalance, seed=seed)
    joined = np.concatenate(part.indices + [part.unassigned])
    assert len(joined) == len(set(joined.tolist()))  # disjoint
    assert sorted(joined.tolist()) == list(range(len(labels)))  # covering
    assert len(part.unassigned) == 0  # every class is someone's dominant class


def test_noniid_fewer_workers_than_classes_accounts_for_everything():
    labels = np.repeat(np.arange(10), 100)
    part = bench.partition_noniid(labels, 4, 0.8, seed=0)
    joined = np.concatenate(part.indices + [part.unassigned])
    assert sorted(joined.tolist()) == list(range(1000))
    for k in range(4):
        assert abs(part.dominant_fraction(labels, k) - 0.8) <= 0.02


def test_noniid_errors():
    labels = np.repeat(np.arange(3), 10)
    with pytest.raises(ConfigError):
        bench.partition_noniid(labels, 3, 1.5, 0)
    skewed = np.concatenate([np.zeros(2, int), np.ones(500, int), np.full(500, 2)])
    with pytest.raises(PartitionError, match="class 0"):
        bench.partition_noniid(skewed, 3, 0.5, 0)


def test_fleet_homogeneous_and_deterministic():
    cfg = sn.toy_config()
    fleet = bench.make_device_fleet(5, 1.0, 0, cfg)
    assert len({p.flops_per_ms for p in fleet}) == 1
    assert fleet == bench.make_device_fleet(5, 1.0, 0, cfg)
    assert bench.make_device_fleet(5, 4.0, 9, cfg) == bench.make_device_fleet(5, 4.0, 9, cfg)


def test_fleet_spread_order_statistics():
    cfg = sn.toy_config()
    hits = 0
    for seed in range(200):
        speeds = [p.flops_per_ms for p in bench.make_device_fleet(32, 4.0, seed, cfg)]
        ratio = max(speeds) / min(speeds)
        assert ratio <= 4.0
        hits += ratio >= 2.0
    assert hits / 200 >= 0.9


def test_fleet_bound_is_factor_of_full_latency():
    cfg = sn.toy_config()
    for p in bench.make_device_fleet(4, 4.0, 1, cfg, bound_factor=0.6):
        full = bench.full_parent_flops(cfg) / p.flops_per_ms + p.per_layer_overhead_ms * 6
        assert p.latency_bound == pytest.approx(0.6 * full, rel=1e-15)
    with pytest.raises(ConfigError):
        bench.make_device_fleet(4, 0.5, 1, cfg)


def test_fleet_text_roundtrip():
    fleet = bench.make_device_fleet(3, 4.0, 2, sn.toy_config())
    assert bench.fleet_from_text(bench.fleet_to_text(fleet)) == fleet


def test_dataset_cache_roundtrip_and_layout():
    ds = bench.apply_quality_batches(bench.synthetic_digits(20, 1), bench.partition_quality_iid(20, 1))
    blob = bench.dump_dataset(ds)
    assert blob[:4] == b"CFLD"
    assert struct.unpack_from("<IIIII", blob, 4) == (20, 1, 8, 8, 10)
    assert len(blob) == 24 + 20 * (2 + 8 * 64)
    back = bench.load_dataset(blob)
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.labels, ds.labels) and np.array_equal(back.quality, ds.quality)
    with pytest.raises(StructuralError):
        bench.load_dataset(b"NOPE" + blob[4:])


def test_synthetic_digits_deterministic_and_balanced():
    a, b = bench.synthetic_digits(100, 3), bench.synthetic_digits(100, 3)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.bincount(a.labels).tolist() == [10] * 10
    assert a.images.min() >= 0 and a.images.max() <= 1


def _write_idx(tmp_path, images, labels, gz=False):
    img_blob = struct.pack(">IIII", 2051, len(images), 4, 4) + images.astype(np.uint8).tobytes()
    lab_blob = struct.pack(">II", 2049, len(labels)) + labels.astype(np.uint8).tobytes()
    suffix = ".gz" if gz else ""
    ip, lp = tmp_path / f"img{suffix}", tmp_path / f"lab{suffix}"
    (gzip.open if gz else open)(ip, "wb").write(img_blob)
    (gzip.open if gz else open)(lp, "wb").write(lab_blob)
    return ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_idx_ingestion(tmp_path, gz):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (6, 4, 4))
    labels = rng.integers(0, 10, 6)
    ds = bench.load_idx(*_write_idx(tmp_path, images, labels, gz))
    assert ds.images.shape == (6, 1, 4, 4)
    np.testing.assert_allclose(ds.images[:, 0] * 255, images)
    assert ds.labels.tolist() == labels.tolist()


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(struct.pack(">IIII", 1234, 0, 4, 4))
    with pytest.raises(StructuralError, match="2051"):
        bench.read_idx_images(p)
