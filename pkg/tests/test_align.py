import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cflsim import align as al
from cflsim import nn
from cflsim import supernet as sn
from cflsim.errors import StructuralError

from .conftest import random_arch
from .oracles import fedavg_reference

seeds = st.integers(0, 2**32 - 1)


def _rand_like(params, rng):
    return {k: rng.normal(size=v.shape) for k, v in params.items()}


def test_group_sizes_full_and_partial():
    cfg = sn.SupernetConfig()
    full = sn.full_arch(cfg)
    parent = sn.init_parent(cfg, 0)
    assert [len(g) for g in al.group_layers(parent, full).groups] == [3, 3, 3, 3]
    arch = sn.ArchDescriptor(
        (1, 2, 1, 3), tuple(tuple(tuple(range(w)) for _ in range(d)) for w, d in zip(cfg.widths, (1, 2, 1, 3)))
    )
    sub = sn.extract_submodel(parent, arch, cfg)
    grouped = al.group_layers(sub, arch)
    assert [len(g) for g in grouped.groups] == [1, 2, 1, 3]
    assert list(al.flatten_groups(grouped)) == list(sub)


def test_group_layers_inconsistent(toy):
    arch = sn.ArchDescriptor((1, 1, 1), tuple(((0,),) for _ in range(3)))
    with pytest.raises(StructuralError):
        al.group_layers(sn.init_parent(toy, 0), arch)


def test_expand_width_identity(toy):
    d = sn.init_parent(toy, 5)
    out = al.expand_width(d, sn.full_arch(toy), toy)
    assert all(out[k].tobytes() == d[k].tobytes() for k in d)


def test_expand_width_hand_scatter():
    cfg = sn.SupernetConfig(num_groups=1, max_depth=1, widths=(4,), strides=(1,), stem_width=2)
    arch = sn.ArchDescriptor((1,), (((0, 2),),))
    delta = {
        "stem.w": np.zeros((2, 1, 3, 3)),
        "stem.b": np.zeros(2),
        "head.w": np.zeros((10, 4 * 64)),
        "head.b": np.zeros(10),
        "g0.l0.w": np.stack([np.full((2, 3, 3), 1.5), np.full((2, 3, 3), -2.5)]),
        "g0.l0.b": np.array([1.5, -2.5]),
    }
    out = al.expand_width(delta, arch, cfg)
    assert out["g0.l0.b"].tolist() == [1.5, 0.0, -2.5, 0.0]
    assert (out["g0.l0.w"][0] == 1.5).all() and (out["g0.l0.w"][2] == -2.5).all()
    assert not out["g0.l0.w"][[1, 3]].any()


def test_expand_width_rejects_bad_indices(toy):
    arch = sn.ArchDescriptor((1, 1, 1), (((0, 0),), ((0,),), ((0,),)))
    parent = sn.init_parent(toy, 0)
    ok = sn.ArchDescriptor((1, 1, 1), (((0, 1),), ((0,),), ((0,),)))
    sub = sn.extract_submodel(parent, ok, toy)
    with pytest.raises(StructuralError):
        al.expand_width(sub, arch, toy)


def test_expand_depth_padding(toy):
    arch = sn.ArchDescriptor((1, 2, 1), tuple(tuple(tuple(range(w)) for _ in range(d)) for w, d in zip(toy.widths, (1, 2, 1))))
    sub = sn.extract_submodel(sn.init_parent(toy, 0), arch, toy)
    out = al.expand_depth(sub, arch, toy)
    shapes = sn.param_shapes(toy)
    for key in ("g0.l1.w", "g0.l1.b", "g2.l1.w", "g2.l1.b"):
        assert key not in sub
        assert out[key].shape == shapes[key] and not out[key].any()
    full = sn.full_arch(toy)
    parent = sn.init_parent(toy, 1)
    assert nn.params_equal(al.expand_depth(parent, full, toy), parent)


def test_expand_depth_too_deep(toy):
    parent = sn.init_parent(toy, 0)
    parent["g0.l5.w"] = np.zeros(1)
    with pytest.raises(StructuralError):
        al.expand_depth(parent, sn.full_arch(toy), toy)


@given(seeds)
def test_width_expansion_conserves_sums_and_nonzeros(seed):
    toy = sn.toy_config()
    rng = np.random.default_rng(seed)
    arch = random_arch(toy, rng)
    sub = _rand_like(sn.extract_submodel(sn.init_parent(toy, 0), arch, toy), rng)
    wide = al.expand_width(sub, arch, toy)
    deep = al.expand_depth(wide, arch, toy)
    for k in sub:
        assert wide[k].sum() == pytest.approx(sub[k].sum(), abs=1e-9)
    nz = lambda p: sum(int(np.count_nonzero(v)) for v in p.values())
    assert nz(wide) == nz(deep) == nz(sub)


def _oracle_gather(aligned, arch, config):
    out = {k: aligned[k] for k in al.FIXED_KEYS}
    prev = tuple(range(config.stem_width))
    for g in range(config.num_groups):
        for d in range(arch.depth[g]):
            cur = arch.channels[g][d]
            out[f"g{g}.l{d}.w"] = aligned[f"g{g}.l{d}.w"][np.ix_(cur, prev)]
            out[f"g{g}.l{d}.b"] = aligned[f"g{g}.l{d}.b"][list(cur)]
            prev = cur
    return out


def _oracle_support(arch, config):
    mask = {k: np.zeros(s, bool) for k, s in sn.param_shapes(config).items()}
    for k in al.FIXED_KEYS:
        mask[k][:] = True
    prev = tuple(range(config.stem_width))
    for g in range(config.num_groups):
        for d in range(arch.depth[g]):
            cur = arch.channels[g][d]
            mask[f"g{g}.l{d}.w"][np.ix_(cur, prev)] = True
            mask[f"g{g}.l{d}.b"][list(cur)] = True
            prev = cur
    return mask


@given(seeds)
def test_alignment_roundtrip_and_zero_support(seed):
    toy = sn.toy_config()
    rng = np.random.default_rng(seed)
    arch = random_arch(toy, rng)
    sub = _rand_like(sn.extract_submodel(sn.init_parent(toy, 0), arch, toy), rng)
    aligned = al.align(sub, arch, toy, 10).delta
    back = _oracle_gather(aligned, arch, toy)
    for k in sub:
        assert back[k].tobytes() == np.ascontiguousarray(sub[k]).tobytes()
    support = _oracle_support(arch, toy)
    for k in aligned:
        assert not aligned[k][~support[k]].any()
    assert nn.params_equal(al.gather_submodel(aligned, arch, toy), sub)


def test_aggregate_single_worker(toy):
    d = _rand_like(sn.init_parent(toy, 0), np.random.default_rng(0))
    out = al.aggregate([al.AlignedDelta(d, sn.full_arch(toy), 7)])
    assert all(np.array_equal(out[k], d[k]) for k in d)


def test_aggregate_cancellation(toy):
    d = _rand_like(sn.init_parent(toy, 0), np.random.default_rng(0))
    neg = {k: -v for k, v in d.items()}
    arch = sn.full_arch(toy)
    out = al.aggregate([al.AlignedDelta(d, arch, 5, 0), al.AlignedDelta(neg, arch, 5, 1)])
    assert not any(v.any() for v in out.values())


def test_aggregate_hand_arithmetic():
    arch = sn.ArchDescriptor((1,), (((0,),),))
    ds = [al.AlignedDelta({"x": np.array([v])}, arch, n, i) for i, (v, n) in enumerate([(0.3, 10), (0.6, 20), (0.9, 30)])]
    assert al.aggregate(ds)["x"][0] == pytest.approx(0.70, abs=1e-15)
    assert sum(al.aggregation_weights(ds)) == pytest.approx(1.0, abs=1e-15)


def test_aggregate_errors(toy):
    with pytest.raises(ValueError):
        al.aggregate([])
    arch = sn.full_arch(toy)
    with pytest.raises(StructuralError):
        al.aggregate([al.AlignedDelta({"a": np.zeros(2)}, arch, 1, 0), al.AlignedDelta({"a": np.zeros(3)}, arch, 1, 1)])


@given(seeds)
def test_aggregate_permutation_invariant(seed):
    toy = sn.toy_config()
    rng = np.random.default_rng(seed)
    ds = []
    for k in range(5):
        arch = random_arch(toy, rng)
        sub = _rand_like(sn.extract_submodel(sn.init_parent(toy, 0), arch, toy), rng)
        ds.append(al.align(sub, arch, toy, int(rng.integers(1, 100)), k))
    a = al.aggregate(ds)
    b = al.aggregate([ds[i] for i in rng.permutation(5)])
    for k in a:
        assert np.max(np.abs(a[k] - b[k])) <= 1e-12
    weights = al.aggregation_weights(ds)
    assert abs(sum(weights) - 1.0) <= 1e-15


@given(seeds)
def test_unsampled_positions_stay_put(seed):
    toy = sn.toy_config()
    rng = np.random.default_rng(seed)
    parent = sn.init_parent(toy, 1)
    ds, union = [], {k: np.zeros(s, bool) for k, s in sn.param_shapes(toy).items()}
    for k in range(3):
        arch = random_arch(toy, rng)
        sub = _rand_like(sn.extract_submodel(parent, arch, toy), rng)
        ds.append(al.align(sub, arch, toy, 10 + k, k))
        for key, m in _oracle_support(arch, toy).items():
            union[key] |= m
    new = al.apply_global_update(parent, al.aggregate(ds))
    for key in parent:
        assert np.array_equal(new[key][~union[key]], parent[key][~union[key]])


def test_coverage_variant_divides_by_sampling_share(toy):
    rng = np.random.default_rng(3)
    full = sn.full_arch(toy)
    narrow = sn.ArchDescriptor((1, 1, 1), tuple(((0, 1),) for _ in range(3)))
    d_full = _rand_like(sn.init_parent(toy, 0), rng)
    d_narrow = _rand_like(sn.extract_submodel(sn.init_parent(toy, 0), narrow, toy), rng)
    a = al.align(d_full, full, toy, 30, 0)
    b = al.align(d_narrow, narrow, toy, 10, 1)
    cov = al.aggregate([a, b], toy, "coverage")
    # position only the full worker touches: its own delta, undiluted
    assert cov["g0.l1.w"][3, 3, 0, 0] == pytest.approx(a.delta["g0.l1.w"][3, 3, 0, 0], rel=1e-14)
    weighted = al.aggregate([a, b])
    assert weighted["g0.l1.w"][3, 3, 0, 0] == pytest.approx(0.75 * a.delta["g0.l1.w"][3, 3, 0, 0], rel=1e-14)


def test_apply_update_zero_and_single_worker(toy):
    parent = sn.init_parent(toy, 0)
    zero = {k: np.zeros_like(v) for k, v in parent.items()}
    assert nn.params_equal(al.apply_global_update(parent, zero), parent)
    local = _rand_like(parent, np.random.default_rng(1))
    delta = nn.params_sub(local, parent)
    out = al.apply_global_update(parent, al.aggregate([al.align(delta, sn.full_arch(toy), toy, 4)]))
    for k in parent:
        assert np.max(np.abs(out[k] - local[k])) <= 1e-12


def test_full_arch_pipeline_is_fedavg(toy):
    rng = np.random.default_rng(11)
    parent = sn.init_parent(toy, 2)
    locals_ = [{k: v + rng.normal(scale=0.1, size=v.shape) for k, v in parent.items()} for _ in range(4)]
    sizes = [13, 7, 29, 51]
    ds = [al.align(nn.params_sub(m, parent), sn.full_arch(toy), toy, n, k) for k, (m, n) in enumerate(zip(locals_, sizes))]
    got = al.apply_global_update(parent, al.aggregate(ds))
    want = fedavg_reference(parent, locals_, sizes)
    for k in parent:
        assert np.max(np.abs(got[k] - want[k])) <= 1e-12


def test_aligned_serialization_roundtrip(toy):
    rng = np.random.default_rng(0)
    arch = random_arch(toy, rng)
    sub = _rand_like(sn.extract_submodel(sn.init_parent(toy, 0), arch, toy), rng)
    ad = al.align(sub, arch, toy, 42, 3)
    back = al.load_aligned(al.dump_aligned(ad))
    assert (back.source_arch, back.data_size, back.worker_id) == (arch, 42, 3)
    assert all(back.delta[k].tobytes() == ad.delta[k].tobytes() for k in ad.delta)
