import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cflsim import search as sh
from cflsim import supernet as sn
from cflsim.errors import ConfigError, CoverageError, InfeasibleError

from .conftest import random_arch

seeds = st.integers(0, 2**32 - 1)


class LinearPredictor:
    """Predicted accuracy rises with every width ratio and depth slot."""

    def __init__(self, config):
        self.gd = config.num_groups * config.max_depth

    def predict(self, enc):
        enc = np.atleast_2d(enc)
        return 0.1 + 0.8 * enc[:, self.gd : 2 * self.gd].sum(axis=1) / self.gd


class ConstantPredictor:
    def predict(self, enc):
        return np.full(len(np.atleast_2d(enc)), 0.5)


def _profile(config, speed=1e5, overhead=0.05, factor=0.6, name="d0"):
    full = sum(sh.layer_flops(config, g, d, 1.0) for g, d in config.layer_keys()) / speed
    full += overhead * len(config.layer_keys())
    return sh.DeviceProfile(name, speed, overhead, factor * full)


# -- encoding -------------------------------------------------------------------


def test_encoding_saturated(toy):
    enc = sh.encode_arch(sn.full_arch(toy), 1, toy)
    assert len(enc) == sh.encoding_length(toy) == 3 * 2 * 2 + 5
    depth = enc[:6].reshape(3, 2)
    assert (depth[:, -1] == 1).all() and depth[:, :-1].sum() == 0
    assert (enc[6:12] == 1.0).all()
    assert enc[12:].tolist() == [0, 1, 0, 0, 0]


def test_encoding_half_width_depth_one():
    cfg = sn.SupernetConfig(num_groups=2, max_depth=3, widths=(8, 8), strides=(1, 1))
    arch = sn.ArchDescriptor((1, 3), (((0, 2, 4, 6),), ((0,), (1,), (2,))))
    enc = sh.encode_arch(arch, 0, cfg)
    assert enc[6:9].tolist() == [0.5, 0.0, 0.0]


def test_encoding_injective_brute_force():
    cfg = sn.SupernetConfig(num_groups=2, max_depth=2, widths=(4, 4), strides=(1, 1), ratios=(0.5, 1.0))
    archs = []
    per_group = []
    for _ in range(2):
        opts = []
        for dep in (1, 2):
            for r in itertools.product((2, 4), repeat=dep):
                opts.append((dep, tuple(tuple(range(n)) for n in r)))
        per_group.append(opts)
    for combo in itertools.product(*per_group):
        archs.append(sn.ArchDescriptor(tuple(c[0] for c in combo), tuple(c[1] for c in combo)))
    for q in range(5):
        encs = {tuple(sh.encode_arch(a, q, cfg)) for a in archs}
        assert len(encs) == len(archs)


def test_genome_encoding_injective_over_enumeration(toy):
    genomes = sh.enumerate_genomes(toy)
    encs = {tuple(sh.encode_genome(g, 2, toy)) for g in genomes}
    assert len(encs) == len(genomes)


# -- latency ------------------------------------------------------------------


def test_lookup_single_layer_arithmetic():
    cfg = sn.SupernetConfig(num_groups=1, max_depth=1, widths=(4,), strides=(1,))
    table = sh.LatencyTable({("d", 0, 0, 1.0): 2.0})
    prof = sh.DeviceProfile("d", 1.0, 0.5, 10.0)
    arch = sn.ArchDescriptor((1,), (((0, 1, 2, 3),),))
    assert sh.lookup_latency(table, arch, prof, cfg) == 2.5


def test_lookup_linearity():
    cfg = sn.SupernetConfig(num_groups=1, max_depth=2, widths=(4,), strides=(1,))
    table = sh.LatencyTable({("d", 0, s, 1.0): 3.0 for s in range(2)})
    prof = sh.DeviceProfile("d", 1.0, 0.0, 10.0)
    one = sn.ArchDescriptor((1,), ((tuple(range(4)),),))
    two = sn.ArchDescriptor((2,), ((tuple(range(4)),) * 2,))
    assert sh.lookup_latency(table, two, prof, cfg) == 2 * sh.lookup_latency(table, one, prof, cfg)


def test_lookup_missing_entry_names_key(toy):
    prof = sh.DeviceProfile("ghost", 1.0, 0.0, 1.0)
    with pytest.raises(CoverageError, match="ghost"):
        sh.lookup_latency(sh.LatencyTable(), sn.full_arch(toy), prof, toy)


def _flops_oracle(config, arch):
    """Hand count: 2 k^2 Cin Cout H W per active layer, channels rounded up to a ratio bucket."""
    total = 0.0
    h, w = config.input_shape[1:]
    for g in range(config.num_groups):
        h, w = -(-h // config.strides[g]), -(-w // config.strides[g])
        for d in range(arch.depth[g]):
            n = len(arch.channels[g][d])
            r = min(r for r in config.ratios if round(r * config.widths[g]) >= n)
            cin_full = config.widths[g] if d else (config.widths[g - 1] if g else config.stem_width)
            total += 2 * 9 * max(1, round(r * cin_full)) * max(1, round(r * config.widths[g])) * h * w
    return total


@given(seeds)
def test_lookup_matches_cost_model_oracle(seed):
    toy = sn.toy_config()
    rng = np.random.default_rng(seed)
    prof = sh.DeviceProfile("d", float(rng.uniform(1e3, 1e6)), float(rng.uniform(0, 1)), 1.0)
    table = sh.build_latency_table(toy, [prof])
    arch = random_arch(toy, rng)
    want = _flops_oracle(toy, arch) / prof.flops_per_ms + prof.per_layer_overhead_ms * sum(arch.depth)
    assert abs(sh.lookup_latency(table, arch, prof, toy) - want) < 1e-9


def test_table_normalization_and_scaling(toy):
    f = sh.layer_flops(toy, 1, 1, 1.0)
    t = sh.build_latency_table(toy, [sh.DeviceProfile("a", f, 0.0, 1.0), sh.DeviceProfile("b", 2 * f, 0.0, 1.0)])
    assert t.get("a", 1, 1, 1.0) == 1.0
    for (dev, g, s, r), ms in t.entries.items():
        if dev == "a":
            assert ms == pytest.approx(2 * t.get("b", g, s, r), rel=1e-15)


def test_table_entry_hand_flops():
    cfg = sn.SupernetConfig(num_groups=2, max_depth=2, widths=(16, 16), strides=(1, 1), stem_width=16)
    prof = sh.DeviceProfile("d", 1234.5, 0.0, 1.0)
    table = sh.build_latency_table(cfg, [prof])
    assert table.get("d", 1, 1, 1.0) == pytest.approx(2 * 9 * 16 * 16 * 8 * 8 / 1234.5, rel=1e-15)


def test_table_covers_every_key(toy):
    fleet = [_profile(toy, 1e5 * (i + 1), name=f"d{i}") for i in range(3)]
    table = sh.build_latency_table(toy, fleet)
    assert len(table.entries) == 3 * len(toy.layer_keys()) * len(toy.ratios)
    assert all(v > 0 for v in table.entries.values())


def test_table_rejects_empty(toy):
    with pytest.raises(ConfigError):
        sh.build_latency_table(toy, [])
    with pytest.raises(ConfigError):
        sh.DeviceProfile("x", 0.0, 0.0, 1.0)


def test_table_text_roundtrip(toy):
    table = sh.build_latency_table(toy, [_profile(toy)])
    text = table.to_text()
    assert text.splitlines()[0].startswith("device=d0 g=0 slot=0 ratio=0.25 ms=")
    assert sh.LatencyTable.from_text(text) == table


# -- predictor -------------------------------------------------------------------


def test_predictor_constant_fit():
    pred = sh.AccuracyPredictor.create(7, seed=0)
    prof = [sh.TrainingProfile(0, 0, (1.0, 0.0, 0.5, 0.2, 0.0, 1.0, 0.0), 0.73)]
    for _ in range(200):
        pred = sh.train_predictor_round(pred, prof)
    assert abs(pred.predict(np.array(prof[0].encoding))[0] - 0.73) < 0.01


@given(st.lists(st.floats(-1e6, 1e6), min_size=17, max_size=17), seeds)
def test_predictor_output_bounded(vec, seed):
    pred = sh.AccuracyPredictor.create(17, seed=seed % 1000)
    out = pred.predict(np.array(vec))
    assert 0.0 <= out[0] <= 1.0


def test_converged_flag_contract(toy):
    rng = np.random.default_rng(0)
    pred = sh.AccuracyPredictor.create(sh.encoding_length(toy), seed=0)
    profs = []
    for t in range(30):
        for _ in range(8):
            enc = sh.encode_arch(random_arch(toy, rng), int(rng.integers(5)), toy)
            profs.append(sh.TrainingProfile(t, 0, tuple(enc), float(rng.random())))
        pred = sh.train_predictor_round(pred, profs)
        if pred.last_val_mse >= pred.threshold:
            assert not pred.converged


def test_profile_text_roundtrip():
    p = sh.TrainingProfile(3, 2, (0.25, 1.0, 0.0), 0.8125)
    assert p.to_text() == "t=3 q=2 enc=0.25,1.0,0.0 acc=0.8125"
    assert sh.TrainingProfile.from_text(p.to_text()) == p


# -- selection -------------------------------------------------------------------


def test_loose_bound_monotone_predictor_returns_full_arch():
    cfg = sn.SupernetConfig(num_groups=2, max_depth=2, widths=(8, 16), strides=(1, 2))
    prof = _profile(cfg, factor=1.5)
    table = sh.build_latency_table(cfg, [prof])
    pred = LinearPredictor(cfg)
    best, _ = sh.exhaustive_best(pred, table, cfg, prof, 1)
    [arch] = sh.select_submodels(pred, table, cfg, [(prof, 1)], S=20, seed=0)
    assert arch == sn.full_arch(cfg)
    assert sh.arch_to_genome(arch, cfg).key(cfg) == best.key(cfg)


def test_bound_below_minimum_is_infeasible(toy):
    prof = _profile(toy, factor=0.01)
    table = sh.build_latency_table(toy, [prof])
    with pytest.raises(InfeasibleError) as info:
        sh.select_submodels(ConstantPredictor(), table, toy, [(prof, 0)], S=3, seed=0)
    smallest = sh.Genome((1,) * 3, ((0, 0),) * 3)
    assert info.value.tightest_ms == pytest.approx(sh.genome_latency(table, smallest, prof, toy))


def test_constant_predictor_feasible_and_deterministic(toy):
    fleet = [_profile(toy, 1e5 * 2**i, name=f"d{i}") for i in range(3)]
    table = sh.build_latency_table(toy, fleet)
    workers = [(p, i) for i, p in enumerate(fleet)]
    a = sh.select_submodels(ConstantPredictor(), table, toy, workers, S=5, seed=3)
    b = sh.select_submodels(ConstantPredictor(), table, toy, workers, S=5, seed=3)
    assert a == b
    for arch, (p, _) in zip(a, workers):
        assert sh.lookup_latency(table, arch, p, toy) < p.latency_bound


def test_search_times_validated(toy):
    with pytest.raises(ConfigError):
        sh.select_submodels(ConstantPredictor(), sh.LatencyTable(), toy, [], S=0, seed=0)


@given(seeds, st.floats(0.05, 1.5), st.sampled_from(["random", "prefix"]))
def test_selection_always_feasible(seed, factor, policy):
    toy = sn.toy_config()
    rng = np.random.default_rng(seed)
    prof = _profile(toy, float(rng.uniform(1e4, 1e6)), float(rng.uniform(0, 0.2)), factor)
    table = sh.build_latency_table(toy, [prof])
    pred = sh.AccuracyPredictor.create(sh.encoding_length(toy), seed=seed % 97)
    search = sh.SearchConfig(channel_policy=policy)
    try:
        [arch] = sh.select_submodels(pred, table, toy, [(prof, seed % 5)], S=3, seed=seed, search=search)
    except InfeasibleError:
        smallest = sh.Genome((1,) * 3, ((0, 0),) * 3)
        assert sh.genome_latency(table, smallest, prof, toy) >= prof.latency_bound
    else:
        assert sh.lookup_latency(table, arch, prof, toy) < prof.latency_bound


def test_random_search_mode_feasible(toy):
    prof = _profile(toy, factor=0.5)
    table = sh.build_latency_table(toy, [prof])
    [arch] = sh.select_submodels(
        LinearPredictor(toy), table, toy, [(prof, 0)], S=10, seed=1, search=sh.SearchConfig.random_search()
    )
    assert sh.lookup_latency(table, arch, prof, toy) < prof.latency_bound


def test_genome_flat_roundtrip(toy):
    for g in sh.enumerate_genomes(toy)[:50]:
        assert sh.Genome.from_flat(g.flat(), 3, 2) == g
