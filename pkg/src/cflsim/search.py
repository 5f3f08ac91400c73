"""Search helper: offline latency lookup table, online accuracy predictor and
a latency-bounded genetic search over (depth, width-ratio) genomes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal, Protocol, Sequence

import numpy as np

from cflsim import nn
from cflsim.errors import ConfigError, CoverageError, InfeasibleError, StructuralError
from cflsim.supernet import ArchDescriptor, SupernetConfig, channel_count

NUM_QUALITY_LEVELS = 5


@dataclass(frozen=True)
class DeviceProfile:
    device_model: str
    flops_per_ms: float
    per_layer_overhead_ms: float
    latency_bound: float

    def __post_init__(self):
        if not self.flops_per_ms > 0:
            raise ConfigError(f"{self.device_model}: flops_per_ms must be > 0, got {self.flops_per_ms}")
        if self.per_layer_overhead_ms < 0:
            raise ConfigError(f"{self.device_model}: per_layer_overhead_ms must be >= 0")
        if not self.latency_bound > 0:
            raise ConfigError(f"{self.device_model}: latency bound must be > 0, got {self.latency_bound}")

    def to_text(self) -> str:
        return (
            f"device={self.device_model} flops_per_ms={self.flops_per_ms!r} "
            f"overhead_ms={self.per_layer_overhead_ms!r} bound_ms={self.latency_bound!r}"
        )

    @classmethod
    def from_text(cls, line: str) -> "DeviceProfile":
        f = dict(tok.split("=", 1) for tok in line.split())
        return cls(f["device"], float(f["flops_per_ms"]), float(f["overhead_ms"]), float(f["bound_ms"]))


# -- cost model and latency table ---------------------------------------------


def layer_flops(config: SupernetConfig, g: int, d: int, ratio: float) -> float:
    """2 * k^2 * Cin * Cout * Hout * Wout with both channel dims at ``ratio``."""
    k = config.kernel_size
    h, w = config.group_spatial()[g]
    cout = channel_count(ratio, config.widths[g])
    cin = channel_count(ratio, config.layer_in_width(g, d))
    return 2.0 * k * k * cin * cout * h * w


@dataclass
class LatencyTable:
    entries: dict[tuple[str, int, int, float], float] = field(default_factory=dict)

    def get(self, device: str, g: int, slot: int, ratio: float) -> float:
        key = (device, g, slot, ratio)
        try:
            return self.entries[key]
        except KeyError:
            raise CoverageError(f"latency table has no entry device={device} g={g} slot={slot} ratio={ratio}")

    def to_text(self) -> str:
        return "".join(
            f"device={dev} g={g} slot={s} ratio={r!r} ms={ms!r}\n"
            for (dev, g, s, r), ms in sorted(self.entries.items())
        )

    @classmethod
    def from_text(cls, text: str) -> "LatencyTable":
        entries = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            f = dict(tok.split("=", 1) for tok in line.split())
            entries[(f["device"], int(f["g"]), int(f["slot"]), float(f["ratio"]))] = float(f["ms"])
        return cls(entries)


def build_latency_table(config: SupernetConfig, profiles: Sequence[DeviceProfile]) -> LatencyTable:
    if not profiles:
        raise ConfigError("build_latency_table needs at least one device profile")
    table = LatencyTable()
    for prof in profiles:
        if not prof.flops_per_ms > 0:
            raise ConfigError(f"{prof.device_model}: nonpositive flops_per_ms")
        for g, d in config.layer_keys():
            for r in config.ratios:
                table.entries[(prof.device_model, g, d, r)] = layer_flops(config, g, d, r) / prof.flops_per_ms
    return table


def width_bucket(count: int, width: int, ratios: Sequence[float]) -> float:
    """Smallest candidate ratio whose channel count covers ``count``."""
    for r in ratios:
        if channel_count(r, width) >= count:
            return r
    raise StructuralError(f"{count} channels exceed width {width}")


def lookup_latency(table: LatencyTable, arch: ArchDescriptor, profile: DeviceProfile, config: SupernetConfig) -> float:
    total = 0.0
    layers = arch.active_layers()
    for g, d in layers:
        r = width_bucket(len(arch.channels[g][d]), config.widths[g], config.ratios)
        total += table.get(profile.device_model, g, d, r)
    return total + profile.per_layer_overhead_ms * len(layers)


# -- genomes ---------------------------------------------------------------------

# genome: per group (depth, ratio index per slot); inactive slot genes are carried along


@dataclass(frozen=True)
class Genome:
    depth: tuple[int, ...]
    ratio_idx: tuple[tuple[int, ...], ...]

    def flat(self) -> list[int]:
        out: list[int] = []
        for dep, ri in zip(self.depth, self.ratio_idx):
            out.append(dep)
            out.extend(ri)
        return out

    @classmethod
    def from_flat(cls, genes: Sequence[int], num_groups: int, max_depth: int) -> "Genome":
        step = max_depth + 1
        depth = tuple(int(genes[g * step]) for g in range(num_groups))
        ratio_idx = tuple(tuple(int(v) for v in genes[g * step + 1 : (g + 1) * step]) for g in range(num_groups))
        return cls(depth, ratio_idx)

    def key(self, config: SupernetConfig) -> tuple:
        """Identity of the architecture the genome expresses (hidden genes dropped)."""
        return tuple((dep, ri[:dep]) for dep, ri in zip(self.depth, self.ratio_idx))


def genome_latency(table: LatencyTable, genome: Genome, profile: DeviceProfile, config: SupernetConfig) -> float:
    total = 0.0
    n = 0
    for g, dep in enumerate(genome.depth):
        for d in range(dep):
            total += table.get(profile.device_model, g, d, config.ratios[genome.ratio_idx[g][d]])
            n += 1
    return total + profile.per_layer_overhead_ms * n


def genome_to_arch(
    genome: Genome,
    config: SupernetConfig,
    rng: np.random.Generator | None = None,
    channel_policy: Literal["random", "prefix"] = "random",
) -> ArchDescriptor:
    channels = []
    for g, dep in enumerate(genome.depth):
        grp = []
        width = config.widths[g]
        for d in range(dep):
            n = channel_count(config.ratios[genome.ratio_idx[g][d]], width)
            if channel_policy == "prefix" or n == width:
                sel = tuple(range(n))
            else:
                if rng is None:
                    raise ConfigError("random channel policy needs an rng")
                sel = tuple(sorted(int(i) for i in rng.choice(width, size=n, replace=False)))
            grp.append(sel)
        channels.append(tuple(grp))
    return ArchDescriptor(genome.depth, tuple(channels))


def arch_to_genome(arch: ArchDescriptor, config: SupernetConfig) -> Genome:
    ratio_idx = []
    for g, dep in enumerate(arch.depth):
        ri = [config.ratios.index(width_bucket(len(sel), config.widths[g], config.ratios)) for sel in arch.channels[g]]
        ri += [len(config.ratios) - 1] * (config.max_depth - dep)
        ratio_idx.append(tuple(ri))
    return Genome(arch.depth, tuple(ratio_idx))


def enumerate_genomes(config: SupernetConfig) -> list[Genome]:
    """Every distinct architecture (hidden genes fixed to the largest ratio)."""
    from itertools import product

    per_group = []
    top = len(config.ratios) - 1
    for _ in range(config.num_groups):
        opts = []
        for dep in range(1, config.max_depth + 1):
            for ri in product(range(len(config.ratios)), repeat=dep):
                opts.append((dep, tuple(ri) + (top,) * (config.max_depth - dep)))
        per_group.append(opts)
    return [Genome(tuple(o[0] for o in combo), tuple(o[1] for o in combo)) for combo in product(*per_group)]


# -- encoding ------------------------------------------------------------------------


def encoding_length(config: SupernetConfig) -> int:
    return config.num_groups * config.max_depth * 2 + NUM_QUALITY_LEVELS


def _encode(depths: Sequence[int], ratios: Sequence[Sequence[float]], quality: int, config: SupernetConfig) -> np.ndarray:
    if not 0 <= quality < NUM_QUALITY_LEVELS:
        raise StructuralError(f"quality level {quality} outside 0..{NUM_QUALITY_LEVELS - 1}")
    gd = config.num_groups * config.max_depth
    out = np.zeros(encoding_length(config))
    for g, dep in enumerate(depths):
        out[g * config.max_depth + dep - 1] = 1.0
        for d in range(dep):
            out[gd + g * config.max_depth + d] = ratios[g][d]
    out[2 * gd + quality] = 1.0
    return out


def encode_arch(arch: ArchDescriptor, quality: int, config: SupernetConfig) -> np.ndarray:
    """Depth one-hots, per-slot width ratios (0 when inactive), quality one-hot."""
    arch.validate(config)
    ratios = [[len(sel) / config.widths[g] for sel in grp] for g, grp in enumerate(arch.channels)]
    return _encode(arch.depth, ratios, quality, config)


def encode_genome(genome: Genome, quality: int, config: SupernetConfig) -> np.ndarray:
    ratios = [
        [channel_count(config.ratios[i], config.widths[g]) / config.widths[g] for i in ri]
        for g, ri in enumerate(genome.ratio_idx)
    ]
    return _encode(genome.depth, ratios, quality, config)


# -- accuracy predictor --------------------------------------------------------------


@dataclass(frozen=True)
class TrainingProfile:
    round: int
    quality: int
    encoding: tuple[float, ...]
    accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise StructuralError(f"profile accuracy {self.accuracy} outside [0, 1]")

    def to_text(self) -> str:
        enc = ",".join(repr(float(v)) for v in self.encoding)
        return f"t={self.round} q={self.quality} enc={enc} acc={self.accuracy!r}"

    @classmethod
    def from_text(cls, line: str) -> "TrainingProfile":
        f = dict(tok.split("=", 1) for tok in line.split())
        return cls(int(f["t"]), int(f["q"]), tuple(float(v) for v in f["enc"].split(",")), float(f["acc"]))


class Predictor(Protocol):
    def predict(self, encodings: np.ndarray) -> np.ndarray: ...


HIDDEN = (64, 64, 32)


@dataclass
class AccuracyPredictor:
    """Four-layer ReLU regressor with a sigmoid output, trained with Adam on MSE."""

    params: nn.ParamSet
    lr: float = 0.01
    batch_size: int = 16
    threshold: float = 1e-3
    min_validation: int = 8
    seed: int = 0
    step: int = 0
    converged: bool = False
    last_val_mse: float = float("inf")
    adam_m: nn.ParamSet = field(default_factory=dict)
    adam_v: nn.ParamSet = field(default_factory=dict)

    @classmethod
    def create(cls, input_dim: int, seed: int = 0, **kwargs) -> "AccuracyPredictor":
        rng = np.random.default_rng(seed)
        dims = (input_dim, *HIDDEN, 1)
        params: nn.ParamSet = {}
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            params[f"l{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b))
            params[f"l{i}.b"] = np.zeros(b)
        return cls(params=params, seed=seed, **kwargs)

    def _graph(self, p, x: np.ndarray) -> nn.Var:
        h = nn.Var(x)
        for i in range(4):
            h = nn.matmul(h, p[f"l{i}.w"]) + p[f"l{i}.b"]
            if i < 3:
                h = nn.relu(h)
        return nn.sigmoid(h)

    def predict(self, encodings: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(encodings, dtype=float))
        h = x
        for i in range(4):
            h = h @ self.params[f"l{i}.w"] + self.params[f"l{i}.b"]
            if i < 3:
                h = np.maximum(h, 0.0)
        z = np.nan_to_num(h[:, 0], nan=0.0, posinf=1e300, neginf=-1e300)
        return nn._stable_sigmoid(z)

    def mse(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean((self.predict(x) - y) ** 2))

    def copy(self) -> "AccuracyPredictor":
        return AccuracyPredictor(
            params=nn.copy_params(self.params),
            lr=self.lr,
            batch_size=self.batch_size,
            threshold=self.threshold,
            min_validation=self.min_validation,
            seed=self.seed,
            step=self.step,
            converged=self.converged,
            last_val_mse=self.last_val_mse,
            adam_m=nn.copy_params(self.adam_m),
            adam_v=nn.copy_params(self.adam_v),
        )

    def adam_update(self, grads: nn.ParamSet, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> None:
        self.step += 1
        for k in sorted(self.params):
            m = self.adam_m.get(k, np.zeros_like(grads[k]))
            v = self.adam_v.get(k, np.zeros_like(grads[k]))
            m = b1 * m + (1 - b1) * grads[k]
            v = b2 * v + (1 - b2) * grads[k] ** 2
            self.adam_m[k], self.adam_v[k] = m, v
            mhat = m / (1 - b1**self.step)
            vhat = v / (1 - b2**self.step)
            self.params[k] = self.params[k] - self.lr * mhat / (np.sqrt(vhat) + eps)


def split_profiles(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Every fifth profile is held out for validation once there are at least five."""
    idx = np.arange(n)
    if n < 5:
        return idx, idx
    val = idx % 5 == 4
    return idx[~val], idx[val]


def train_predictor_round(pred: AccuracyPredictor, profiles: Sequence[TrainingProfile]) -> AccuracyPredictor:
    """One epoch of MSE regression over ``profiles``; sets ``converged`` on low validation MSE."""
    if not profiles:
        raise ValueError("train_predictor_round needs at least one profile")
    pred = pred.copy()
    x = np.array([p.encoding for p in profiles], dtype=float)
    y = np.array([p.accuracy for p in profiles], dtype=float)
    train_idx, val_idx = split_profiles(len(profiles))
    rng = np.random.default_rng([pred.seed, pred.step])
    order = rng.permutation(train_idx)
    for start in range(0, len(order), pred.batch_size):
        b = order[start : start + pred.batch_size]
        xb, yb = x[b], y[b]
        grads = nn.grad_of(lambda p: nn.mse(pred._graph(p, xb), yb[:, None]), pred.params)
        pred.adam_update(grads)
    pred.last_val_mse = pred.mse(x[val_idx], y[val_idx])
    pred.converged = bool(len(val_idx) >= pred.min_validation and pred.last_val_mse < pred.threshold)
    return pred


# -- genetic selection ---------------------------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    population: int = 16
    tournament: int = 4
    crossover: float = 0.9
    mutation: float = 0.1
    max_rejections: int = 1000
    channel_policy: Literal["random", "prefix"] = "random"

    @classmethod
    def random_search(cls, **kw) -> "SearchConfig":
        """Population-1, mutation-only: plain random sampling of feasible candidates."""
        return cls(population=1, tournament=1, crossover=0.0, mutation=1.0, **kw)


def _random_genome(config: SupernetConfig, rng: np.random.Generator) -> Genome:
    depth = tuple(int(v) for v in rng.integers(1, config.max_depth + 1, size=config.num_groups))
    ri = rng.integers(0, len(config.ratios), size=(config.num_groups, config.max_depth))
    return Genome(depth, tuple(tuple(int(v) for v in row) for row in ri))


def _mutate(genome: Genome, config: SupernetConfig, rate: float, rng: np.random.Generator) -> Genome:
    genes = genome.flat()
    step = config.max_depth + 1
    for i in range(len(genes)):
        if rng.random() < rate:
            if i % step == 0:
                genes[i] = int(rng.integers(1, config.max_depth + 1))
            else:
                genes[i] = int(rng.integers(0, len(config.ratios)))
    return Genome.from_flat(genes, config.num_groups, config.max_depth)


def _repair(genome, config, latency_of, bound, rng) -> Genome:
    genes = genome.flat()
    step = config.max_depth + 1
    while latency_of(Genome.from_flat(genes, config.num_groups, config.max_depth)) >= bound:
        reducible = []
        for g in range(config.num_groups):
            dep = genes[g * step]
            if dep > 1:
                reducible.append(g * step)
            reducible.extend(g * step + 1 + d for d in range(dep) if genes[g * step + 1 + d] > 0)
        if not reducible:
            raise InfeasibleError("no architecture meets the latency bound", latency_of(genome))
        genes[reducible[int(rng.integers(len(reducible)))]] -= 1
    return Genome.from_flat(genes, config.num_groups, config.max_depth)


def search_genome(
    pred: Predictor,
    table: LatencyTable,
    config: SupernetConfig,
    profile: DeviceProfile,
    quality: int,
    generations: int,
    rng: np.random.Generator,
    search: SearchConfig = SearchConfig(),
) -> tuple[Genome, float]:
    """Genetic search for the feasible genome with the highest predicted accuracy."""
    bound = profile.latency_bound
    lat_cache: dict[tuple, float] = {}
    fit_cache: dict[tuple, float] = {}

    def latency_of(gn: Genome) -> float:
        k = gn.key(config)
        if k not in lat_cache:
            lat_cache[k] = genome_latency(table, gn, profile, config)
        return lat_cache[k]

    def fitness(pop: list[Genome]) -> np.ndarray:
        missing = [gn for gn in pop if gn.key(config) not in fit_cache]
        if missing:
            enc = np.stack([encode_genome(gn, quality, config) for gn in missing])
            for gn, v in zip(missing, pred.predict(enc)):
                fit_cache[gn.key(config)] = float(v)
        return np.array([fit_cache[gn.key(config)] for gn in pop])

    smallest = Genome((1,) * config.num_groups, ((0,) * config.max_depth,) * config.num_groups)
    tightest = latency_of(smallest)
    pop: list[Genome] = []
    for _ in range(search.max_rejections):
        if len(pop) >= search.population:
            break
        cand = _random_genome(config, rng)
        lat = latency_of(cand)
        tightest = min(tightest, lat)
        if lat < bound:
            pop.append(cand)
    if tightest >= bound:
        raise InfeasibleError(
            f"{profile.device_model}: no arch below {bound:.6g} ms (tightest {tightest:.6g} ms)", tightest
        )
    while len(pop) < search.population:
        pop.append(_repair(_random_genome(config, rng), config, latency_of, bound, rng))

    fit = fitness(pop)
    best_i = int(np.argmax(fit))
    best, best_fit = pop[best_i], float(fit[best_i])
    for _ in range(generations):
        children: list[Genome] = []
        if search.population > 1:
            children.append(pop[int(np.argmax(fit))])
        while len(children) < search.population:
            p1 = _tournament(pop, fit, search.tournament, rng)
            if search.population > 1 and rng.random() < search.crossover:
                p2 = _tournament(pop, fit, search.tournament, rng)
                a, b = p1.flat(), p2.flat()
                cut = int(rng.integers(1, len(a)))
                child = Genome.from_flat(a[:cut] + b[cut:], config.num_groups, config.max_depth)
            else:
                child = p1
            child = _mutate(child, config, search.mutation, rng)
            children.append(_repair(child, config, latency_of, bound, rng))
        pop = children
        fit = fitness(pop)
        i = int(np.argmax(fit))
        if fit[i] > best_fit:
            best, best_fit = pop[i], float(fit[i])
    return best, best_fit


def _tournament(pop: list[Genome], fit: np.ndarray, size: int, rng: np.random.Generator) -> Genome:
    picks = rng.integers(0, len(pop), size=max(1, min(size, len(pop))))
    return pop[int(picks[np.argmax(fit[picks])])]


def select_submodel(
    pred: Predictor,
    table: LatencyTable,
    config: SupernetConfig,
    profile: DeviceProfile,
    quality: int,
    generations: int,
    rng: np.random.Generator,
    search: SearchConfig = SearchConfig(),
) -> ArchDescriptor:
    genome, _ = search_genome(pred, table, config, profile, quality, generations, rng, search)
    return genome_to_arch(genome, config, rng, search.channel_policy)


def select_submodels(
    pred: Predictor,
    table: LatencyTable,
    config: SupernetConfig,
    workers: Sequence[tuple[DeviceProfile, int]],
    S: int,
    seed: int,
    search: SearchConfig = SearchConfig(),
) -> list[ArchDescriptor]:
    """Latency-bounded personalized architecture for every (profile, quality) worker."""
    if S < 1:
        raise ConfigError(f"search times S must be >= 1, got {S}")
    out = []
    for k, (profile, quality) in enumerate(workers):
        rng = np.random.default_rng([seed, k])
        out.append(select_submodel(pred, table, config, profile, quality, S, rng, search))
    return out


def exhaustive_best(
    pred: Predictor, table: LatencyTable, config: SupernetConfig, profile: DeviceProfile, quality: int
) -> tuple[Genome, float]:
    """Brute-force optimum over every feasible architecture (toy spaces only)."""
    feasible = [gn for gn in enumerate_genomes(config) if genome_latency(table, gn, profile, config) < profile.latency_bound]
    if not feasible:
        raise InfeasibleError("no feasible architecture", float("inf"))
    scores = pred.predict(np.stack([encode_genome(gn, quality, config) for gn in feasible]))
    i = int(np.argmax(scores))
    return feasible[i], float(scores[i])


def load_profiles(lines: Iterable[str]) -> list[TrainingProfile]:
    return [TrainingProfile.from_text(ln) for ln in lines if ln.strip()]
