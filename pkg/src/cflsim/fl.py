"""Synchronous CFL rounds: select -> dispatch -> local SGD -> align/aggregate -> update.

Three modes share seeds so their runs are paired:

* ``cfl``: per-worker latency-bounded submodels chosen by the search helper,
  zero-padding aggregation, gated (data-quality aware) execution.
* ``uniform-fl``: every worker trains the full parent, gates off (plain FedAvg).
* ``independent``: customized submodels as in ``cfl`` but each worker keeps a
  private parent and nothing is ever aggregated.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from cflsim import align as al
from cflsim import bench, nn
from cflsim import search as sh
from cflsim import supernet as sn
from cflsim.errors import ConfigError, InfeasibleError
from cflsim.nn import ParamSet

log = logging.getLogger(__name__)

MODES = ("cfl", "uniform-fl", "independent")


@dataclass(frozen=True)
class RunConfig:
    rounds: int = 30
    workers: int = 8
    local_epochs: int = 3
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0
    mode: str = "cfl"
    search_times: int = 10
    alpha: float = 0.1
    bound_factor: float = 0.6
    aggregation: str = "weighted"
    speed_spread: float = 4.0
    imbalance: float = 0.8
    train_samples: int = 2400
    test_samples: int = 500
    public_fraction: float = 0.02
    pretrain_epochs: int = 3
    reinforce_epochs: int = 2
    gate_mode: str = "greedy"
    search_mode: str = "genetic"
    channel_policy: str = "prefix"
    train_cost_multiplier: float = 3.0
    local_test_fraction: float = 0.1
    quality_assignment: str = "round-robin"
    predictor_threshold: float = 1e-3
    net: sn.SupernetConfig = sn.SupernetConfig()

    def __post_init__(self):
        for name in ("rounds", "workers", "local_epochs", "batch_size", "search_times"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not self.bound_factor > 0:
            raise ConfigError(f"bound_factor must be > 0, got {self.bound_factor}")
        if self.aggregation not in ("weighted", "coverage"):
            raise ConfigError(f"aggregation must be 'weighted' or 'coverage', got {self.aggregation!r}")
        if self.speed_spread < 1:
            raise ConfigError(f"speed_spread must be >= 1, got {self.speed_spread}")
        if not 0 < self.imbalance <= 1:
            raise ConfigError(f"imbalance must be in (0, 1], got {self.imbalance}")
        if not 0 <= self.public_fraction < 1:
            raise ConfigError(f"public_fraction must be in [0, 1), got {self.public_fraction}")
        if not 0 < self.local_test_fraction < 1:
            raise ConfigError("local_test_fraction must be in (0, 1)")
        if self.gate_mode not in ("greedy", "all-on", "sample"):
            raise ConfigError(f"unknown gate_mode {self.gate_mode!r}")
        if self.search_mode not in ("genetic", "random"):
            raise ConfigError(f"unknown search_mode {self.search_mode!r}")
        if self.channel_policy not in ("random", "prefix"):
            raise ConfigError(f"unknown channel_policy {self.channel_policy!r}")
        if self.quality_assignment not in ("round-robin", "random"):
            raise ConfigError(f"unknown quality_assignment {self.quality_assignment!r}")
        if self.pretrain_epochs < 0 or self.reinforce_epochs < 0:
            raise ConfigError("pretrain/reinforce epochs must be >= 0")
        if self.train_samples < 5 or self.test_samples < 5:
            raise ConfigError("need at least 5 train and test samples")

    def search_config(self) -> sh.SearchConfig:
        if self.search_mode == "random":
            return sh.SearchConfig.random_search(channel_policy=self.channel_policy)
        return sh.SearchConfig(channel_policy=self.channel_policy)

    def train_gate_mode(self) -> str:
        return "all-on" if self.mode == "uniform-fl" else self.gate_mode


# -- key=value config files ---------------------------------------------------------


def _fmt(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name == "net":
            continue
        lines.append(f"{f.name}={_fmt(getattr(cfg, f.name))}")
    for f in dataclasses.fields(cfg.net):
        lines.append(f"net.{f.name}={_fmt(getattr(cfg.net, f.name))}")
    return "\n".join(lines) + "\n"


def _parse_value(raw: str, default: Any) -> Any:
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else int
        return tuple(kind(x) for x in raw.split(",") if x)
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    top: dict[str, Any] = {}
    net: dict[str, Any] = {}
    top_fields = {f.name for f in dataclasses.fields(RunConfig)} - {"net"}
    net_fields = {f.name for f in dataclasses.fields(sn.SupernetConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            if key.startswith("net."):
                name = key[4:]
                if name not in net_fields:
                    raise ConfigError(f"config line {lineno}: unknown key {key!r}")
                net[name] = _parse_value(raw, getattr(base.net, name))
            elif key in top_fields:
                top[key] = _parse_value(raw, getattr(base, key))
            else:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"config line {lineno}: bad value for {key}: {raw!r}") from exc
    new_net = dataclasses.replace(base.net, **net) if net else base.net
    return dataclasses.replace(base, net=new_net, **top)


# -- benchmark assembly --------------------------------------------------------------


@dataclass
class WorkerData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    quality: int


@dataclass
class Benchmark:
    workers: list[WorkerData]
    public: bench.Dataset
    test: bench.Dataset
    dominant: list[int]
    unassigned: int = 0


def _stratified_public(labels: np.ndarray, fraction: float, num_classes: int, rng) -> np.ndarray:
    per_class = int(round(fraction * len(labels) / num_classes))
    picks = []
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        picks.append(rng.permutation(pool)[:per_class])
    return np.sort(np.concatenate(picks)) if picks else np.array([], dtype=np.intp)


def build_benchmark(cfg: RunConfig, raw_train: bench.Dataset | None = None, raw_test: bench.Dataset | None = None) -> Benchmark:
    """Server public split (balanced, worst quality), non-IID worker shards at
    per-worker quality levels, and a quality-mixed global test set."""
    net = cfg.net
    size = net.input_shape[1]
    if raw_train is None:
        raw_train = bench.synthetic_digits(cfg.train_samples, cfg.seed, net.num_classes, size)
    if raw_test is None:
        raw_test = bench.synthetic_digits(cfg.test_samples, cfg.seed + 10_007, net.num_classes, size)
    rng = np.random.default_rng([cfg.seed, 17])
    public_idx = _stratified_public(raw_train.labels, cfg.public_fraction, raw_train.num_classes, rng)
    pool = np.setdiff1d(np.arange(len(raw_train)), public_idx)
    public = raw_train.subset(public_idx)
    public = bench.Dataset(
        bench.apply_quality(public.images, bench.WORST_QUALITY),
        public.labels,
        np.full(len(public), bench.WORST_QUALITY, np.uint8),
        public.num_classes,
    )
    part = bench.partition_noniid(raw_train.labels[pool], cfg.workers, cfg.imbalance, cfg.seed, raw_train.num_classes)
    qualities = bench.assign_qualities(cfg.workers, cfg.quality_assignment, cfg.seed)
    workers = []
    for k, local in enumerate(part.indices):
        idx = pool[local]
        perm = np.random.default_rng([cfg.seed, 23, k]).permutation(len(idx))
        n_test = max(1, int(np.ceil(cfg.local_test_fraction * len(idx))))
        test_i, train_i = idx[np.sort(perm[:n_test])], idx[np.sort(perm[n_test:])]
        q = qualities[k]
        workers.append(
            WorkerData(
                bench.apply_quality(raw_train.images[train_i], q),
                raw_train.labels[train_i],
                bench.apply_quality(raw_train.images[test_i], q),
                raw_train.labels[test_i],
                q,
            )
        )
    test = bench.apply_quality_batches(raw_test, bench.partition_quality_iid(len(raw_test), cfg.seed + 1))
    return Benchmark(workers, public, test, part.dominant, len(part.unassigned))


def _ds(x: np.ndarray, y: np.ndarray, q: int, classes: int) -> bench.Dataset:
    return bench.Dataset(x, y, np.full(len(y), q, np.uint8), classes)


def save_benchmark(bm: Benchmark, data_dir: Path) -> list[Path]:
    """Write every split as a CFLD cache plus a ``partition.txt`` index."""
    data_dir = Path(data_dir)
    (data_dir / "workers").mkdir(parents=True, exist_ok=True)
    classes = bm.test.num_classes
    written = []

    def put(path: Path, ds: bench.Dataset):
        path.write_bytes(bench.dump_dataset(ds))
        written.append(path)

    put(data_dir / "public.cfld", bm.public)
    put(data_dir / "test.cfld", bm.test)
    lines = [f"unassigned={bm.unassigned}"]
    for k, w in enumerate(bm.workers):
        put(data_dir / "workers" / f"worker{k:03d}.train.cfld", _ds(w.x_train, w.y_train, w.quality, classes))
        put(data_dir / "workers" / f"worker{k:03d}.test.cfld", _ds(w.x_test, w.y_test, w.quality, classes))
        lines.append(f"worker={k} dominant={bm.dominant[k]} quality={w.quality} train={len(w.y_train)} test={len(w.y_test)}")
    (data_dir / "partition.txt").write_text("\n".join(lines) + "\n")
    written.append(data_dir / "partition.txt")
    return written


def _read_cache(path: Path) -> bench.Dataset:
    if not path.is_file():
        raise FileNotFoundError(f"missing data cache {path}")
    return bench.load_dataset(path.read_bytes())


def load_benchmark(data_dir: Path) -> Benchmark:
    data_dir = Path(data_dir)
    index = data_dir / "partition.txt"
    if not index.is_file():
        raise FileNotFoundError(f"missing partition index {index}")
    unassigned = 0
    rows = []
    for line in index.read_text().splitlines():
        kv = dict(tok.split("=", 1) for tok in line.split())
        if "unassigned" in kv:
            unassigned = int(kv["unassigned"])
        elif "worker" in kv:
            rows.append(kv)
    workers, dominant = [], []
    for kv in rows:
        k = int(kv["worker"])
        tr = _read_cache(data_dir / "workers" / f"worker{k:03d}.train.cfld")
        te = _read_cache(data_dir / "workers" / f"worker{k:03d}.test.cfld")
        workers.append(WorkerData(tr.images, tr.labels, te.images, te.labels, int(kv["quality"])))
        dominant.append(int(kv["dominant"]))
    return Benchmark(workers, _read_cache(data_dir / "public.cfld"), _read_cache(data_dir / "test.cfld"), dominant, unassigned)


# -- workers and server ------------------------------------------------------------------


@dataclass
class Upload:
    worker_id: int
    delta: ParamSet
    arch: sn.ArchDescriptor
    data_size: int
    accuracy: float
    quality: int
    time_ms: float
    computation: float


def batch_order(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class Worker:
    """Holds local data; exposes only what it uploads."""

    def __init__(self, worker_id: int, data: WorkerData, profile: sh.DeviceProfile):
        self.worker_id = worker_id
        self._data = data
        self.profile = profile

    @property
    def quality(self) -> int:
        return self._data.quality

    def local_train(
        self,
        submodel: ParamSet,
        arch: sn.ArchDescriptor,
        gates: sn.GatePolicy | None,
        cfg: RunConfig,
        rng: np.random.Generator,
        inference_ms: float,
    ) -> Upload:
        d = self._data
        mode = cfg.train_gate_mode()
        gate_params = gates.params if gates is not None and mode != "all-on" else None
        if gate_params is None:
            mode = "all-on"
        params = nn.copy_params(submodel)
        batches = 0
        for _ in range(cfg.local_epochs):
            for idx in batch_order(rng, len(d.y_train), cfg.batch_size):
                xb, yb = d.x_train[idx], d.y_train[idx]

                def loss_fn(v):
                    logits, _ = sn.forward_graph(v, arch, cfg.net, xb, gate_params, mode, rng)
                    return nn.softmax_cross_entropy(logits, yb)

                params = nn.sgd_step(params, nn.grad_of(loss_fn, params), cfg.lr)
                batches += 1
        eval_mode = "greedy" if mode == "sample" else mode
        preds, masks = sn.predict(params, arch, cfg.net, gates, d.x_test, eval_mode)
        return Upload(
            worker_id=self.worker_id,
            delta=nn.params_sub(params, submodel),
            arch=arch,
            data_size=len(d.y_train),
            accuracy=float(np.mean(preds == d.y_test)),
            quality=d.quality,
            time_ms=batches * inference_ms * cfg.train_cost_multiplier,
            computation=sn.computation_percentage(masks),
        )


@dataclass
class ServerState:
    parent: ParamSet
    gates: sn.GatePolicy
    predictor: sh.AccuracyPredictor
    table: sh.LatencyTable
    fleet: list[sh.DeviceProfile]
    qualities: list[int]
    profiles: list[sh.TrainingProfile] = field(default_factory=list)
    round: int = 0
    predictor_frozen_round: int | None = None
    personal: list[ParamSet] | None = None
    aggregate_calls: int = 0


@dataclass
class WorkerRecord:
    worker: int
    arch: str
    time_ms: float
    accuracy: float
    data_size: int
    quality: int
    computation: float


@dataclass
class RoundRecord:
    round: int
    workers: list[WorkerRecord]
    round_time_ms: float
    global_accuracy: dict[str, float]
    events: list[str]

    def to_json(self) -> str:
        return json.dumps({"type": "round", **dataclasses.asdict(self)}, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RoundRecord":
        return cls(
            d["round"],
            [WorkerRecord(**w) for w in d["workers"]],
            d["round_time_ms"],
            dict(d["global_accuracy"]),
            list(d["events"]),
        )


def global_accuracy(params: ParamSet, gates: sn.GatePolicy | None, test: bench.Dataset, net: sn.SupernetConfig, mode: str) -> dict[str, float]:
    preds, _ = sn.predict(params, sn.full_arch(net), net, gates, test.images, mode)
    out = {}
    for q in range(len(bench.QualityLevel)):
        sel = test.quality == q
        if sel.any():
            out[str(q)] = float(np.mean(preds[sel] == test.labels[sel]))
    return out


def init_state(cfg: RunConfig, benchmark: Benchmark, fleet: Sequence[sh.DeviceProfile], table: sh.LatencyTable) -> ServerState:
    """Random parent, then server-side gate warm-up / hybrid training on the public split."""
    net = cfg.net
    parent = sn.init_parent(net, cfg.seed)
    gates = sn.init_gates(net, cfg.seed + 1)
    if len(benchmark.public) and cfg.pretrain_epochs + cfg.reinforce_epochs > 0:
        parent, gates, _ = sn.train_gated_parent(
            parent,
            gates,
            benchmark.public.images,
            benchmark.public.labels,
            net,
            warmup_epochs=cfg.pretrain_epochs,
            reinforce_epochs=cfg.reinforce_epochs,
            alpha=cfg.alpha,
            lr=cfg.lr,
            batch_size=cfg.batch_size,
            seed=cfg.seed,
        )
    predictor = sh.AccuracyPredictor.create(sh.encoding_length(net), seed=cfg.seed, threshold=cfg.predictor_threshold)
    state = ServerState(parent, gates, predictor, table, list(fleet), [w.quality for w in benchmark.workers])
    if cfg.mode == "independent":
        state.personal = [nn.copy_params(parent) for _ in benchmark.workers]
    return state


def run_round(
    state: ServerState,
    workers: Sequence[Worker],
    cfg: RunConfig,
    test: bench.Dataset | None = None,
    archs: Sequence[sn.ArchDescriptor] | None = None,
) -> RoundRecord:
    """One synchronous round; ``archs`` overrides the search helper when given."""
    net = cfg.net
    t = state.round + 1
    events: list[str] = []

    # server: selection
    chosen: dict[int, sn.ArchDescriptor] = {}
    for k, worker in enumerate(workers):
        profile = state.fleet[k]
        if archs is not None:
            chosen[k] = archs[k]
        elif cfg.mode == "uniform-fl":
            chosen[k] = sn.full_arch(net)
        else:
            rng = np.random.default_rng([cfg.seed, t, k, 0])
            try:
                chosen[k] = sh.select_submodel(
                    state.predictor, state.table, net, profile, state.qualities[k], cfg.search_times, rng, cfg.search_config()
                )
            except InfeasibleError as exc:
                events.append(f"straggler_excluded:{k}")
                log.info("round %d: worker %d excluded (%s)", t, k, exc)

    # workers: local training
    uploads: list[Upload] = []
    for k, arch in chosen.items():
        base = state.personal[k] if state.personal is not None else state.parent
        sub = sn.extract_submodel(base, arch, net)
        inference_ms = sh.lookup_latency(state.table, arch, state.fleet[k], net)
        rng = np.random.default_rng([cfg.seed, t, k, 1])
        uploads.append(workers[k].local_train(sub, arch, state.gates, cfg, rng, inference_ms))

    # server: model update
    aligned = [al.align(u.delta, u.arch, net, u.data_size, u.worker_id) for u in uploads]
    if cfg.mode == "independent":
        for a in aligned:
            state.personal[a.worker_id] = al.apply_global_update(state.personal[a.worker_id], a.delta)
    elif aligned:
        delta_t = al.aggregate(aligned, net, cfg.aggregation)
        state.parent = al.apply_global_update(state.parent, delta_t)
        state.aggregate_calls += 1
        events.append("aggregate")

    # server: search helper update
    if cfg.mode != "uniform-fl" and uploads and state.predictor_frozen_round is None:
        state.profiles.extend(
            sh.TrainingProfile(t, u.quality, tuple(sh.encode_arch(u.arch, u.quality, net)), u.accuracy) for u in uploads
        )
        state.predictor = sh.train_predictor_round(state.predictor, state.profiles)
        if state.predictor.converged:
            state.predictor_frozen_round = t
            events.append("predictor_frozen")

    gacc: dict[str, float] = {}
    if test is not None and cfg.mode != "independent":
        gacc = global_accuracy(state.parent, state.gates, test, net, cfg.train_gate_mode())

    state.round = t
    return RoundRecord(
        round=t,
        workers=[
            WorkerRecord(u.worker_id, u.arch.to_text(), u.time_ms, u.accuracy, u.data_size, u.quality, u.computation)
            for u in uploads
        ],
        round_time_ms=max((u.time_ms for u in uploads), default=0.0),
        global_accuracy=gacc,
        events=events,
    )


# -- metrics ----------------------------------------------------------------------------


def _stats(values: Sequence[float]) -> dict[str, float]:
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "variance": float(v.var()), "gap": float(v.max() - v.min())}


def final_worker_accuracies(records: Sequence[RoundRecord]) -> dict[int, float]:
    last: dict[int, float] = {}
    for rec in records:
        for w in rec.workers:
            last[w.worker] = w.accuracy
    return dict(sorted(last.items()))


def fairness_metrics(records: Sequence[RoundRecord]) -> dict[str, dict[str, float]]:
    """Mean / population variance / max-min gap of final per-worker accuracy and
    of each worker's mean simulated local-training time."""
    if not records:
        raise ValueError("fairness_metrics needs at least one round record")
    acc = final_worker_accuracies(records)
    if not acc:
        raise ValueError("no worker completed any round")
    times: dict[int, list[float]] = {}
    for rec in records:
        for w in rec.workers:
            times.setdefault(w.worker, []).append(w.time_ms)
    mean_times = [float(np.mean(times[k])) for k in sorted(times)]
    return {"accuracy": _stats(list(acc.values())), "time": _stats(mean_times)}


def summarize(records: Sequence[RoundRecord], state: ServerState | None, cfg: RunConfig) -> dict[str, Any]:
    comp = [w.computation for r in records for w in r.workers]
    last_g = records[-1].global_accuracy if records else {}
    return {
        "type": "summary",
        "mode": cfg.mode,
        "seed": cfg.seed,
        "rounds": len(records),
        "fairness": fairness_metrics(records) if any(r.workers for r in records) else None,
        "mean_round_time_ms": float(np.mean([r.round_time_ms for r in records])),
        "total_time_ms": float(np.sum([r.round_time_ms for r in records])),
        "final_global_accuracy": last_g,
        "mean_computation": float(np.mean(comp)) if comp else 1.0,
        "aggregate_events": sum(e == "aggregate" for r in records for e in r.events),
        "excluded_events": sum(e.startswith("straggler_excluded") for r in records for e in r.events),
        "predictor_frozen_round": state.predictor_frozen_round if state else None,
    }


@dataclass
class ExperimentResult:
    config: RunConfig
    records: list[RoundRecord]
    summary: dict[str, Any]
    state: ServerState

    def mean_final_accuracy(self) -> float:
        fair = self.summary["fairness"]
        return fair["accuracy"]["mean"] if fair else float("nan")


def make_fleet_and_table(cfg: RunConfig) -> tuple[list[sh.DeviceProfile], sh.LatencyTable]:
    fleet = bench.make_device_fleet(cfg.workers, cfg.speed_spread, cfg.seed, cfg.net, cfg.bound_factor)
    return fleet, sh.build_latency_table(cfg.net, fleet)


def run_experiment(
    cfg: RunConfig,
    benchmark: Benchmark | None = None,
    fleet: Sequence[sh.DeviceProfile] | None = None,
    table: sh.LatencyTable | None = None,
    out_dir: Path | None = None,
) -> ExperimentResult:
    benchmark = benchmark or build_benchmark(cfg)
    if len(benchmark.workers) != cfg.workers:
        raise ConfigError(f"benchmark has {len(benchmark.workers)} workers, config asks for {cfg.workers}")
    if fleet is None or table is None:
        fleet, table = make_fleet_and_table(cfg)
    if len(fleet) != cfg.workers:
        raise ConfigError(f"fleet has {len(fleet)} devices, config asks for {cfg.workers}")
    state = init_state(cfg, benchmark, fleet, table)
    workers = [Worker(k, w, fleet[k]) for k, w in enumerate(benchmark.workers)]
    records = []
    for _ in range(cfg.rounds):
        rec = run_round(state, workers, cfg, benchmark.test)
        log.info("round %d time=%.3fms", rec.round, rec.round_time_ms)
        records.append(rec)
    summary = summarize(records, state, cfg)
    result = ExperimentResult(cfg, records, summary, state)
    if out_dir is not None:
        write_run(result, Path(out_dir))
    return result


def write_run(result: ExperimentResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=False)
    (out_dir / "config.txt").write_text(config_to_text(result.config))
    lines = [r.to_json() for r in result.records]
    lines.append(json.dumps(result.summary, sort_keys=True))
    (out_dir / "rounds.jsonl").write_text("\n".join(lines) + "\n")
    (out_dir / "profiles.txt").write_text("".join(p.to_text() + "\n" for p in result.state.profiles))


def read_run(run_dir: Path) -> tuple[list[RoundRecord], dict[str, Any]]:
    records, summary = [], None
    for line in (Path(run_dir) / "rounds.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if d["type"] == "round":
            records.append(RoundRecord.from_dict(d))
        elif d["type"] == "summary":
            summary = d
    return records, summary
