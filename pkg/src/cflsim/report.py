"""Plot-data emitters: per-round series and fairness summaries as CSV text."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from cflsim import fl
from cflsim.errors import ReportError


@dataclass
class ReportTable:
    """Named equal-length columns. Non-numeric cells are allowed only in label columns."""

    columns: dict[str, list] = field(default_factory=dict)

    def add(self, name: str, values: Sequence) -> None:
        if name in self.columns:
            raise ReportError(f"duplicate column {name!r}")
        values = list(values)
        if self.columns:
            n = len(next(iter(self.columns.values())))
            if len(values) != n:
                raise ReportError(f"column {name!r} has {len(values)} rows, table has {n}")
        self.columns[name] = values

    def num_rows(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in zip(*self.columns.values()):
            w.writerow([_cell(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ReportTable":
        rows = list(csv.reader(io.StringIO(text)))
        table = cls()
        if not rows:
            return table
        for j, name in enumerate(rows[0]):
            table.add(name, [_parse_cell(r[j]) for r in rows[1:]])
        return table


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_cell(s: str):
    try:
        return float(s)
    except ValueError:
        return s


@dataclass
class LoadedRun:
    path: Path
    config: fl.RunConfig
    records: list[fl.RoundRecord]
    summary: dict

    @property
    def label(self) -> str:
        return f"{self.config.mode}_s{self.config.seed}"


def load_run(run_dir: Path) -> LoadedRun:
    run_dir = Path(run_dir)
    for name in ("config.txt", "rounds.jsonl"):
        if not (run_dir / name).is_file():
            raise FileNotFoundError(f"{run_dir / name} is missing")
    cfg = fl.parse_config_text((run_dir / "config.txt").read_text())
    records, summary = fl.read_run(run_dir)
    if summary is None or len(records) != summary["rounds"]:
        raise ReportError(f"{run_dir} has an incomplete log")
    return LoadedRun(run_dir, cfg, records, summary)


def _mean_worker(rec: fl.RoundRecord, attr: str) -> float:
    vals = [getattr(w, attr) for w in rec.workers]
    return float(np.mean(vals)) if vals else float("nan")


def build_tables(runs: Sequence[LoadedRun]) -> dict[str, ReportTable]:
    if not runs:
        raise ReportError("no runs given")
    lengths = {len(r.records) for r in runs}
    if len(lengths) != 1:
        raise ReportError(f"runs have mismatched lengths {sorted(lengths)}")
    runs = sorted(runs, key=lambda r: (r.config.seed, fl.MODES.index(r.config.mode), str(r.path)))
    labels = [r.label for r in runs]
    if len(set(labels)) != len(labels):
        raise ReportError(f"duplicate (mode, seed) pairs among {labels}")
    rounds = [rec.round for rec in runs[0].records]

    acc, time, comp = ReportTable(), ReportTable(), ReportTable()
    for t in (acc, time, comp):
        t.add("round", rounds)
    for r in runs:
        acc.add(f"{r.label}_worker_acc", [_mean_worker(rec, "accuracy") for rec in r.records])
        acc.add(
            f"{r.label}_global_acc",
            [float(np.mean(list(rec.global_accuracy.values()))) if rec.global_accuracy else float("nan") for rec in r.records],
        )
        time.add(f"{r.label}_time_ms", [rec.round_time_ms for rec in r.records])
        comp.add(f"{r.label}_computation", [_mean_worker(rec, "computation") for rec in r.records])

    by_key = {(r.config.mode, r.config.seed): r for r in runs}
    for seed in sorted({r.config.seed for r in runs}):
        c, u = by_key.get(("cfl", seed)), by_key.get(("uniform-fl", seed))
        if c and u:
            time.add(
                f"time_ratio_s{seed}",
                [a.round_time_ms / b.round_time_ms for a, b in zip(c.records, u.records)],
            )

    fair = ReportTable()
    fair.add("run", labels)
    fair.add("mode", [r.config.mode for r in runs])
    fair.add("seed", [r.config.seed for r in runs])
    metrics = [fl.fairness_metrics(r.records) for r in runs]
    for kind in ("accuracy", "time"):
        for stat in ("mean", "variance", "gap"):
            fair.add(f"{kind}_{stat}", [m[kind][stat] for m in metrics])
    return {"accuracy": acc, "time": time, "computation": comp, "fairness": fair}


def write_tables(tables: dict[str, ReportTable], out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, table in tables.items():
        p = out_dir / f"{name}.csv"
        p.write_text(table.to_csv())
        paths.append(p)
    return paths


def cmd_report(run_dirs: Sequence[Path], out_dir: Path) -> list[Path]:
    runs = [load_run(Path(d)) for d in run_dirs]
    return write_tables(build_tables(runs), Path(out_dir))
