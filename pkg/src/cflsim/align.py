"""Expand structurally heterogeneous submodel updates to parent shape and average them.

Width expansion scatters each submodel slice back to its original parent
channel indices; depth expansion appends all-zero layers to short groups.  The
stem and the classifier head are never elastic, so they pass through as-is.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from cflsim import nn
from cflsim.errors import StructuralError
from cflsim.nn import ParamSet
from cflsim.supernet import ArchDescriptor, SupernetConfig, _input_selection, layer_prefix, param_shapes

FIXED_KEYS = ("head.b", "head.w", "stem.b", "stem.w")


@dataclass
class GroupedDelta:
    fixed: ParamSet  # stem and head
    groups: list[list[ParamSet]]  # groups[g][d] -> {"w": ..., "b": ...}


@dataclass
class AlignedDelta:
    delta: ParamSet
    source_arch: ArchDescriptor
    data_size: int
    worker_id: int = 0

    def __post_init__(self):
        if self.data_size <= 0:
            raise StructuralError(f"data size must be > 0, got {self.data_size}")


def group_layers(delta: Mapping[str, np.ndarray], arch: ArchDescriptor) -> GroupedDelta:
    expected = {f"{layer_prefix(g, d)}.{s}" for g, d in arch.active_layers() for s in "wb"}
    present = {k for k in delta if k not in FIXED_KEYS}
    if present != expected:
        raise StructuralError(
            f"delta layers inconsistent with arch: missing {sorted(expected - present)}, "
            f"unexpected {sorted(present - expected)}"
        )
    groups = [
        [{"w": delta[f"{layer_prefix(g, d)}.w"], "b": delta[f"{layer_prefix(g, d)}.b"]} for d in range(dep)]
        for g, dep in enumerate(arch.depth)
    ]
    return GroupedDelta({k: delta[k] for k in FIXED_KEYS if k in delta}, groups)


def flatten_groups(grouped: GroupedDelta) -> ParamSet:
    out = dict(grouped.fixed)
    for g, layers in enumerate(grouped.groups):
        for d, layer in enumerate(layers):
            p = layer_prefix(g, d)
            out[f"{p}.w"] = layer["w"]
            out[f"{p}.b"] = layer["b"]
    return dict(sorted(out.items()))


def _check_index(idx: Sequence[int], width: int, what: str) -> np.ndarray:
    arr = np.asarray(idx, dtype=np.intp)
    if len(set(arr.tolist())) != len(arr):
        raise StructuralError(f"{what}: duplicate channel index")
    if arr.size and (arr.min() < 0 or arr.max() >= width):
        raise StructuralError(f"{what}: channel index outside 0..{width - 1}")
    return arr


def expand_width(delta: Mapping[str, np.ndarray], arch: ArchDescriptor, config: SupernetConfig) -> ParamSet:
    """Scatter every active layer into a zero tensor of the parent's width."""
    grouped = group_layers(delta, arch)
    shapes = param_shapes(config)
    out: ParamSet = {k: np.array(v, copy=True) for k, v in grouped.fixed.items()}
    for g, layers in enumerate(grouped.groups):
        for d, layer in enumerate(layers):
            p = layer_prefix(g, d)
            full_w = shapes[f"{p}.w"]
            rows = _check_index(arch.channels[g][d], full_w[0], f"{p} output")
            cols = _check_index(_input_selection(arch, config, g, d), full_w[1], f"{p} input")
            w, b = layer["w"], layer["b"]
            if w.shape != (len(rows), len(cols), *full_w[2:]) or b.shape != (len(rows),):
                raise StructuralError(
                    f"{p}: delta shapes {w.shape}/{b.shape} do not match arch selection "
                    f"({len(rows)}, {len(cols)})"
                )
            big_w = np.zeros(full_w)
            big_w[rows[:, None], cols[None, :]] = w
            big_b = np.zeros(full_w[0])
            big_b[rows] = b
            out[f"{p}.w"] = big_w
            out[f"{p}.b"] = big_b
    return dict(sorted(out.items()))


def expand_depth(delta: Mapping[str, np.ndarray], arch: ArchDescriptor, config: SupernetConfig) -> ParamSet:
    """Pad each group's tail with all-zero parent-shaped layers up to max depth."""
    shapes = param_shapes(config)
    for key in delta:
        if key in FIXED_KEYS:
            continue
        g, d = (int(part[1:]) for part in key.split(".")[:2])
        if g >= config.num_groups or d >= config.max_depth:
            raise StructuralError(f"{key}: group already deeper than max depth {config.max_depth}")
    if any(dep > config.max_depth for dep in arch.depth):
        raise StructuralError(f"arch depth {arch.depth} exceeds max depth {config.max_depth}")
    out = dict(delta)
    for g, dep in enumerate(arch.depth):
        for d in range(dep, config.max_depth):
            p = layer_prefix(g, d)
            out[f"{p}.w"] = np.zeros(shapes[f"{p}.w"])
            out[f"{p}.b"] = np.zeros(shapes[f"{p}.b"])
    return dict(sorted(out.items()))


def align(
    delta: Mapping[str, np.ndarray], arch: ArchDescriptor, config: SupernetConfig, data_size: int, worker_id: int = 0
) -> AlignedDelta:
    """Group, width-expand, depth-expand."""
    expanded = expand_depth(expand_width(delta, arch, config), arch, config)
    nn.check_same_structure(expanded, param_shapes_as_arrays(config), "aligned delta")
    return AlignedDelta(expanded, arch, data_size, worker_id)


def param_shapes_as_arrays(config: SupernetConfig) -> ParamSet:
    return {k: np.empty(s) for k, s in param_shapes(config).items()}


def coverage_mask(arch: ArchDescriptor, config: SupernetConfig) -> ParamSet:
    """1.0 at every parent position the architecture touches, 0.0 elsewhere."""
    ones = {}
    for g, d in arch.active_layers():
        p = layer_prefix(g, d)
        ones[f"{p}.w"] = np.ones(
            (len(arch.channels[g][d]), len(_input_selection(arch, config, g, d)), config.kernel_size, config.kernel_size)
        )
        ones[f"{p}.b"] = np.ones(len(arch.channels[g][d]))
    shapes = param_shapes(config)
    for k in FIXED_KEYS:
        ones[k] = np.ones(shapes[k])
    return expand_depth(expand_width(ones, arch, config), arch, config)


def _canonical(deltas: Sequence[AlignedDelta]) -> list[AlignedDelta]:
    return sorted(deltas, key=lambda a: (a.worker_id, a.data_size, a.source_arch.to_text()))


def aggregation_weights(deltas: Sequence[AlignedDelta]) -> list[float]:
    n = sum(a.data_size for a in deltas)
    return [a.data_size / n for a in deltas]


def aggregate(
    deltas: Sequence[AlignedDelta],
    config: SupernetConfig | None = None,
    variant: Literal["weighted", "coverage"] = "weighted",
) -> ParamSet:
    """Data-size weighted sum of aligned updates, reduced in ascending worker id.

    ``coverage`` divides each position by the data share of the workers that
    actually sampled it instead of by the total (needs ``config``).
    """
    if not deltas:
        raise ValueError("aggregate needs at least one delta")
    ordered = _canonical(deltas)
    ref = ordered[0].delta
    for a in ordered[1:]:
        nn.check_same_structure(ref, a.delta, f"worker {a.worker_id}")
    if variant == "weighted":
        weights = aggregation_weights(ordered)
        out = {k: np.zeros_like(ref[k]) for k in sorted(ref)}
        for w, a in zip(weights, ordered):
            for k in out:
                out[k] += w * a.delta[k]
        return out
    if variant != "coverage":
        raise ValueError(f"unknown aggregation variant {variant!r}")
    if config is None:
        raise ValueError("coverage aggregation needs the supernet config")
    num = {k: np.zeros_like(ref[k]) for k in sorted(ref)}
    den = {k: np.zeros_like(ref[k]) for k in sorted(ref)}
    for a in ordered:
        mask = coverage_mask(a.source_arch, config)
        for k in num:
            num[k] += a.data_size * a.delta[k]
            den[k] += a.data_size * mask[k]
    return {k: np.divide(num[k], den[k], out=np.zeros_like(num[k]), where=den[k] > 0) for k in num}


def apply_global_update(parent: Mapping[str, np.ndarray], delta_t: Mapping[str, np.ndarray]) -> ParamSet:
    """``parent + delta_t``; deltas are new-minus-old, so adding moves toward the local models."""
    nn.check_same_structure(parent, delta_t, "global update")
    return {k: parent[k] + delta_t[k] for k in sorted(parent)}


def gather_submodel(aligned: Mapping[str, np.ndarray], arch: ArchDescriptor, config: SupernetConfig) -> ParamSet:
    """Inverse of width expansion: read the arch's positions back out."""
    from cflsim.supernet import extract_submodel

    return extract_submodel(aligned, arch, config)


# -- serialization -------------------------------------------------------------------


def dump_aligned(ad: AlignedDelta) -> bytes:
    arch = ad.source_arch.to_text().replace("\n", ";")
    header = f"n_k={ad.data_size} worker={ad.worker_id} arch={arch}\n".encode("utf-8")
    return header + nn.dump_params(ad.delta)


def load_aligned(blob: bytes) -> AlignedDelta:
    nl = blob.index(b"\n")
    header = blob[:nl].decode("utf-8")
    n_part, w_part, arch_part = header.split(" ", 2)
    arch = ArchDescriptor.from_text(arch_part.split("=", 1)[1].replace(";", "\n"))
    return AlignedDelta(nn.load_params(blob[nl + 1 :]), arch, int(n_part.split("=")[1]), int(w_part.split("=")[1]))
