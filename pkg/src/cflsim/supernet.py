"""Elastic gated parent model: stem, G residual groups, classifier head.

Parameter ids::

    stem.w [S, C, k, k]         stem.b [S]
    g{g}.l{d}.w [W_g, Cin, k, k] g{g}.l{d}.b [W_g]
    head.w [classes, W_last*h*w] head.b [classes]   (flattened last feature map)

The first layer of each group is mandatory (it carries the group's stride and
width change); later layers compute ``proj(x) + relu(conv(x) + b)`` and may be
skipped by a gate, leaving ``proj(x)``.  ``proj`` maps the previous layer's
parent channel indices onto the current ones (identity when they agree).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np

from cflsim import nn
from cflsim.errors import ConfigError, StructuralError
from cflsim.nn import ParamSet, Var

Mode = Literal["all-on", "greedy", "sample", "soft"]

EXECUTE, SKIP = 0, 1


@dataclass(frozen=True)
class SupernetConfig:
    num_groups: int = 4
    max_depth: int = 3
    widths: tuple[int, ...] = (16, 32, 32, 64)
    kernel_size: int = 3
    input_shape: tuple[int, int, int] = (1, 8, 8)
    num_classes: int = 10
    stem_width: int = 8
    strides: tuple[int, ...] = (1, 2, 1, 2)
    ratios: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.num_groups < 1:
            raise ConfigError(f"num_groups must be >= 1, got {self.num_groups}")
        if self.max_depth < 1:
            raise ConfigError(f"max_depth must be >= 1, got {self.max_depth}")
        if len(self.widths) != self.num_groups or len(self.strides) != self.num_groups:
            raise ConfigError(
                f"widths {self.widths} and strides {self.strides} need one entry per group ({self.num_groups})"
            )
        if any(w <= 0 for w in self.widths) or self.stem_width <= 0:
            raise ConfigError(f"widths must be positive, got {self.widths} / stem {self.stem_width}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if any(s < 1 for s in self.strides):
            raise ConfigError(f"strides must be >= 1, got {self.strides}")
        if not self.ratios or sorted(set(self.ratios)) != list(self.ratios) or not 0 < self.ratios[0]:
            raise ConfigError(f"ratios must be increasing and positive, got {self.ratios}")
        if self.ratios[-1] != 1.0:
            raise ConfigError("the largest width ratio must be 1.0")
        counts = [[channel_count(r, w) for r in self.ratios] for w in self.widths]
        if any(len(set(c)) != len(c) for c in counts):
            raise ConfigError(f"widths {self.widths} too small to distinguish ratios {self.ratios}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    def layer_in_width(self, g: int, d: int) -> int:
        if d > 0:
            return self.widths[g]
        return self.widths[g - 1] if g > 0 else self.stem_width

    def layer_stride(self, g: int, d: int) -> int:
        return self.strides[g] if d == 0 else 1

    def group_spatial(self) -> list[tuple[int, int]]:
        """Output spatial size of each group."""
        _, h, w = self.input_shape
        out = []
        for s in self.strides:
            h, w = -(-h // s), -(-w // s)
            out.append((h, w))
        return out

    def head_area(self) -> int:
        h, w = self.group_spatial()[-1]
        return h * w

    def layer_keys(self) -> list[tuple[int, int]]:
        return [(g, d) for g in range(self.num_groups) for d in range(self.max_depth)]


def toy_config(**overrides) -> SupernetConfig:
    """Three-group 8x8 net small enough for full federated runs on one core."""
    base = dict(num_groups=3, max_depth=2, widths=(8, 16, 16), strides=(1, 2, 2), stem_width=8)
    base.update(overrides)
    return SupernetConfig(**base)


def channel_count(ratio: float, width: int) -> int:
    return max(1, int(round(ratio * width)))


def layer_prefix(g: int, d: int) -> str:
    return f"g{g}.l{d}"


def param_shapes(config: SupernetConfig) -> dict[str, tuple[int, ...]]:
    k = config.kernel_size
    c = config.input_shape[0]
    shapes = {
        "stem.w": (config.stem_width, c, k, k),
        "stem.b": (config.stem_width,),
        "head.w": (config.num_classes, config.widths[-1] * config.head_area()),
        "head.b": (config.num_classes,),
    }
    for g, d in config.layer_keys():
        p = layer_prefix(g, d)
        shapes[f"{p}.w"] = (config.widths[g], config.layer_in_width(g, d), k, k)
        shapes[f"{p}.b"] = (config.widths[g],)
    return dict(sorted(shapes.items()))


def init_parent(config: SupernetConfig, seed: int) -> ParamSet:
    rng = np.random.default_rng(seed)
    out: ParamSet = {}
    for key, shape in param_shapes(config).items():
        if key.endswith(".b"):
            out[key] = np.zeros(shape)
        elif key == "head.w":
            out[key] = rng.normal(0.0, np.sqrt(1.0 / shape[1]), size=shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            scale = np.sqrt(2.0 / fan_in)
            if not key.startswith("stem") and not key.endswith("l0.w"):
                scale *= 0.5  # residual branches start small
            out[key] = rng.normal(0.0, scale, size=shape)
    return out


# -- architecture descriptors ------------------------------------------------


@dataclass(frozen=True)
class ArchDescriptor:
    depth: tuple[int, ...]
    channels: tuple[tuple[tuple[int, ...], ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "depth", tuple(int(d) for d in self.depth))
        object.__setattr__(
            self,
            "channels",
            tuple(tuple(tuple(int(i) for i in sel) for sel in grp) for grp in self.channels),
        )

    def validate(self, config: SupernetConfig) -> None:
        if len(self.depth) != config.num_groups or len(self.channels) != config.num_groups:
            raise StructuralError(
                f"arch has {len(self.depth)} groups / {len(self.channels)} channel groups, "
                f"config has {config.num_groups}"
            )
        for g, (dep, grp) in enumerate(zip(self.depth, self.channels)):
            if not 1 <= dep <= config.max_depth:
                raise StructuralError(f"group {g}: depth {dep} outside 1..{config.max_depth}")
            if len(grp) != dep:
                raise StructuralError(f"group {g}: {len(grp)} channel lists for depth {dep}")
            for d, sel in enumerate(grp):
                if not sel:
                    raise StructuralError(f"layer g{g}.l{d}: empty channel list")
                if any(b <= a for a, b in zip(sel, sel[1:])):
                    raise StructuralError(f"layer g{g}.l{d}: channel indices not strictly increasing")
                if sel[0] < 0 or sel[-1] >= config.widths[g]:
                    raise StructuralError(
                        f"layer g{g}.l{d}: channel index out of range 0..{config.widths[g] - 1}"
                    )

    def active_layers(self) -> list[tuple[int, int]]:
        return [(g, d) for g, dep in enumerate(self.depth) for d in range(dep)]

    def num_layers(self) -> int:
        """Convolution layers including the stem."""
        return 1 + sum(self.depth)

    def to_text(self) -> str:
        lines = []
        for g, (dep, grp) in enumerate(zip(self.depth, self.channels)):
            ch = "|".join(",".join(str(i) for i in sel) for sel in grp)
            lines.append(f"g={g} d={dep} ch={ch}")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "ArchDescriptor":
        depth, channels = [], []
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        for expected, line in enumerate(lines):
            fields = dict(tok.split("=", 1) for tok in line.split())
            if int(fields["g"]) != expected:
                raise StructuralError(f"arch text: expected g={expected}, got {fields['g']}")
            depth.append(int(fields["d"]))
            channels.append(tuple(tuple(int(i) for i in part.split(",")) for part in fields["ch"].split("|")))
        return cls(tuple(depth), tuple(channels))


def full_arch(config: SupernetConfig) -> ArchDescriptor:
    return ArchDescriptor(
        (config.max_depth,) * config.num_groups,
        tuple(tuple(tuple(range(w)) for _ in range(config.max_depth)) for w in config.widths),
    )


def _input_selection(arch: ArchDescriptor, config: SupernetConfig, g: int, d: int) -> tuple[int, ...]:
    if d > 0:
        return arch.channels[g][d - 1]
    if g == 0:
        return tuple(range(config.stem_width))
    return arch.channels[g - 1][arch.depth[g - 1] - 1]


def extract_submodel(parent: Mapping[str, np.ndarray], arch: ArchDescriptor, config: SupernetConfig) -> ParamSet:
    """Slice the parameters addressed by ``arch``; stem and head are copied whole."""
    arch.validate(config)
    sub: ParamSet = {k: np.array(parent[k], copy=True) for k in ("stem.w", "stem.b", "head.w", "head.b")}
    for g, d in arch.active_layers():
        p = layer_prefix(g, d)
        out_idx = np.asarray(arch.channels[g][d], dtype=np.intp)
        in_idx = np.asarray(_input_selection(arch, config, g, d), dtype=np.intp)
        w = parent[f"{p}.w"]
        sub[f"{p}.w"] = w[out_idx][:, in_idx]
        sub[f"{p}.b"] = parent[f"{p}.b"][out_idx]
    return dict(sorted(sub.items()))


# -- gates -------------------------------------------------------------------


@dataclass
class GatePolicy:
    """Per skippable layer: pooled input (parent width) -> (execute, skip) logits."""

    params: ParamSet
    baseline: float | None = None
    decay: float = 0.9

    def copy(self) -> "GatePolicy":
        return GatePolicy(nn.copy_params(self.params), self.baseline, self.decay)


def skippable_layers(config: SupernetConfig) -> list[tuple[int, int]]:
    return [(g, d) for g, d in config.layer_keys() if d > 0]


def init_gates(config: SupernetConfig, seed: int, exec_bias: float = 1.0) -> GatePolicy:
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for g, d in skippable_layers(config):
        p = f"gate.{layer_prefix(g, d)}"
        params[f"{p}.w"] = rng.normal(0.0, 0.01, size=(2, config.widths[g]))
        params[f"{p}.b"] = np.array([exec_bias, 0.0])
    return GatePolicy(dict(sorted(params.items())))


# -- forward -----------------------------------------------------------------


@dataclass
class GateTrace:
    """What each gate saw and decided during one forward pass."""

    layers: list[tuple[int, int]] = field(default_factory=list)
    features: list[np.ndarray] = field(default_factory=list)  # [N, W_g] parent-width pooled input
    probs: list[np.ndarray] = field(default_factory=list)  # [N, 2]
    actions: list[np.ndarray] = field(default_factory=list)  # [N] of EXECUTE / SKIP


def _projection(prev: tuple[int, ...], cur: tuple[int, ...]) -> tuple[list[int], list[int]] | None:
    if prev == cur:
        return None
    pos = {c: i for i, c in enumerate(prev)}
    src, dst = [], []
    for j, c in enumerate(cur):
        if c in pos:
            src.append(pos[c])
            dst.append(j)
    return src, dst


def _project(x: Var, prev: tuple[int, ...], cur: tuple[int, ...]) -> Var:
    proj = _projection(prev, cur)
    if proj is None:
        return x
    src, dst = proj
    return nn.scatter(nn.take(x, src, axis=1), dst, axis=1, size=len(cur))


def forward_graph(
    params: Mapping[str, Var | np.ndarray],
    arch: ArchDescriptor,
    config: SupernetConfig,
    x: np.ndarray,
    gates: Mapping[str, Var | np.ndarray] | None = None,
    mode: Mode = "all-on",
    rng: np.random.Generator | None = None,
    trace: GateTrace | None = None,
) -> tuple[Var, np.ndarray]:
    """Differentiable forward of a submodel whose parameters were extracted by ``arch``.

    Returns logits and a boolean ``[N, num_layers]`` execution mask (stem first).
    """
    if x.ndim != 4 or tuple(x.shape[1:]) != config.input_shape:
        raise StructuralError(f"input shape {x.shape[1:]} does not match {config.input_shape}")
    if mode != "all-on" and gates is None:
        raise StructuralError(f"mode {mode!r} needs gate parameters")
    if mode == "sample" and rng is None:
        raise StructuralError("mode 'sample' needs an rng")
    p = {k: nn.as_var(v) for k, v in params.items()}
    n = x.shape[0]
    mask = np.ones((n, arch.num_layers()), dtype=bool)

    h = nn.relu(nn.conv2d(x, p["stem.w"]) + nn.reshape(p["stem.b"], (1, -1, 1, 1)))
    col = 1
    prev: tuple[int, ...] = tuple(range(config.stem_width))
    for g in range(config.num_groups):
        for d in range(arch.depth[g]):
            pre = layer_prefix(g, d)
            cur = arch.channels[g][d]
            branch = nn.relu(
                nn.conv2d(h, p[f"{pre}.w"], config.layer_stride(g, d)) + nn.reshape(p[f"{pre}.b"], (1, -1, 1, 1))
            )
            if d == 0:
                h = branch
            elif mode == "all-on":
                h = _project(h, prev, cur) + branch
            else:
                gw = nn.as_var(gates[f"gate.{pre}.w"])
                gb = nn.as_var(gates[f"gate.{pre}.b"])
                pooled = nn.scatter(nn.global_avg_pool(h), prev, axis=1, size=config.widths[g])
                logits = nn.matmul(pooled, _transpose(gw)) + gb
                probs = nn.softmax(logits)
                if mode == "soft":
                    p_exec = nn.reshape(nn.take(probs, [EXECUTE], axis=1), (n, 1, 1, 1))
                    h = _project(h, prev, cur) + branch * p_exec
                    actions = np.full(n, EXECUTE)
                else:
                    if mode == "greedy":
                        actions = np.where(logits.value[:, EXECUTE] >= logits.value[:, SKIP], EXECUTE, SKIP)
                    elif mode == "sample":
                        actions = np.where(rng.random(n) < probs.value[:, EXECUTE], EXECUTE, SKIP)
                    else:
                        raise StructuralError(f"unknown gate mode {mode!r}")
                    keep = (actions == EXECUTE).astype(float).reshape(n, 1, 1, 1)
                    h = _project(h, prev, cur) + branch * keep
                    mask[:, col] = actions == EXECUTE
                if trace is not None:
                    trace.layers.append((g, d))
                    trace.features.append(pooled.value)
                    trace.probs.append(probs.value)
                    trace.actions.append(actions)
            prev = cur
            col += 1
    feat = nn.scatter(h, prev, axis=1, size=config.widths[-1])
    feat = nn.reshape(feat, (n, -1))
    logits = nn.matmul(feat, _transpose(p["head.w"])) + p["head.b"]
    return logits, mask


def _transpose(w: Var) -> Var:
    return nn.Var(w.value.T, (w,), lambda g: (g.T,))


def gated_forward(
    model: Mapping[str, np.ndarray],
    arch: ArchDescriptor,
    config: SupernetConfig,
    gates: GatePolicy | None,
    x: np.ndarray,
    mode: Mode = "greedy",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Logits and ``[N, num_layers]`` executed mask for a batch."""
    logits, mask = forward_graph(model, arch, config, x, gates.params if gates else None, mode, rng)
    return logits.value, mask


def predict(model, arch, config, gates, x, mode: Mode = "greedy", batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    preds, masks = [], []
    for i in range(0, len(x), batch):
        logits, mask = gated_forward(model, arch, config, gates, x[i : i + batch], mode)
        preds.append(logits.argmax(axis=1))
        masks.append(mask)
    return np.concatenate(preds), np.concatenate(masks)


def computation_percentage(executed_masks) -> float:
    """Mean fraction of layers actually computed per sample."""
    rows = [np.asarray(m, dtype=bool) for m in executed_masks]
    if not rows:
        raise ValueError("computation_percentage needs at least one mask")
    fractions = [r.sum() / r.size for r in rows]
    return float(np.mean(fractions))


def mandatory_fraction(arch: ArchDescriptor) -> float:
    return (1 + len(arch.depth)) / arch.num_layers()


# -- hybrid gate training ----------------------------------------------------


@dataclass
class GateStats:
    loss: float = 0.0
    mean_reward: float = 0.0
    skip_fraction: float = 0.0
    accuracy: float = 0.0


def hybrid_gate_update(
    model: Mapping[str, np.ndarray],
    gates: GatePolicy,
    batch: tuple[np.ndarray, np.ndarray],
    phase: Literal["warmup", "reinforce"],
    alpha: float,
    config: SupernetConfig,
    arch: ArchDescriptor | None = None,
    lr: float = 0.1,
    rng: np.random.Generator | None = None,
) -> tuple[GatePolicy, GateStats]:
    """One gate update on a batch; the model parameters are left alone.

    ``warmup`` descends the task loss through soft (probability-weighted)
    execution.  ``reinforce`` samples hard decisions and ascends the
    score-function estimate of the reward ``correct + alpha * skipped/skippable``
    minus an EMA baseline.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    arch = arch or full_arch(config)
    x, y = batch
    if phase == "warmup":

        def loss_fn(gv):
            logits, _ = forward_graph(model, arch, config, x, gv, "soft")
            return nn.softmax_cross_entropy(logits, y)

        loss, grads = nn.value_and_grad(loss_fn, gates.params)
        new = GatePolicy(nn.sgd_step(gates.params, grads, lr), gates.baseline, gates.decay)
        return new, GateStats(loss=loss)
    if phase != "reinforce":
        raise ConfigError(f"unknown phase {phase!r}")
    if rng is None:
        raise ConfigError("reinforce phase needs an rng")
    trace = GateTrace()
    logits, _ = forward_graph(model, arch, config, x, gates.params, "sample", rng, trace)
    new, stats = reinforce_step(gates, trace, logits.value, y, alpha, lr)
    return new, stats


def reinforce_step(
    gates: GatePolicy, trace: GateTrace, logits: np.ndarray, y: np.ndarray, alpha: float, lr: float
) -> tuple[GatePolicy, GateStats]:
    correct = (logits.argmax(axis=1) == y).astype(float)
    if trace.actions:
        skipped = np.stack([a == SKIP for a in trace.actions], axis=1).mean(axis=1)
    else:
        skipped = np.zeros(len(y))
    reward = correct + alpha * skipped
    baseline = float(reward.mean()) if gates.baseline is None else gates.baseline
    adv = reward - baseline
    n = len(y)
    params = dict(gates.params)
    for (g, d), feat, probs, actions in zip(trace.layers, trace.features, trace.probs, trace.actions):
        pre = f"gate.{layer_prefix(g, d)}"
        score = -probs
        score[np.arange(n), actions] += 1.0  # d log pi(a) / d logits
        weighted = score * adv[:, None]
        params[f"{pre}.w"] = params[f"{pre}.w"] + lr * (weighted.T @ feat) / n
        params[f"{pre}.b"] = params[f"{pre}.b"] + lr * weighted.sum(axis=0) / n
    new_baseline = gates.decay * baseline + (1.0 - gates.decay) * float(reward.mean())
    stats = GateStats(
        mean_reward=float(reward.mean()), skip_fraction=float(skipped.mean()), accuracy=float(correct.mean())
    )
    return GatePolicy(params, new_baseline, gates.decay), stats


def train_gated_parent(
    model: Mapping[str, np.ndarray],
    gates: GatePolicy,
    x: np.ndarray,
    y: np.ndarray,
    config: SupernetConfig,
    warmup_epochs: int = 3,
    reinforce_epochs: int = 2,
    alpha: float = 0.1,
    lr: float = 0.05,
    gate_lr: float = 0.5,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[ParamSet, GatePolicy, list[GateStats]]:
    """Server-side pre-training: soft warm-up of model and gates, then hybrid RL.

    During warm-up model and gate parameters descend the task loss through
    soft gating together.  In the reinforce epochs the model is trained on the
    sampled hard decisions while gates follow the score-function update.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    arch = full_arch(config)
    rng = np.random.default_rng(seed)
    model = nn.copy_params(model)
    gates = gates.copy()
    history: list[GateStats] = []
    for epoch in range(warmup_epochs + reinforce_epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            xb, yb = x[idx], y[idx]
            if epoch < warmup_epochs:
                joint = {**model, **gates.params}

                def loss_fn(v):
                    logits, _ = forward_graph(v, arch, config, xb, v, "soft")
                    return nn.softmax_cross_entropy(logits, yb)

                loss, grads = nn.value_and_grad(loss_fn, joint)
                model = nn.sgd_step(model, {k: grads[k] for k in model}, lr)
                gates = GatePolicy(
                    nn.sgd_step(gates.params, {k: grads[k] for k in gates.params}, lr), gates.baseline, gates.decay
                )
                history.append(GateStats(loss=loss))
            else:
                trace = GateTrace()
                seen: list[np.ndarray] = []

                def loss_fn(v, trace=trace, seen=seen):
                    logits, _ = forward_graph(v, arch, config, xb, gates.params, "sample", rng, trace)
                    seen.append(logits.value)
                    return nn.softmax_cross_entropy(logits, yb)

                loss, grads = nn.value_and_grad(loss_fn, model)
                model = nn.sgd_step(model, grads, lr)
                gates, stats = reinforce_step(gates, trace, seen[0], yb, alpha, gate_lr)
                stats.loss = loss
                history.append(stats)
    return model, gates, history
