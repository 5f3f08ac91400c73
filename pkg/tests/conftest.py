import time

import numpy as np
import pytest
from hypothesis import settings

from cflsim import supernet as sn

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def random_arch(config: sn.SupernetConfig, rng: np.random.Generator) -> sn.ArchDescriptor:
    """Uniform depth, any nonempty sorted channel subset per active slot."""
    depth, channels = [], []
    for w in config.widths:
        d = int(rng.integers(1, config.max_depth + 1))
        depth.append(d)
        grp = []
        for _ in range(d):
            n = int(rng.integers(1, w + 1))
            grp.append(tuple(sorted(int(i) for i in rng.choice(w, size=n, replace=False))))
        channels.append(tuple(grp))
    return sn.ArchDescriptor(tuple(depth), tuple(channels))


@pytest.fixture
def toy():
    return sn.toy_config()


@pytest.fixture
def tiny():
    """Small enough for finite differences."""
    return sn.SupernetConfig(
        num_groups=2, max_depth=2, widths=(4, 4), strides=(1, 2), stem_width=3, input_shape=(1, 4, 4), num_classes=3
    )


from cflsim import fl  # noqa: E402


def small_cfg(**kw) -> fl.RunConfig:
    """Seconds-scale run: toy net, four workers, few rounds."""
    base = dict(
        net=sn.toy_config(), workers=4, rounds=3, train_samples=400, test_samples=100, local_epochs=1, pretrain_epochs=1, reinforce_epochs=1
    )
    base.update(kw)
    return fl.RunConfig(**base)


def toy_run_cfg(mode: str, seed: int, **kw) -> fl.RunConfig:
    """The K=8, T=30 toy setting used for the directional checks."""
    base = dict(
        net=sn.toy_config(), mode=mode, seed=seed, workers=8, rounds=30, train_samples=4800, test_samples=300, local_epochs=1
    )
    base.update(kw)
    return fl.RunConfig(**base)


_TOY_RUNS: dict = {}
TOY_RUN_SECONDS: dict = {}


def toy_run(mode: str, seed: int) -> fl.ExperimentResult:
    """Memoized across the session so several checks can share the expensive runs."""
    key = (mode, seed)
    if key not in _TOY_RUNS:
        t0 = time.perf_counter()
        _TOY_RUNS[key] = fl.run_experiment(toy_run_cfg(mode, seed))
        TOY_RUN_SECONDS[key] = time.perf_counter() - t0
    return _TOY_RUNS[key]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
