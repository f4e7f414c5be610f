"""Training loop: per-sample forward and backward passes, batched SGD, evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Sample
from .forward import SimulationError, simulate
from .gradients import DegenerateDenominatorError, backward
from .loss import LossSpec, predict, sample_loss
from .network import GradientSet, InitRanges, Parameters, Topology, format_handle, init_parameters

log = logging.getLogger(__name__)


class Mode(str, Enum):
    WEIGHTS = "weights"
    DELAYS = "delays"
    FULL = "full"

    @property
    def trains_delays(self) -> bool:
        return self is not Mode.WEIGHTS

    @property
    def trains_adaptation(self) -> bool:
        return self is Mode.FULL


def config_problems(
    *, eta_w=1e-3, eta_d=1e-3, eta_A=1e-3, epochs=1, batch=1, workers=1, test_fraction=0.2,
    d_max=None, A_max=None, **_,
) -> list[str]:
    """All violated training-config constraints, as messages."""
    out = []
    for name, v in (("eta_w", eta_w), ("eta_d", eta_d), ("eta_A", eta_A)):
        if not (v >= 0 and math.isfinite(v)):
            out.append(f"{name} must be a finite value >= 0, got {v}")
    if epochs < 1:
        out.append(f"epochs must be >= 1, got {epochs}")
    if batch < 1:
        out.append(f"batch must be >= 1, got {batch}")
    if workers < 1:
        out.append(f"workers must be >= 1, got {workers}")
    if not 0 < test_fraction < 1:
        out.append(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if d_max is not None and not d_max >= 0:
        out.append(f"d_max must be >= 0, got {d_max}")
    if A_max is not None and not A_max >= 0:
        out.append(f"A_max must be >= 0, got {A_max}")
    return out


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.FULL
    eta_w: float = 1e-3
    eta_d: float = 1e-3
    eta_A: float = 1e-3
    epochs: int = 20
    batch: int = 1
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)
    d_max: float | None = None     # default window_T / 2
    A_max: float | None = None     # default 10 * theta0
    test_fraction: float = 0.2
    workers: int = 1
    strict: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        problems = self.problems()
        if problems:
            raise ValueError("invalid training config: " + "; ".join(problems))

    def problems(self) -> list[str]:
        return config_problems(**{f.name: getattr(self, f.name) for f in fields(self)})

    def bounds(self, params: Parameters) -> tuple[float, float]:
        d_max = params.window_T / 2 if self.d_max is None else self.d_max
        # delays must stay strictly inside the window
        d_max = min(d_max, float(np.nextafter(params.window_T, 0.0)))
        A_max = 10 * params.theta0 if self.A_max is None else self.A_max
        return d_max, A_max

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value, "eta_w": self.eta_w, "eta_d": self.eta_d,
            "eta_A": self.eta_A, "epochs": self.epochs, "batch": self.batch, "seed": self.seed,
            "loss": self.loss.to_dict(), "d_max": self.d_max, "A_max": self.A_max,
            "test_fraction": self.test_fraction, "workers": self.workers, "strict": self.strict,
        }

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        kw = dict(data)
        kw["loss"] = LossSpec.from_dict(kw["loss"])
        return cls(**kw)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    mean_A: list[float]          # per layer, averaged over its neurons
    mean_spikes: list[float]     # per non-input layer, spikes per sample
    n_jump: int
    n_near_degenerate: int
    n_failed: int
    wall_time: float = 0.0

    CSV_COLUMNS = (
        "epoch", "train_loss", "train_accuracy", "test_loss", "test_accuracy", "mean_A",
        "mean_spikes", "n_jump", "n_near_degenerate", "n_failed",
    )

    def csv_row(self) -> list[str]:
        def fl(v):
            return repr(float(v))
        return [
            str(self.epoch), fl(self.train_loss), fl(self.train_accuracy), fl(self.test_loss),
            fl(self.test_accuracy), ";".join(fl(v) for v in self.mean_A),
            ";".join(fl(v) for v in self.mean_spikes), str(self.n_jump),
            str(self.n_near_degenerate), str(self.n_failed),
        ]


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    confusion: np.ndarray          # [true, predicted]
    mean_spikes: list[float]
    n_failed: int = 0

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "mean_loss": self.mean_loss,
            "confusion": self.confusion.tolist(), "mean_spikes": self.mean_spikes,
            "n_failed": self.n_failed,
        }


def sgd_step(params: Parameters, grads: GradientSet, config: TrainConfig) -> Parameters:
    bad = grads.first_nonfinite()
    if bad is not None:
        raise FloatingPointError(f"non-finite gradient for {format_handle(bad)}")
    d_max, A_max = config.bounds(params)
    w = tuple(w - config.eta_w * g for w, g in zip(params.w, grads.g_w))
    d, A = params.d, params.A
    if config.mode.trains_delays:
        d = tuple(np.clip(d - config.eta_d * g, 0.0, d_max) for d, g in zip(params.d, grads.g_d))
    if config.mode.trains_adaptation:
        A = tuple(np.clip(a - config.eta_A * g, 0.0, A_max) for a, g in zip(params.A, grads.g_A))
    return params.replace(w=w, d=d, A=A)


# ---------------------------------------------------------------------------
# per-sample work (module level so it pickles for worker processes)

_FAILURES = (SimulationError, DegenerateDenominatorError)


def sample_gradient(params: Parameters, sample: Sample, loss: LossSpec):
    """``(GradientSet, spike counts)``, or ``(None, message)`` for a degenerate sample."""
    try:
        trace = simulate(params, sample.inputs)
        value, adj = sample_loss(trace, loss, sample.label, sample.targets)
        g = backward(trace, adj)
    except _FAILURES as err:
        return None, str(err)
    g.loss_value = value
    return g, [int(c.sum()) for c in trace.spike_counts()[1:]]


def sample_eval(params: Parameters, sample: Sample, loss: LossSpec):
    try:
        trace = simulate(params, sample.inputs)
    except SimulationError as err:
        return None, str(err)
    value, _ = sample_loss(trace, loss, sample.label, sample.targets)
    return (predict(trace), value, [int(c.sum()) for c in trace.spike_counts()[1:]]), None


def _star(fn_args):
    fn, args = fn_args
    return fn(*args)


class _Runner:
    """Maps per-sample jobs in order, in-process or over a worker pool."""

    def __init__(self, workers: int):
        self.pool = ProcessPoolExecutor(workers) if workers > 1 else None

    def map(self, fn: Callable, arg_lists: Sequence[tuple]) -> list:
        if self.pool is None:
            return [fn(*a) for a in arg_lists]
        return list(self.pool.map(_star, [(fn, a) for a in arg_lists]))

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def evaluate(
    samples: Sequence[Sample], params: Parameters, loss: LossSpec, n_classes: int | None = None,
    runner: _Runner | None = None,
) -> EvalResult:
    """Accuracy of earliest-first-spike prediction, mean loss and confusion counts.

    Samples whose simulation fails count as wrong, are left out of the mean
    loss and are tallied in ``n_failed``.
    """
    K = n_classes or params.topology.n_outputs
    own = runner is None
    runner = runner or _Runner(1)
    try:
        results = runner.map(sample_eval, [(params, s, loss) for s in samples])
    finally:
        if own:
            runner.close()
    conf = np.zeros((K, K), dtype=int)
    losses, spikes, failed, correct = [], [], 0, 0
    for s, (res, err) in zip(samples, results):
        if res is None:
            failed += 1
            continue
        pred, value, counts = res
        conf[s.label, pred] += 1
        correct += pred == s.label
        losses.append(value)
        spikes.append(counts)
    n = len(samples)
    return EvalResult(
        correct / n if n else 0.0,
        float(np.mean(losses)) if losses else math.nan,
        conf,
        np.mean(spikes, axis=0).tolist() if spikes else [],
        failed,
    )


def split_dataset(dataset: Dataset, config: TrainConfig) -> tuple[list[Sample], list[Sample]]:
    """Designated test set if present, else a seeded 80/20 split."""
    if dataset.test is not None:
        return list(dataset.samples), list(dataset.test)
    rng = np.random.default_rng([config.seed, 0x5EED])
    perm = rng.permutation(len(dataset))
    n_test = max(1, int(round(config.test_fraction * len(dataset))))
    if n_test >= len(dataset):
        raise ValueError("dataset too small for a held-out split")
    test = [dataset.samples[k] for k in np.sort(perm[:n_test])]
    train = [dataset.samples[k] for k in np.sort(perm[n_test:])]
    return train, test


def train(
    dataset: Dataset,
    params: Parameters,
    config: TrainConfig,
    on_epoch: Callable[[EpochMetrics, Parameters], None] | None = None,
) -> tuple[Parameters, list[EpochMetrics]]:
    """Run ``config.epochs`` epochs of per-batch SGD starting from ``params``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.n_inputs != params.topology.n_inputs:
        raise ValueError(
            f"dataset has {dataset.n_inputs} inputs, network expects {params.topology.n_inputs}"
        )
    train_set, test_set = split_dataset(dataset, config)
    history: list[EpochMetrics] = []
    with _Runner(config.workers) as runner:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
            losses, n_jump, n_near, n_failed = [], 0, 0, 0
            for b0 in range(0, len(order), config.batch):
                idx = order[b0:b0 + config.batch]
                results = runner.map(
                    sample_gradient, [(params, train_set[k], config.loss) for k in idx]
                )
                total = GradientSet.zeros(params)
                for k, (g, info) in zip(idx, results):
                    if g is None:
                        if config.strict:
                            raise SimulationError(f"training sample {k}: {info}")
                        log.warning("epoch %d, sample %d skipped: %s", epoch, k, info)
                        n_failed += 1
                        continue
                    losses.append(g.loss_value)
                    total = total + g
                n_jump += total.n_jump
                n_near += total.n_near_degenerate
                params = sgd_step(params, total.scaled(1.0 / len(idx)), config)
            tr = evaluate(train_set, params, config.loss, dataset.n_classes, runner)
            te = evaluate(test_set, params, config.loss, dataset.n_classes, runner)
            m = EpochMetrics(
                epoch,
                float(np.mean(losses)) if losses else math.nan,
                tr.accuracy, te.mean_loss, te.accuracy,
                [float(a.mean()) for a in params.A],
                tr.mean_spikes, n_jump, n_near, n_failed,
                time.perf_counter() - t0,
            )
            history.append(m)
            log.info("epoch %d: loss %.4f, test accuracy %.3f", epoch, m.train_loss, m.test_accuracy)
            if on_epoch is not None:
                on_epoch(m, params)
    return params, history


def write_metrics(history: Sequence[EpochMetrics], path) -> None:
    """Epoch metrics CSV.  Wall time is left out so identical runs give identical files."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(EpochMetrics.CSV_COLUMNS)
        for m in history:
            wr.writerow(m.csv_row())


def write_timing(history: Sequence[EpochMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("epoch", "wall_time"))
        for m in history:
            wr.writerow((m.epoch, f"{m.wall_time:.6f}"))


def make_network(
    dataset: Dataset, hidden: Sequence[int], seed: int, kernel=None, ranges: InitRanges = InitRanges(),
    theta0: float = 0.5, tau_a: float = 30.0,
) -> Parameters:
    topo = Topology((dataset.n_inputs, *hidden, dataset.n_classes))
    return init_parameters(topo, ranges, seed, kernel=kernel, theta0=theta0, tau_a=tau_a,
                           window_T=dataset.window_T)


def save_checkpoint(params: Parameters, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    params.save(path)
