"""Independent numerical ground truth.

* :func:`dense_forward` integrates the neuron ODEs on a time grid.  The
  linear state ``(V, I, a)`` is propagated exactly between checkpoints (grid
  points and arrival instants), threshold crossings are detected by scanning
  the checkpoints and refined by linear interpolation.
* :func:`finite_diff_gradient` differentiates the full loss of the
  event-driven simulator by central differences and reports whether the
  per-neuron spike counts stayed fixed.
* :func:`pinned_spike_derivatives` re-solves a single crossing with the
  neuron's earlier spike times frozen, isolating ``dt/dA`` and
  ``dt/dt_prev``.
* :func:`run_gradcheck` compares analytic and numeric gradients on random
  networks.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from scipy.optimize import brentq

from .data import Sample
from .forward import SimulationError, simulate
from .gradients import backward
from .kernels import KernelSpec, psp
from .loss import LossKind, LossSpec, sample_loss
from .network import (
    GradientSet, InitRanges, ParamHandle, Parameters, Topology, Trace, format_handle,
    init_parameters,
)

# ---------------------------------------------------------------------------
# dense-grid forward integration


@numba.njit(cache=True)
def _dense_neuron(arr, w, causal, tau_m, tau_s, beta, theta0, tau_a, A, v_rest, T, dt,
                  record, v_out):
    """Spike times of one neuron driven by sorted arrivals ``arr``.

    Membrane ``u = V - v_rest`` and synaptic current ``I`` follow
    ``du/dt = -u/tau_m + beta I`` and ``dI/dt = -I/tau_s``; the causal kernel
    has no current and arrivals jump ``u`` by ``w``.
    """
    n_steps = int(math.ceil(T / dt - 1e-9))
    spikes = np.empty(arr.shape[0] + 1)
    ns = 0
    rm = 1.0 / tau_m
    rs = 1.0 / tau_s if not causal else 0.0
    u = 0.0
    cur = 0.0
    a = 0.0
    t = 0.0
    g_prev = v_rest - theta0
    t_prev = 0.0
    ia = 0
    n_arr = arr.shape[0]
    if record:
        v_out[0] = v_rest
    for step in range(1, n_steps + 1):
        t_grid = min(step * dt, T)
        while True:
            is_arrival = ia < n_arr and arr[ia] <= t_grid
            t_next = arr[ia] if is_arrival else t_grid
            # exact propagation to the checkpoint
            h = t_next - t
            if h > 0.0:
                em = math.exp(-h * rm)
                if causal:
                    u = u * em
                else:
                    es = math.exp(-h * rs)
                    u = u * em + beta * cur * (em - es) / (rs - rm)
                    cur = cur * es
                a = a * math.exp(-h / tau_a)
                t = t_next
            g = v_rest + u - theta0 - a
            if g >= 0.0 and t > t_prev:
                # smooth crossing somewhere in (t_prev, t]
                tc = t_prev + (t - t_prev) * (-g_prev) / (g - g_prev)
                spikes[ns] = tc
                ns += 1
                back = t - tc
                a = a * math.exp(back / tau_a) + A
                u = 0.0
                cur = 0.0
                a = a * math.exp(-back / tau_a)
                g = v_rest - theta0 - a
            if is_arrival:
                if causal:
                    u += w[ia]
                else:
                    cur += w[ia]
                ia += 1
                g = v_rest + u - theta0 - a
                group_end = ia >= n_arr or arr[ia] > t
                if causal and g >= 0.0 and group_end:
                    spikes[ns] = t
                    ns += 1
                    u = 0.0
                    a = a + A
                    g = v_rest - theta0 - a
                g_prev = g
                t_prev = t
            else:
                g_prev = g
                t_prev = t
                break
        if record:
            v_out[step] = v_rest + u
    return spikes[:ns]


@dataclass
class DenseResult:
    """Spike times (per layer, per neuron), counts and optional grid voltages."""

    dt: float
    spike_times: list[list[np.ndarray]]
    voltages: list[np.ndarray] | None = None

    @property
    def spike_counts(self) -> list[np.ndarray]:
        return [np.array([len(s) for s in layer], dtype=int) for layer in self.spike_times]


def dense_forward(
    params: Parameters, input_spikes: Sequence, dt: float = 1e-3, record_voltage: bool = False
) -> DenseResult:
    if not dt > 0:
        raise ValueError("dt must be positive")
    k = params.kernel
    T = params.window_T
    causal = k.is_causal
    beta = 0.0 if causal else k.norm * (1.0 / k.tau_s - 1.0 / k.tau_m)
    tau_s = k.tau_s if not causal else 1.0
    n_grid = int(math.ceil(T / dt - 1e-9)) + 1
    layers = [[np.sort(np.asarray(s, dtype=float)) for s in input_spikes]]
    volts = [] if record_voltage else None
    for l in range(1, params.topology.n_layers):
        W, D, A = params.w[l - 1], params.d[l - 1], params.A[l - 1]
        pre = layers[-1]
        src = np.concatenate([np.full(len(s), i) for i, s in enumerate(pre)]).astype(np.int64)
        tpre = np.concatenate(pre) if pre else np.zeros(0)
        out = []
        vl = np.zeros((n_grid, params.topology.layer_sizes[l])) if record_voltage else None
        for j in range(params.topology.layer_sizes[l]):
            arr = tpre + D[src, j]
            order = np.argsort(arr, kind="stable")
            arr, wj = arr[order], W[src[order], j]
            keep = arr <= T
            buf = vl[:, j].copy() if record_voltage else np.zeros(1)
            sp = _dense_neuron(
                np.ascontiguousarray(arr[keep]), np.ascontiguousarray(wj[keep]), causal,
                k.tau_m, tau_s, beta, params.theta0, params.tau_a, float(A[j]),
                params.v_rest, T, dt, record_voltage, buf,
            )
            if record_voltage:
                vl[:, j] = buf
            out.append(sp)
        layers.append(out)
        if record_voltage:
            volts.append(vl)
    return DenseResult(dt, layers, volts)


# ---------------------------------------------------------------------------
# finite differences


def _loss_and_counts(params: Parameters, sample: Sample, spec: LossSpec):
    trace = simulate(params, sample.inputs)
    loss, _ = sample_loss(trace, spec, sample.label, sample.targets)
    return loss, trace.spike_counts()


def finite_diff_gradient(
    params: Parameters, sample: Sample, loss_spec: LossSpec, handle: ParamHandle, h: float = 1e-4
) -> tuple[float, bool]:
    """Central difference of the sample loss along one coordinate.

    The flag is true iff per-neuron spike counts agree at ``p - h``, ``p``
    and ``p + h``.  A degenerate crossing at any of the three points makes
    the coordinate unstable (numeric value ``nan``).
    """
    if not h > 0:
        raise ValueError("h must be positive")
    p = params.get(handle)
    try:
        lo = params.with_value(handle, p - h)
        hi = params.with_value(handle, p + h)
    except ValueError as err:
        raise ValueError(f"{format_handle(handle)} +- {h} leaves the valid range: {err}") from None
    try:
        _, c0 = _loss_and_counts(params, sample, loss_spec)
        lp, cp = _loss_and_counts(hi, sample, loss_spec)
        lm, cm = _loss_and_counts(lo, sample, loss_spec)
    except SimulationError:
        return math.nan, False
    stable = all(np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(c0, cp, cm))
    return (lp - lm) / (2.0 * h), stable


# ---------------------------------------------------------------------------
# pinned-history crossing oracle


def _pinned_root(trace: Trace, spike: int, A: float, earlier: np.ndarray) -> float:
    pr = trace.params
    l, j = int(trace.layer[spike]), int(trace.neuron[spike])
    wp = pr.w[l - 1][trace.neuron[trace.parents[spike]], j]
    arr = trace.arrivals[spike]
    t_k = float(trace.time[spike])

    def gap(t):
        v = pr.v_rest + float(np.sum(wp * psp(pr.kernel, t - arr)))
        return v - pr.theta0 - A * float(np.sum(np.exp(-(t - earlier) / pr.tau_a)))

    lo, hi = t_k - 1e-2, t_k + 1e-2
    return brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def pinned_spike_derivatives(trace: Trace, spike: int, h: float = 1e-6) -> tuple[float, float]:
    """Numeric ``(dt/dA, dt/dt_prev)`` for a non-first, smooth spike.

    The crossing is re-solved from the closed-form potential with the
    segment's parents fixed and the neuron's earlier spike times frozen, so
    the adaptation before the spike is ``A * sum_f' exp(-(t - t_f')/tau_a)``.
    """
    pr = trace.params
    if trace.prev_own[spike] < 0:
        raise ValueError("spike has no previous own spike")
    l, j = int(trace.layer[spike]), int(trace.neuron[spike])
    A = float(pr.A[l - 1][j])
    own = trace.spikes_of(l, j)
    earlier = trace.time[own[: own.index(spike)]].astype(float)
    d_A = (_pinned_root(trace, spike, A + h, earlier) - _pinned_root(trace, spike, A - h, earlier)) / (2 * h)
    up, dn = earlier.copy(), earlier.copy()
    up[-1] += h
    dn[-1] -= h
    d_prev = (_pinned_root(trace, spike, A, up) - _pinned_root(trace, spike, A, dn)) / (2 * h)
    return d_A, d_prev


# ---------------------------------------------------------------------------
# gradcheck harness

REPORT_COLUMNS = ("param_id", "family", "analytic", "numeric", "rel_err", "stable", "jump_flag")
PASS_REL_ERR = 1e-5
PASS_FRACTION = 0.95


@dataclass
class GradcheckRow:
    param_id: str
    family: str
    analytic: float
    numeric: float
    rel_err: float
    stable: bool
    jump_flag: bool
    trial: int = 0

    @property
    def counted(self) -> bool:
        return self.stable and not self.jump_flag

    @property
    def passed(self) -> bool:
        return self.rel_err < PASS_REL_ERR


@dataclass
class GradcheckReport:
    h: float
    rows: list[GradcheckRow] = field(default_factory=list)

    @property
    def n_counted(self) -> int:
        return sum(r.counted for r in self.rows)

    @property
    def pass_ratio(self) -> float:
        counted = [r for r in self.rows if r.counted]
        return sum(r.passed for r in counted) / len(counted) if counted else 0.0

    @property
    def ok(self) -> bool:
        return self.n_counted > 0 and self.pass_ratio >= PASS_FRACTION

    def family_ratio(self, family: str) -> float:
        counted = [r for r in self.rows if r.counted and r.family == family]
        return sum(r.passed for r in counted) / len(counted) if counted else math.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(("trial",) + REPORT_COLUMNS)
            for r in self.rows:
                wr.writerow((r.trial, r.param_id, r.family, repr(r.analytic), repr(r.numeric),
                             repr(r.rel_err), int(r.stable), int(r.jump_flag)))

    def write_dump(self, path) -> None:
        def num(x):
            return x if math.isfinite(x) else None   # keep the file strict JSON

        dump = {
            f"{r.trial}:{r.param_id}": [num(r.analytic), num(r.numeric), num(r.rel_err)]
            for r in self.rows
        }
        Path(path).write_text(json.dumps({"schema_version": 1, "h": self.h, "gradients": dump},
                                         indent=1, allow_nan=False) + "\n")


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(numeric), 1e-8)


def random_trial(
    topology: Topology, kernel: KernelSpec, seed: int, h: float, kind: LossKind = LossKind.TTFS
) -> tuple[Parameters, Sample, LossSpec]:
    """A random network and sample with an active output layer.

    Delays and adaptation jumps are kept at least ``h`` away from their lower
    bound so central differences stay in range.  MSE targets are jittered
    copies of the actual output spikes.
    """
    rng = np.random.default_rng(seed)
    T = 100.0
    for _ in range(100):
        params = init_parameters(
            topology, InitRanges(0.0, 1.0, 2 * h, 5.0, 0.5), int(rng.integers(2**31)),
            kernel=kernel, window_T=T,
        )
        A = tuple(rng.uniform(2 * h, 1.0, size=a.shape) for a in params.A)
        params = params.replace(A=A)
        inputs = [np.sort(rng.uniform(0.0, 50.0, size=rng.integers(1, 4)))
                  for _ in range(topology.n_inputs)]
        try:
            trace = simulate(params, inputs)
        except SimulationError:
            continue
        counts = trace.spike_counts()[-1]
        if not np.all(counts > 0):
            continue
        if kind is LossKind.TTFS:
            label = int(rng.integers(topology.n_outputs))
            return params, Sample(inputs, label), LossSpec(LossKind.TTFS)
        outs = trace.spike_times(topology.n_layers - 1)
        targets = [np.clip(t + rng.normal(0.0, 2.0, size=len(t)), 0.0, T) for t in outs]
        return params, Sample(inputs, 0, targets), LossSpec(LossKind.MSE)
    raise RuntimeError(f"no active network found for seed {seed}")


def check_trial(
    topology: Topology, kernel: KernelSpec, seed: int, h: float, trial: int = 0
) -> list[GradcheckRow]:
    kind = LossKind.TTFS if trial % 2 == 0 else LossKind.MSE
    params, sample, spec = random_trial(topology, kernel, seed, h, kind)
    trace = simulate(params, sample.inputs)
    loss, adj = sample_loss(trace, spec, sample.label, sample.targets)
    grads: GradientSet = backward(trace, adj)
    jump = grads.n_jump > 0
    rows = []
    for handle in params.handles("wdA"):
        num, stable = finite_diff_gradient(params, sample, spec, handle, h)
        ana = grads.get(handle)
        rows.append(GradcheckRow(
            format_handle(handle), handle[0], ana, num,
            relative_error(ana, num) if stable else math.nan, stable, jump, trial,
        ))
    return rows


def _check_trial_args(args):
    return check_trial(*args)


def run_gradcheck(
    topology: Topology, trials: int, h: float = 1e-4, kernel: KernelSpec | None = None,
    seed: int = 0, workers: int = 1,
) -> GradcheckReport:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    kernel = kernel or KernelSpec()
    seeds = np.random.SeedSequence(seed).generate_state(trials)
    jobs = [(topology, kernel, int(s), h, t) for t, s in enumerate(seeds)]
    report = GradcheckReport(h)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for rows in pool.map(_check_trial_args, jobs):
                report.rows.extend(rows)
    else:
        for job in jobs:
            report.rows.extend(check_trial(*job))
    return report
