"""Event-driven forward simulation.

Between two consecutive arrivals at a neuron the threshold gap
``G(t) = V(t) - theta(t)`` is a constant plus at most three decaying
exponentials (membrane, synaptic, adaptation).  Crossings are therefore
located exactly: multiplying ``G'`` by ``exp(r_0 x)`` and differentiating
again removes one exponential per level, so the derivative zeros of every
level follow from those of the next one.  They split the interval into
monotone pieces; the first piece whose right end is at or above threshold
brackets the crossing, and safeguarded Newton pins it down to machine
precision.

Network layers are processed in topological order.  Every neuron consumes
its arrivals ``t_pre + d`` in time order (ties keep the order of the
presynaptic spikes, i.e. ``(time, neuron, ordinal)``), and the spikes of all
layers are finally merged into one ``(time, layer, neuron)``-ordered record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .kernels import KernelSpec, psp, psp_deriv
from .network import Parameters, Trace

ROOT_XTOL = 1e-9          # ms, guaranteed absolute accuracy of crossing times
MAX_BISECTIONS = 200
DEGENERATE_SLOPE = 1e-12  # per ms
_MAX_TERMS = 4


class SimulationError(RuntimeError):
    pass


class DegenerateCrossingError(SimulationError):
    """Threshold reached tangentially: the spike time is not differentiable."""

    def __init__(self, time: float, slope: float, layer: int = -1, neuron: int = -1):
        self.time, self.slope, self.layer, self.neuron = time, slope, layer, neuron
        where = f" (layer {layer}, neuron {neuron})" if layer >= 0 else ""
        super().__init__(f"degenerate crossing at t={time!r}{where}: |dG/dt|={slope:.3g}")


# ---------------------------------------------------------------------------
# sums of exponentials  f(x) = sum_i c_i exp(-r_i x),  rates ascending

@numba.njit(cache=True)
def _expsum(c, r, n, x):
    s = 0.0
    for i in range(n):
        s += c[i] * math.exp(-r[i] * x)
    return s


@numba.njit(cache=True)
def _expsum_deriv(c, r, n, x):
    s = 0.0
    for i in range(n):
        s -= r[i] * c[i] * math.exp(-r[i] * x)
    return s


@numba.njit(cache=True)
def _safe_root(c, r, n, a, b, fa):
    """Root of a monotone ``f`` with a sign change on ``[a, b]``.

    Newton steps, replaced by bisection whenever they leave the bracket (and
    unconditionally after 40 steps).  Returns ``nan`` if it fails to converge.
    """
    neg_left = fa < 0
    lo, hi = a, b
    x = 0.5 * (a + b)
    for it in range(MAX_BISECTIONS):
        fx = _expsum(c, r, n, x)
        if fx == 0.0:
            return x
        if (fx < 0) == neg_left:
            lo = x
        else:
            hi = x
        if hi - lo <= 4e-16 * max(1.0, abs(hi)):
            return x
        dfx = _expsum_deriv(c, r, n, x)
        xn = lo - 1.0
        if dfx != 0.0 and it < 40:
            xn = x - fx / dfx
        if not (lo < xn < hi):
            xn = 0.5 * (lo + hi)
        if abs(xn - x) <= 2e-16 * max(1.0, abs(x)):
            return xn
        x = xn
    return math.nan


@numba.njit(cache=True)
def _sign_changes_on(c, r, n, pts, n_pts, out):
    """Sign changes of ``f`` on the monotone pieces between ``pts``; returns count."""
    m = 0
    fa = _expsum(c, r, n, pts[0])
    for k in range(n_pts - 1):
        a, b = pts[k], pts[k + 1]
        fb = _expsum(c, r, n, b)
        if (fa < 0.0 < fb) or (fa > 0.0 > fb):
            out[m] = _safe_root(c, r, n, a, b, fa)
            m += 1
        if fb != 0.0:
            fa = fb
    return m


@numba.njit(cache=True)
def _first_upcrossing(coefs, rates, length):
    """First ``x`` in ``(0, length]`` with ``f(x) >= 0`` given ``f(0) < 0``.

    ``coefs``/``rates`` hold at most four terms in any order.  Returns
    ``(found, x, f'(x))``.
    """
    # merge equal rates, drop zero terms, sort by rate
    C = np.zeros((_MAX_TERMS, _MAX_TERMS))
    R = np.zeros((_MAX_TERMS, _MAX_TERMS))
    n = 0
    for i in range(len(coefs)):
        if coefs[i] == 0.0:
            continue
        hit = -1
        for k in range(n):
            if R[0, k] == rates[i]:
                hit = k
        if hit >= 0:
            C[0, hit] += coefs[i]
        else:
            C[0, n] = coefs[i]
            R[0, n] = rates[i]
            n += 1
    for i in range(1, n):
        k = i
        while k > 0 and R[0, k - 1] > R[0, k]:
            R[0, k - 1], R[0, k] = R[0, k], R[0, k - 1]
            C[0, k - 1], C[0, k] = C[0, k], C[0, k - 1]
            k -= 1
    m = 0
    for i in range(n):
        if C[0, i] != 0.0:
            C[0, m] = C[0, i]
            R[0, m] = R[0, i]
            m += 1
    n = m
    if n == 0:
        return False, 0.0, 0.0
    # derivative chain: level l+1 is d/dx[exp(r_0 x) f_l(x)]
    for lev in range(n - 1):
        r0 = R[lev, 0]
        for i in range(1, n - lev):
            C[lev + 1, i - 1] = -(R[lev, i] - r0) * C[lev, i]
            R[lev + 1, i - 1] = R[lev, i] - r0
    pts = np.empty(_MAX_TERMS + 1)
    roots = np.empty(_MAX_TERMS)
    n_breaks = 0      # sign changes of the level below (none for a single term)
    for lev in range(n - 2, 0, -1):
        pts[0] = 0.0
        for k in range(n_breaks):
            pts[k + 1] = roots[k]
        pts[n_breaks + 1] = length
        n_breaks = _sign_changes_on(C[lev], R[lev], n - lev, pts, n_breaks + 2, roots)
    pts[0] = 0.0
    for k in range(n_breaks):
        pts[k + 1] = roots[k]
    pts[n_breaks + 1] = length
    c0, r0 = C[0], R[0]
    for k in range(n_breaks + 1):
        a, b = pts[k], pts[k + 1]
        if not b > a:
            continue
        if _expsum(c0, r0, n, b) >= 0.0:
            x = _safe_root(c0, r0, n, a, b, _expsum(c0, r0, n, a))
            return True, x, _expsum_deriv(c0, r0, n, x)
    return False, 0.0, 0.0


# ---------------------------------------------------------------------------
# single-neuron building blocks

@dataclass(frozen=True)
class AdaptationState:
    """Threshold adaptation of one neuron.

    ``level`` is ``a(t_s+)`` right after the last own spike ``last_spike``.
    """

    theta0: float
    tau_a: float
    level: float = 0.0
    last_spike: float | None = None

    def value(self, t: float) -> float:
        if self.last_spike is None:
            return 0.0
        return self.level * math.exp(-(t - self.last_spike) / self.tau_a)

    def after_spike(self, t: float, A: float) -> AdaptationState:
        return AdaptationState(self.theta0, self.tau_a, self.value(t) + A, t)


def threshold_value(state: AdaptationState, t: float) -> float:
    return state.theta0 + state.value(t)


@dataclass(frozen=True)
class Segment:
    """Inputs a neuron has integrated since its last reset."""

    kernel: KernelSpec
    start_time: float
    weights: np.ndarray
    arrivals: np.ndarray
    v_rest: float = 0.0

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        a = np.asarray(self.arrivals, dtype=float).reshape(-1)
        if w.shape != a.shape:
            raise ValueError("weights and arrivals must have the same length")
        order = np.argsort(a, kind="stable")
        object.__setattr__(self, "weights", w[order])
        object.__setattr__(self, "arrivals", a[order])


def membrane_potential(segment: Segment, t: float) -> float:
    mask = segment.arrivals <= t
    if not mask.any():
        return float(segment.v_rest)
    tau = t - segment.arrivals[mask]
    return float(segment.v_rest + np.sum(segment.weights[mask] * psp(segment.kernel, tau)))


@dataclass(frozen=True)
class Crossing:
    time: float
    jump: bool
    slope: float   # dG/dt at the crossing; left-limit dV/dt for jump crossings


def _gap_terms(kernel: KernelSpec, base, cm, cs, ca, tau_a):
    """Coefficients/rates of ``G(x) = V - theta`` ``x`` ms after a reference point."""
    ts = kernel.tau_s if not kernel.is_causal else 1.0
    return (np.array([base, cm, -cs, -ca]),
            np.array([0.0, 1.0 / kernel.tau_m, 1.0 / ts, 1.0 / tau_a]))


def find_crossing(
    segment: Segment, adaptation: AdaptationState, t_lo: float, t_hi: float
) -> Crossing | None:
    """Earliest threshold crossing in ``(t_lo, t_hi]``.

    No arrival may fall strictly inside the interval and the neuron must be
    below threshold at ``t_lo``.  For the causal kernel an arrival at exactly
    ``t_hi`` is checked as a jump crossing.
    """
    if not t_lo < t_hi:
        raise ValueError("need t_lo < t_hi")
    k = segment.kernel
    mask = segment.arrivals <= t_lo
    tau = t_lo - segment.arrivals[mask]
    wn = segment.weights[mask] * k.norm
    cm = float(np.sum(wn * np.exp(-tau / k.tau_m)))
    cs = 0.0 if k.is_causal else float(np.sum(wn * np.exp(-tau / k.tau_s)))
    ca = adaptation.value(t_lo)
    coefs, rates = _gap_terms(k, segment.v_rest - adaptation.theta0, cm, cs, ca, adaptation.tau_a)
    if coefs.sum() >= 0.0:
        raise ValueError("neuron is already at or above threshold at t_lo")
    found, x, slope = _first_upcrossing(coefs, rates, t_hi - t_lo)
    if found:
        if not slope >= DEGENERATE_SLOPE:
            raise DegenerateCrossingError(t_lo + x, slope)
        return Crossing(t_lo + x, False, slope)
    if k.is_causal:
        if membrane_potential(segment, t_hi) >= threshold_value(adaptation, t_hi):
            mask = segment.arrivals < t_hi
            left = float(np.sum(segment.weights[mask] * psp_deriv(k, t_hi - segment.arrivals[mask])))
            return Crossing(t_hi, True, left)
    return None


# ---------------------------------------------------------------------------
# compiled per-neuron and per-layer runners

@numba.njit(cache=True)
def _kernel_deriv(causal, tm, ts, norm, tau):
    if causal:
        return -math.exp(-tau / tm) / tm
    return norm * (math.exp(-tau / ts) / ts - math.exp(-tau / tm) / tm)


@numba.njit(cache=True)
def _run_neuron(t, w, causal, tm, ts, norm, theta0, tau_a, A, v_rest, T,
                o_time, o_first, o_last, o_jump, o_dv, o_a, o_gain, err):
    """Spikes of one neuron fed by time-sorted arrivals ``t`` (all <= T).

    Writes one row per spike into the ``o_*`` arrays and returns the count,
    or ``-1`` after a degenerate crossing (``err`` = time, slope).
    """
    n = t.shape[0]
    base = v_rest - theta0
    rm = 1.0 / tm
    rs = 1.0 / ts
    ra = 1.0 / tau_a
    coefs = np.zeros(4)
    rates = np.array([0.0, rm, rs, ra])
    level = 0.0
    gain = 0.0
    last = 0.0
    has_last = False
    ns = 0
    start = 0
    while start < n:
        cm = 0.0
        cs = 0.0
        fired = False
        tf = 0.0
        kf = 0
        jf = False
        for k in range(start, n):
            if k > start:
                h = t[k] - t[k - 1]
                cm *= math.exp(-h * rm)
                if not causal:
                    cs *= math.exp(-h * rs)
            cm += w[k] * norm
            if not causal:
                cs += w[k] * norm
            L = (t[k + 1] if k + 1 < n else T) - t[k]
            ca = level * math.exp(-(t[k] - last) * ra) if has_last else 0.0
            if causal and (k + 1 >= n or t[k + 1] > t[k]) and base + cm - ca >= 0.0:
                fired, tf, kf, jf = True, t[k], k, True
                break
            if L <= 0.0:
                continue
            # cheap upper bound of G over the interval
            vmax = cm if cm > 0.0 else cm * math.exp(-L * rm)
            if not causal:
                vmax += -cs * math.exp(-L * rs) if cs > 0.0 else -cs
            if base + vmax - ca * math.exp(-L * ra) < -1e-12:
                continue
            coefs[0] = base
            coefs[1] = cm
            coefs[2] = 0.0 if causal else -cs
            coefs[3] = -ca
            found, x, slope = _first_upcrossing(coefs, rates, L)
            if found:
                if not slope >= DEGENERATE_SLOPE:
                    err[0] = t[k] + x
                    err[1] = slope
                    return -1
                fired, tf, kf, jf = True, t[k] + x, k, False
                break
        if not fired:
            break
        dv = 0.0
        for i in range(start, kf + 1):
            tau = tf - t[i]
            if tau > 0.0 or not jf:
                dv += w[i] * _kernel_deriv(causal, tm, ts, norm, tau)
        if has_last:
            decay = math.exp(-(tf - last) * ra)
            a_minus, g_minus = level * decay, gain * decay
        else:
            a_minus, g_minus = 0.0, 0.0
        o_time[ns] = tf
        o_first[ns] = start
        o_last[ns] = kf
        o_jump[ns] = jf
        o_dv[ns] = dv
        o_a[ns] = a_minus
        o_gain[ns] = g_minus
        ns += 1
        level, gain, last, has_last = a_minus + A, g_minus + 1.0, tf, True
        start = kf + 1
    return ns


@numba.njit(cache=True)
def _run_layer(pre_time, pre_neuron, W, D, A, causal, tm, ts, norm, theta0, tau_a, v_rest, T):
    """All spikes of one layer; parents are flat index lists into the previous layer."""
    n_pre = pre_time.shape[0]
    n_post = W.shape[1]
    cap = n_pre * n_post + 1
    s_neuron = np.empty(cap, np.int64)
    s_time = np.empty(cap)
    s_p0 = np.empty(cap, np.int64)
    s_p1 = np.empty(cap, np.int64)
    s_jump = np.empty(cap, np.bool_)
    s_dv = np.empty(cap)
    s_a = np.empty(cap)
    s_gain = np.empty(cap)
    par_idx = np.empty(cap, np.int64)
    par_arr = np.empty(cap)
    o_time = np.empty(n_pre + 1)
    o_first = np.empty(n_pre + 1, np.int64)
    o_last = np.empty(n_pre + 1, np.int64)
    o_jump = np.empty(n_pre + 1, np.bool_)
    o_dv = np.empty(n_pre + 1)
    o_a = np.empty(n_pre + 1)
    o_gain = np.empty(n_pre + 1)
    err = np.zeros(3)
    ns = 0
    npar = 0
    arr = np.empty(n_pre)
    for j in range(n_post):
        for i in range(n_pre):
            arr[i] = pre_time[i] + D[pre_neuron[i], j]
        order = np.argsort(arr, kind="mergesort")
        m = 0
        while m < n_pre and arr[order[m]] <= T:
            m += 1
        idx = order[:m]
        at = arr[idx]
        wj = np.empty(m)
        for i in range(m):
            wj[i] = W[pre_neuron[idx[i]], j]
        cnt = _run_neuron(at, wj, causal, tm, ts, norm, theta0, tau_a, A[j], v_rest, T,
                          o_time, o_first, o_last, o_jump, o_dv, o_a, o_gain, err)
        if cnt < 0:
            err[2] = j
            return -1, s_neuron, s_time, s_p0, s_p1, s_jump, s_dv, s_a, s_gain, par_idx, par_arr, err
        for f in range(cnt):
            s_neuron[ns] = j
            s_time[ns] = o_time[f]
            s_p0[ns] = npar
            for i in range(o_first[f], o_last[f] + 1):
                par_idx[npar] = idx[i]
                par_arr[npar] = at[i]
                npar += 1
            s_p1[ns] = npar
            s_jump[ns] = o_jump[f]
            s_dv[ns] = o_dv[f]
            s_a[ns] = o_a[f]
            s_gain[ns] = o_gain[f]
            ns += 1
    return ns, s_neuron, s_time, s_p0, s_p1, s_jump, s_dv, s_a, s_gain, par_idx, par_arr, err


# ---------------------------------------------------------------------------
# network simulation

def _check_inputs(input_spikes: Sequence, n_inputs: int, T: float) -> list[np.ndarray]:
    if len(input_spikes) != n_inputs:
        raise ValueError(f"expected {n_inputs} input spike trains, got {len(input_spikes)}")
    trains = []
    for i, train in enumerate(input_spikes):
        arr = np.sort(np.asarray(train, dtype=float).reshape(-1))
        if len(arr) and (not np.all(np.isfinite(arr)) or arr[0] < 0 or arr[-1] >= T):
            raise ValueError(f"input neuron {i}: spike times must lie in [0, {T})")
        trains.append(arr)
    return trains


def simulate(params: Parameters, input_spikes: Sequence, window_T: float | None = None) -> Trace:
    """Run the network on one sample and return the full causal record."""
    T = params.window_T if window_T is None else float(window_T)
    topo = params.topology
    trains = _check_inputs(input_spikes, topo.n_inputs, T)
    k = params.kernel
    ts = k.tau_s if not k.is_causal else 1.0

    times = np.concatenate(trains)
    neurons = np.concatenate([np.full(len(tr), i, dtype=np.int64) for i, tr in enumerate(trains)])
    ordinals = np.concatenate([np.arange(len(tr)) for tr in trains]).astype(np.int64)
    order = np.lexsort((neurons, times))
    n0 = len(order)
    layers = [{
        "time": times[order], "neuron": neurons[order], "ordinal": ordinals[order],
        "p0": np.zeros(n0, np.int64), "p1": np.zeros(n0, np.int64),
        "par_idx": np.zeros(0, np.int64), "par_arr": np.zeros(0),
        "jump": np.zeros(n0, bool), "dv": np.zeros(n0), "a": np.zeros(n0), "gain": np.zeros(n0),
    }]

    for l in range(1, topo.n_layers):
        pre = layers[-1]
        out = _run_layer(
            pre["time"], pre["neuron"], params.w[l - 1], params.d[l - 1], params.A[l - 1],
            k.is_causal, k.tau_m, ts, k.norm, params.theta0, params.tau_a, params.v_rest, T,
        )
        ns, s_neuron, s_time, s_p0, s_p1, s_jump, s_dv, s_a, s_gain, par_idx, par_arr, err = out
        if ns < 0:
            raise DegenerateCrossingError(float(err[0]), float(err[1]), l, int(err[2]))
        s_neuron, s_time = s_neuron[:ns], s_time[:ns]
        # neurons are run one after another, so ordinals follow emission order
        ordinal = np.zeros(ns, np.int64)
        if ns:
            first = np.r_[True, s_neuron[1:] != s_neuron[:-1]]
            starts = np.flatnonzero(first)
            ordinal = np.arange(ns) - np.repeat(starts, np.diff(np.r_[starts, ns]))
        o = np.lexsort((s_neuron, s_time))
        layers.append({
            "time": s_time[o], "neuron": s_neuron[o], "ordinal": ordinal[o],
            "p0": s_p0[:ns][o], "p1": s_p1[:ns][o],
            "par_idx": par_idx, "par_arr": par_arr,
            "jump": s_jump[:ns][o], "dv": s_dv[:ns][o], "a": s_a[:ns][o], "gain": s_gain[:ns][o],
        })
    return _merge_layers(params, layers)


def _merge_layers(params: Parameters, layers: list[dict]) -> Trace:
    sizes = [len(L["time"]) for L in layers]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    time = np.concatenate([L["time"] for L in layers])
    layer = np.concatenate([np.full(s, l, dtype=np.int64) for l, s in enumerate(sizes)])
    neuron = np.concatenate([L["neuron"] for L in layers]).astype(np.int64)
    ordinal = np.concatenate([L["ordinal"] for L in layers]).astype(np.int64)
    order = np.lexsort((neuron, layer, time))
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))

    # previous own spike of the same (layer, neuron); inputs included
    prev = np.full(len(order), -1, dtype=np.int64)
    by_unit = np.lexsort((ordinal, neuron, layer))
    same = (layer[by_unit][1:] == layer[by_unit][:-1]) & (neuron[by_unit][1:] == neuron[by_unit][:-1])
    succ, pred = by_unit[1:][same], by_unit[:-1][same]
    prev[rank[succ]] = rank[pred]

    empty_i = np.zeros(0, np.int64)
    empty_i.setflags(write=False)
    empty_f = np.zeros(0)
    empty_f.setflags(write=False)
    parents: list[np.ndarray] = [empty_i] * len(order)
    arrivals: list[np.ndarray] = [empty_f] * len(order)
    for l in range(1, len(layers)):
        L = layers[l]
        n_par = int(L["p1"].max()) if sizes[l] else 0
        glob = rank[L["par_idx"][:n_par] + offsets[l - 1]]
        arr = L["par_arr"][:n_par].copy()
        glob.setflags(write=False)
        arr.setflags(write=False)
        for q, (a, b) in enumerate(zip(L["p0"].tolist(), L["p1"].tolist())):
            g = int(rank[offsets[l] + q])
            parents[g] = glob[a:b]
            arrivals[g] = arr[a:b]

    def cat(key, dtype):
        out = np.concatenate([np.asarray(L[key], dtype=dtype) for L in layers])[order]
        out.setflags(write=False)
        return out

    def frozen(a):
        a = a[order]
        a.setflags(write=False)
        return a

    prev.setflags(write=False)
    return Trace(
        params=params,
        layer=frozen(layer),
        neuron=frozen(neuron),
        ordinal=frozen(ordinal),
        time=frozen(time),
        parents=tuple(parents),
        arrivals=tuple(arrivals),
        prev_own=prev,
        dv_dt=cat("dv", float),
        adaptation=cat("a", float),
        adapt_gain=cat("gain", float),
        jump=cat("jump", bool),
    )
