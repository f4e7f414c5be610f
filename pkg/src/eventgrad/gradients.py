"""Exact backward pass through recorded spike times.

Every non-input spike ``t_k`` of neuron ``j`` is defined implicitly by

    G = V(t_k; parents) - theta0 - s_p * exp(-(t_k - t_p) / tau_a) = 0,

where ``p`` is the neuron's previous spike and ``s_p = A_j + a(t_p^-)`` the
adaptation level right after it.  With ``D = dG/dt`` at the crossing the
implicit function theorem gives

    dt_k/dw_ij   = -sum_f eps(t_k - a_f) / D
    dt_k/dd_ij   =  w_ij sum_f eps'(t_k - a_f) / D     (= dt_k/dt_pre per parent)
    dt_k/ds_p    =  exp(-(t_k - t_p) / tau_a) / D
    dt_k/dt_p    =  a(t_k^-) / (tau_a D)               (with s_p held fixed)

The level obeys ``s_k = A_j + s_p exp(-(t_k - t_p)/tau_a)``; reverse mode
carries one adjoint per spike time (``lam``) and one per level (``mu``).

Jump crossings of the causal kernel happen exactly at an arrival instant.
Locally the spike time equals that arrival, so its derivative is pinned to
the triggering arrival(s) and does not depend on weights or adaptation.
"""

from __future__ import annotations

import math

import numpy as np

from .kernels import KernelSpec, psp, psp_deriv
from .network import GradientSet, Trace

DEGENERATE_D = 1e-12
NEAR_DEGENERATE_D = 1e-9


class DegenerateDenominatorError(ArithmeticError):
    def __init__(self, spike: int, layer: int, neuron: int, value: float):
        self.spike, self.layer, self.neuron, self.value = spike, layer, neuron, value
        super().__init__(
            f"spike {spike} (layer {layer}, neuron {neuron}): crossing slope {value:.3g} "
            "is numerically zero"
        )


def gap_slope(
    kernel: KernelSpec, weights, arrivals, t: float, adaptation: float = 0.0, tau_a: float = 30.0
) -> float:
    """``d(V - theta)/dt`` at ``t`` for the given contributions and ``a(t^-)``."""
    tau = t - np.asarray(arrivals, dtype=float)
    dv = float(np.sum(np.asarray(weights, dtype=float) * psp_deriv(kernel, tau)))
    return dv + adaptation / tau_a


def _check_spike(trace: Trace, spike: int) -> None:
    if not 0 <= spike < len(trace):
        raise IndexError(f"spike index {spike} out of range")
    if trace.layer[spike] == 0:
        raise ValueError(f"spike {spike} is an input spike and has no crossing")


def crossing_denominator(trace: Trace, spike: int) -> float:
    """``D = dV/dt + a(t^-)/tau_a`` at the crossing (left limit for jumps).

    Raises :class:`DegenerateDenominatorError` when ``|D| < 1e-12`` at a
    smooth crossing.  Jump crossings return their left-limit slope unchecked;
    their derivatives do not divide by it.
    """
    _check_spike(trace, spike)
    D = float(trace.slope[spike])
    if not trace.jump[spike] and abs(D) < DEGENERATE_D:
        raise DegenerateDenominatorError(
            spike, int(trace.layer[spike]), int(trace.neuron[spike]), D
        )
    return D


def _parent_weights(trace: Trace, spike: int) -> np.ndarray:
    l, j = int(trace.layer[spike]), int(trace.neuron[spike])
    return trace.params.w[l - 1][trace.neuron[trace.parents[spike]], j]


def _triggers(trace: Trace, spike: int) -> np.ndarray:
    return trace.arrivals[spike] == trace.time[spike]


def dt_d_delay_terms(trace: Trace, spike: int) -> np.ndarray:
    """Per-parent ``dt_spike / d(arrival)``, aligned with ``trace.parents[spike]``."""
    _check_spike(trace, spike)
    if trace.jump[spike]:
        trig = _triggers(trace, spike)
        return trig / trig.sum()
    D = crossing_denominator(trace, spike)
    tau = trace.time[spike] - trace.arrivals[spike]
    return _parent_weights(trace, spike) * psp_deriv(trace.params.kernel, tau) / D


def _from_neuron(trace: Trace, spike: int, pre_neuron: int) -> np.ndarray:
    return trace.neuron[trace.parents[spike]] == pre_neuron


def dt_d_delay(trace: Trace, spike: int, pre_neuron: int) -> float:
    """Derivative of the spike time w.r.t. the delay of synapse ``pre_neuron -> neuron``."""
    terms = dt_d_delay_terms(trace, spike)
    return float(np.sum(terms[_from_neuron(trace, spike, pre_neuron)]))


def dt_d_weight(trace: Trace, spike: int, pre_neuron: int) -> float:
    _check_spike(trace, spike)
    mask = _from_neuron(trace, spike, pre_neuron)
    if trace.jump[spike] or not mask.any():
        return 0.0
    D = crossing_denominator(trace, spike)
    tau = trace.time[spike] - trace.arrivals[spike][mask]
    return -float(np.sum(psp(trace.params.kernel, tau))) / D


def dt_d_presyn_time(trace: Trace, spike: int, parent: int) -> float:
    """Derivative w.r.t. the time of one parent spike (a global spike index)."""
    hits = np.flatnonzero(trace.parents[spike] == parent)
    if not len(hits):
        raise ValueError(f"spike {parent} is not a parent of spike {spike}")
    return float(dt_d_delay_terms(trace, spike)[hits[0]])


def dt_d_A(trace: Trace, spike: int) -> float:
    """Derivative w.r.t. the neuron's adaptation jump, earlier own spikes held fixed.

    Zero at a neuron's first spike.  For the second spike this is
    ``exp(-(t1 - t0)/tau_a) / D``; later spikes add the decayed jumps of all
    earlier spikes to the numerator.
    """
    _check_spike(trace, spike)
    if trace.prev_own[spike] < 0 or trace.jump[spike]:
        return 0.0
    return float(trace.adapt_gain[spike]) / crossing_denominator(trace, spike)


def dt_d_prev_own_spike(trace: Trace, spike: int) -> float:
    """``A exp(-(t_f - t_{f-1})/tau_a) / (tau_a D)``, earlier spikes and ``A`` held fixed."""
    _check_spike(trace, spike)
    p = int(trace.prev_own[spike])
    if p < 0:
        raise ValueError(f"spike {spike} is its neuron's first spike")
    if trace.jump[spike]:
        return 0.0
    pr = trace.params
    A = float(pr.A[int(trace.layer[spike]) - 1][int(trace.neuron[spike])])
    E = math.exp(-(trace.time[spike] - trace.time[p]) / pr.tau_a)
    return A * E / (pr.tau_a * crossing_denominator(trace, spike))


def backward(trace: Trace, adjoints) -> GradientSet:
    """Reverse sweep over the spike DAG.

    ``adjoints`` is either a length-``len(trace)`` array of ``dL/dt`` or a
    mapping from spike index to ``dL/dt``.  Spikes with zero adjoint are
    skipped, so parameters off every causal path get exactly zero gradient.
    ``n_jump`` and ``n_near_degenerate`` count the visited spikes that are
    jump crossings or have ``|D| < 1e-9``.
    """
    pr = trace.params
    n = len(trace)
    lam = np.zeros(n)
    if isinstance(adjoints, dict):
        for k, v in adjoints.items():
            lam[int(k)] += float(v)
    else:
        a = np.asarray(adjoints, dtype=float)
        if a.shape != (n,):
            raise ValueError(f"expected {n} adjoints, got shape {a.shape}")
        lam += a
    mu = np.zeros(n)
    grads = GradientSet.zeros(pr)
    kernel, tau_a = pr.kernel, pr.tau_a
    layer, neuron, time, prev = trace.layer, trace.neuron, trace.time, trace.prev_own
    n_jump = n_near = 0

    for k in range(n - 1, -1, -1):
        l = int(layer[k])
        if l == 0 or (lam[k] == 0.0 and mu[k] == 0.0):
            continue
        j = int(neuron[k])
        p = int(prev[k])
        a_minus = float(trace.adaptation[k])
        if p >= 0:
            E = math.exp(-(time[k] - time[p]) / tau_a)
        # level s_k = A + s_p E(t_k - t_p)
        if mu[k] != 0.0:
            grads.g_A[l - 1][j] += mu[k]
            if p >= 0:
                c = mu[k] * a_minus / tau_a
                lam[k] -= c
                lam[p] += c
                mu[p] += mu[k] * E
        lk = lam[k]
        if lk == 0.0:
            continue
        src = neuron[trace.parents[k]]
        par = trace.parents[k]
        size_pre = pr.topology.layer_sizes[l - 1]
        if trace.jump[k]:
            n_jump += 1
            trig = _triggers(trace, k)
            share = lk * trig / trig.sum()
            grads.g_d[l - 1][:, j] += np.bincount(src, weights=share, minlength=size_pre)
            np.add.at(lam, par, share)
            continue
        D = crossing_denominator(trace, k)
        if abs(D) < NEAR_DEGENERATE_D:
            n_near += 1
        tau = time[k] - trace.arrivals[k]
        wp = pr.w[l - 1][src, j]
        d_terms = lk * wp * psp_deriv(kernel, tau) / D
        w_terms = -lk * psp(kernel, tau) / D
        grads.g_w[l - 1][:, j] += np.bincount(src, weights=w_terms, minlength=size_pre)
        grads.g_d[l - 1][:, j] += np.bincount(src, weights=d_terms, minlength=size_pre)
        np.add.at(lam, par, d_terms)
        if p >= 0:
            mu[p] += lk * E / D
            lam[p] += lk * a_minus / (tau_a * D)

    grads.n_jump, grads.n_near_degenerate = n_jump, n_near
    return grads
