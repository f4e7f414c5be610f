import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eventgrad import KernelSpec, LossSpec, Sample, Topology, init_parameters, simulate
from eventgrad.gradients import (
    DegenerateDenominatorError, backward, crossing_denominator, dt_d_A, dt_d_delay,
    dt_d_delay_terms, dt_d_presyn_time, dt_d_prev_own_spike, dt_d_weight, gap_slope,
)
from eventgrad.kernels import psp, psp_deriv
from eventgrad.loss import sample_loss
from eventgrad.network import InitRanges
from eventgrad.oracle import finite_diff_gradient, pinned_spike_derivatives, relative_error

from conftest import make_params

DOUBLE = KernelSpec.double()
CAUSAL = KernelSpec.causal()


def non_input(tr):
    return [k for k in range(len(tr)) if tr.layer[k] > 0]


@st.composite
def nets(draw, kernel=DOUBLE):
    sizes = (draw(st.integers(1, 4)), draw(st.integers(1, 4)), draw(st.integers(1, 3)))
    seed = draw(st.integers(0, 2**31 - 1))
    A = draw(st.floats(0.0, 1.0))
    p = init_parameters(Topology(sizes), InitRanges(0.0, 1.0, 0.0, 5.0, A), seed=seed, kernel=kernel)
    rng = np.random.default_rng(seed)
    inputs = [np.sort(rng.uniform(0, 50, size=rng.integers(1, 4))) for _ in range(sizes[0])]
    return p, inputs


# ---------------------------------------------------------------------------
# structural identities

def test_single_parent_unit_response():
    p = make_params((1, 1), [[1.0]], [[2.0]], kernel=DOUBLE)
    tr = simulate(p, [[10.0]])
    (k,) = tr.spikes_of(1, 0)
    assert dt_d_delay(tr, k, 0) == 1.0
    assert dt_d_presyn_time(tr, k, 0) == 1.0
    assert dt_d_weight(tr, k, 0) < 0.0
    assert dt_d_A(tr, k) == 0.0


@given(net=nets())
def test_presyn_time_equals_delay_summand(net):
    p, inputs = net
    tr = simulate(p, inputs)
    for k in non_input(tr):
        terms = dt_d_delay_terms(tr, k)
        for g, parent in enumerate(tr.parents[k]):
            assert dt_d_presyn_time(tr, k, int(parent)) == terms[g]
        for i in range(p.topology.layer_sizes[tr.layer[k] - 1]):
            mask = tr.neuron[tr.parents[k]] == i
            assert dt_d_delay(tr, k, i) == float(np.sum(terms[mask]))


@given(net=nets())
def test_dt_d_A_zero_at_first_spikes(net):
    p, inputs = net
    tr = simulate(p, inputs)
    for k in non_input(tr):
        if tr.ordinal[k] == 0:
            assert dt_d_A(tr, k) == 0.0
            with pytest.raises(ValueError):
                dt_d_prev_own_spike(tr, k)


@given(net=nets())
def test_zero_adjoints_give_zero_gradients(net):
    p, inputs = net
    g = backward(simulate(p, inputs), {})
    for blocks in (g.g_w, g.g_d, g.g_A):
        assert all(np.all(b == 0.0) for b in blocks)


@given(net=nets(), shift=st.floats(0.5, 20.0))
def test_time_shift_leaves_gradients_unchanged(net, shift):
    p, inputs = net
    a = simulate(p, inputs)
    b = simulate(p, [x + shift for x in inputs])
    if len(a) != len(b) or np.any(a.time + shift > p.window_T - 1e-6):
        return
    for k in non_input(a):
        for i in range(p.topology.layer_sizes[a.layer[k] - 1]):
            assert dt_d_delay(b, k, i) == pytest.approx(dt_d_delay(a, k, i), rel=1e-7, abs=1e-12)
            assert dt_d_weight(b, k, i) == pytest.approx(dt_d_weight(a, k, i), rel=1e-7, abs=1e-12)
        assert dt_d_A(b, k) == pytest.approx(dt_d_A(a, k), rel=1e-7, abs=1e-12)
    if any(k is None for k in a.first_spikes(-1)):
        return  # a silent output is clamped to T, which does not shift
    la, adj_a = sample_loss(a, LossSpec(xi=5.0), 0)
    lb, adj_b = sample_loss(b, LossSpec(xi=5.0), 0)
    ga, gb = backward(a, adj_a), backward(b, adj_b)
    for x, y in zip(ga.g_w + ga.g_d + ga.g_A, gb.g_w + gb.g_d + gb.g_A):
        np.testing.assert_allclose(y, x, rtol=1e-6, atol=1e-12)


# ---------------------------------------------------------------------------
# denominators

def test_causal_jump_uses_left_limit_slope():
    # parent 0 sits 5 ms back; parent 1 lands at the spike and triggers it
    p = make_params((2, 1), [[0.45, 0.3]], [[0.0, 0.0]], kernel=CAUSAL)
    tr = simulate(p, [[0.0], [5.0]])
    (k,) = tr.spikes_of(1, 0)
    assert tr.jump[k] and tr.time[k] == 5.0
    assert crossing_denominator(tr, k) == pytest.approx(-0.45 * math.exp(-5 / 20) / 20, rel=1e-14)
    # only the trigger moves a jump crossing, one for one
    assert dt_d_delay(tr, k, 1) == 1.0 and dt_d_delay(tr, k, 0) == 0.0
    assert dt_d_weight(tr, k, 0) == 0.0


def test_double_before_peak_positive():
    p = make_params((1, 1), [[1.0]], [[0.0]])
    tr = simulate(p, [[0.0]])
    (k,) = tr.spikes_of(1, 0)
    assert tr.time[k] < DOUBLE.peak_time
    assert crossing_denominator(tr, k) > 0


@given(net=nets())
def test_denominator_matches_finite_difference(net):
    p, inputs = net
    tr = simulate(p, inputs)
    h = 1e-5
    for k in non_input(tr):
        l, j = int(tr.layer[k]), int(tr.neuron[k])
        w = p.w[l - 1][tr.neuron[tr.parents[k]], j]
        arr = tr.arrivals[k]
        a_pre = tr.adaptation[k]

        def gap(t):
            # V - theta with the adaptation level decaying from its value at the spike
            v = float(np.sum(w * psp(DOUBLE, t - arr)))
            return v - p.theta0 - a_pre * math.exp(-(t - tr.time[k]) / p.tau_a)

        t = tr.time[k]
        if np.any(np.abs(t - arr) < 2 * h):
            continue
        fd = (gap(t + h) - gap(t - h)) / (2 * h)
        D = crossing_denominator(tr, k)
        assert D == pytest.approx(fd, rel=1e-7, abs=1e-9)
        if p.A[l - 1][j] == 0:
            pure = float(np.sum(w * psp_deriv(DOUBLE, t - arr)))
            assert D == pytest.approx(pure, rel=1e-12)


def test_degenerate_denominator_is_reported():
    p = make_params((1, 1), [[1.0]], [[0.0]])
    tr = simulate(p, [[0.0]])
    flat = dataclasses.replace(tr, dv_dt=np.zeros(len(tr)))
    with pytest.raises(DegenerateDenominatorError, match="spike 1"):
        crossing_denominator(flat, 1)
    with pytest.raises(DegenerateDenominatorError):
        backward(flat, {1: 1.0})


def test_gap_slope_helper():
    s = gap_slope(DOUBLE, [1.0, 0.5], [0.0, 3.0], 6.0, adaptation=0.3, tau_a=30.0)
    expect = psp_deriv(DOUBLE, 6.0) + 0.5 * psp_deriv(DOUBLE, 3.0) + 0.01
    assert s == pytest.approx(expect, rel=1e-14)


# ---------------------------------------------------------------------------
# adaptation derivatives

def _two_spike_neuron(A):
    # two well separated inputs make two output spikes
    p = make_params((1, 1), [[1.2]], [[0.0]], A=[[A]])
    tr = simulate(p, [[5.0, 30.0]])
    ks = tr.spikes_of(1, 0)
    assert len(ks) == 2
    return tr, ks


def test_dt_d_A_without_adaptation_is_plain_ratio():
    tr, (k0, k1) = _two_spike_neuron(0.0)
    dt = tr.time[k1] - tr.time[k0]
    assert dt_d_A(tr, k1) == math.exp(-dt / 30.0) / tr.dv_dt[k1]
    assert dt_d_prev_own_spike(tr, k1) == 0.0


def test_dt_d_A_diminishes_with_large_A():
    tr0, (a0, a1) = _two_spike_neuron(0.0)
    # same interval and slope, only A differs in the denominator
    trA = dataclasses.replace(tr0, params=tr0.params.replace(A=(np.array([0.6]),)),
                              adaptation=np.where(np.arange(len(tr0)) == a1, 0.6 * 0.5, 0.0))
    assert 0 < dt_d_A(trA, a1) < dt_d_A(tr0, a1)


def test_prev_own_spike_positive_with_adaptation():
    tr, (k0, k1) = _two_spike_neuron(0.3)
    assert dt_d_prev_own_spike(tr, k1) > 0


@pytest.mark.parametrize("A", [0.1, 0.3, 0.6])
def test_adaptation_derivatives_match_pinned_oracle(A):
    tr, (k0, k1) = _two_spike_neuron(A)
    d_A, d_prev = pinned_spike_derivatives(tr, k1)
    assert relative_error(dt_d_A(tr, k1), d_A) < 1e-6
    assert relative_error(dt_d_prev_own_spike(tr, k1), d_prev) < 1e-6


def test_accumulated_adaptation_matches_pinned_oracle():
    p = make_params((1, 1), [[1.3]], [[0.0]], A=[[0.4]])
    tr = simulate(p, [[2.0, 14.0, 26.0, 40.0]])
    ks = tr.spikes_of(1, 0)
    assert len(ks) >= 3
    for k in ks[1:]:
        d_A, d_prev = pinned_spike_derivatives(tr, k)
        assert relative_error(dt_d_A(tr, k), d_A) < 1e-6
        assert relative_error(dt_d_prev_own_spike(tr, k), d_prev) < 1e-6


# ---------------------------------------------------------------------------
# backward pass

def test_two_factor_chain():
    p = make_params((1, 1, 1), [[1.0], [1.0]], [[1.0], [2.0]])
    tr = simulate(p, [[10.0]])
    (h,) = tr.spikes_of(1, 0)
    (o,) = tr.spikes_of(2, 0)
    lam = 0.7
    g = backward(tr, {o: lam})
    expect = lam * dt_d_presyn_time(tr, o, h) * dt_d_delay(tr, h, 0)
    assert g.g_d[0][0, 0] == pytest.approx(expect, rel=1e-15)
    assert g.g_d[1][0, 0] == pytest.approx(lam * dt_d_delay(tr, o, 0), rel=1e-15)
    assert g.g_w[1][0, 0] == pytest.approx(lam * dt_d_weight(tr, o, 0), rel=1e-15)


def test_dict_and_array_adjoints_agree():
    p = init_parameters(Topology((3, 4, 2)), seed=3)
    tr = simulate(p, [[1.0], [4.0, 9.0], [2.0]])
    _, adj = sample_loss(tr, LossSpec(), 1)
    a = backward(tr, adj)
    b = backward(tr, {k: v for k, v in enumerate(adj) if v})
    for x, y in zip(a.g_w + a.g_d + a.g_A, b.g_w + b.g_d + b.g_A):
        np.testing.assert_array_equal(x, y)


@given(net=nets())
def test_zero_gradient_locality(net):
    p, inputs = net
    tr = simulate(p, inputs)
    _, adj = sample_loss(tr, LossSpec(), 0)
    g = backward(tr, adj)
    # collect synapses that fed a spike with a causal path to the loss
    live = set(int(k) for k in np.flatnonzero(adj))
    for k in range(len(tr) - 1, -1, -1):
        if k in live:
            live.update(int(q) for q in tr.parents[k])
            if tr.prev_own[k] >= 0:
                live.add(int(tr.prev_own[k]))
    used = set()
    for k in live:
        if tr.layer[k] > 0:
            for q in tr.parents[k]:
                used.add((int(tr.layer[k]) - 1, int(tr.neuron[q]), int(tr.neuron[k])))
    for l, w in enumerate(g.g_w):
        for i, j in np.ndindex(w.shape):
            if (l, i, j) not in used:
                assert w[i, j] == 0.0 and g.g_d[l][i, j] == 0.0


def test_two_input_matches_finite_difference():
    p = make_params((2, 1), [[0.4, 0.5]], [[1.0, 2.5]])
    s = Sample([[3.0], [6.0]], 0, [[12.0]])
    spec = LossSpec("mse")
    tr = simulate(p, s.inputs)
    _, adj = sample_loss(tr, spec, 0, s.targets)
    g = backward(tr, adj)
    for h in p.handles("wd"):
        num, stable = finite_diff_gradient(p, s, spec, h, 1e-4)
        assert stable
        assert relative_error(g.get(h), num) < 1e-5
