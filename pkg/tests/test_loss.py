import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eventgrad import LossKind, LossSpec, simulate
from eventgrad.loss import predict, sample_loss, spike_time_mse, ttfs_cross_entropy

from conftest import make_params

times_st = st.lists(st.floats(0.0, 100.0), min_size=2, max_size=6)


def test_two_class_example():
    loss, adj = ttfs_cross_entropy([10.0, 20.0], 0, 10.0, 100.0)
    p0 = 1 / (1 + math.exp(-1))
    assert p0 == pytest.approx(0.731059, abs=1e-6)
    assert loss == pytest.approx(0.313262, abs=1e-6)
    assert loss == pytest.approx(-math.log(p0), rel=1e-14)
    # an earlier label spike lowers the loss, so dL/dt_label > 0
    assert adj[0] == pytest.approx((1 - p0) / 10, rel=1e-14)
    assert adj[1] == pytest.approx(-(1 - p0) / 10, rel=1e-14)


@pytest.mark.parametrize("K", [2, 3, 7])
def test_ties_give_log_k(K):
    loss, adj = ttfs_cross_entropy([5.0] * K, 1, 4.0, 100.0)
    assert loss == pytest.approx(math.log(K), rel=1e-14)
    assert abs(adj.sum()) < 1e-15


def test_silent_outputs_clamped():
    loss, adj = ttfs_cross_entropy([None, 30.0, None], 1, 20.0, 100.0, 0.1)
    ref, _ = ttfs_cross_entropy([100.0, 30.0, 100.0], 1, 20.0, 100.0, 0.0)
    assert loss == pytest.approx(ref + 0.2, rel=1e-14)
    assert adj[0] == 0.0 and adj[2] == 0.0 and adj[1] != 0.0


def test_label_out_of_range():
    with pytest.raises(ValueError, match="label 3"):
        ttfs_cross_entropy([1.0, 2.0], 3, 1.0, 100.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        LossSpec(xi=0.0)
    with pytest.raises(ValueError):
        LossSpec(no_spike_penalty=-1.0)
    assert LossSpec().resolved_xi(20.0) == 20.0
    assert LossSpec(xi=3.0).resolved_xi(20.0) == 3.0
    s = LossSpec("mse", 4.0, 0.5)
    assert LossSpec.from_dict(s.to_dict()) == s


@given(t=times_st, data=st.data())
def test_adjoints_sum_to_zero(t, data):
    label = data.draw(st.integers(0, len(t) - 1))
    _, adj = ttfs_cross_entropy(t, label, 7.0, 100.0)
    assert abs(adj.sum()) < 1e-12


@given(t=times_st, c=st.floats(-50.0, 50.0), data=st.data())
def test_shift_invariance(t, c, data):
    label = data.draw(st.integers(0, len(t) - 1))
    a, _ = ttfs_cross_entropy(t, label, 5.0, 1e9)
    b, _ = ttfs_cross_entropy([x + c for x in t], label, 5.0, 1e9)
    assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


@given(t=times_st, data=st.data())
def test_adjoint_matches_finite_difference(t, data):
    label = data.draw(st.integers(0, len(t) - 1))
    xi = 6.0
    _, adj = ttfs_cross_entropy(t, label, xi, 1e9)
    h = 1e-5
    for c in range(len(t)):
        up, dn = list(t), list(t)
        up[c] += h
        dn[c] -= h
        fd = (ttfs_cross_entropy(up, label, xi, 1e9)[0] - ttfs_cross_entropy(dn, label, xi, 1e9)[0]) / (2 * h)
        # loss is smooth; central difference error is O(h^2 / xi^3) plus roundoff
        assert abs(fd - adj[c]) <= 1e-9 * abs(adj[c]) + 1e-9


@given(t=times_st, dt=st.floats(0.0, 20.0), data=st.data())
def test_earlier_label_never_hurts(t, dt, data):
    label = data.draw(st.integers(0, len(t) - 1))
    a, _ = ttfs_cross_entropy(t, label, 5.0, 1e9)
    moved = list(t)
    moved[label] -= dt
    b, _ = ttfs_cross_entropy(moved, label, 5.0, 1e9)
    assert b <= a + 1e-12


def test_mse_examples():
    loss, adj = spike_time_mse([[5.0, 9.0]], [[5.0, 9.0]])
    assert loss == 0.0 and np.all(adj[0] == 0.0)
    loss, adj = spike_time_mse([[12.0]], [[10.0]])
    assert loss == 4.0 and adj[0].tolist() == [4.0]
    loss, adj = spike_time_mse([[12.0, 30.0]], [[10.0]], 1.0)
    assert loss == 5.0 and adj[0].tolist() == [4.0, 0.0]
    loss, _ = spike_time_mse([[12.0]], [[10.0, 50.0]], 1.0)
    assert loss == 5.0
    with pytest.raises(ValueError):
        spike_time_mse([[1.0]], [[1.0], [2.0]])


def test_predict_and_sample_loss():
    # output 1 gets the stronger input and fires first
    p = make_params((1, 3), [[0.0, 2.0, 1.0]], [[0.0, 0.0, 0.0]])
    tr = simulate(p, [[10.0]])
    assert predict(tr) == 1
    loss, adj = sample_loss(tr, LossSpec(xi=5.0), 1)
    firsts = tr.first_spikes(-1)
    assert firsts[0] is None
    times = [None] + [float(tr.time[k]) for k in firsts[1:]]
    ref, ref_adj = ttfs_cross_entropy(times, 1, 5.0, 100.0)
    assert loss == ref
    assert adj[firsts[1]] == ref_adj[1] and adj[firsts[2]] == ref_adj[2]
    assert np.count_nonzero(adj) == 2
    with pytest.raises(ValueError, match="target"):
        sample_loss(tr, LossSpec(LossKind.MSE), 0)


def test_predict_ties_and_silence_go_to_lowest_index():
    silent = simulate(make_params((1, 3), [[0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]]), [[10.0]])
    assert predict(silent) == 0
    tied = simulate(make_params((1, 3), [[0.0, 1.0, 1.0]], [[0.0, 0.0, 0.0]]), [[10.0]])
    assert predict(tied) == 1
