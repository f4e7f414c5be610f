"""Losses on output spike times and their adjoints ``dL/dt``."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

from .network import Trace


class LossKind(str, Enum):
    TTFS = "ttfs"
    MSE = "mse"


@dataclass(frozen=True)
class LossSpec:
    """``xi`` is the softmax temperature in ms; ``None`` means ``tau_m`` of the kernel."""

    kind: LossKind = LossKind.TTFS
    xi: float | None = None
    no_spike_penalty: float = 0.1

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.xi is not None and not self.xi > 0:
            raise ValueError(f"xi must be positive, got {self.xi}")
        if not self.no_spike_penalty >= 0:
            raise ValueError(f"no_spike_penalty must be >= 0, got {self.no_spike_penalty}")

    def resolved_xi(self, tau_m: float) -> float:
        return tau_m if self.xi is None else float(self.xi)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "xi": self.xi, "no_spike_penalty": self.no_spike_penalty}

    @classmethod
    def from_dict(cls, data: dict) -> LossSpec:
        return cls(LossKind(data["kind"]), data.get("xi"), float(data["no_spike_penalty"]))


def ttfs_cross_entropy(
    first_spike_times: Sequence[float | None],
    label: int,
    xi: float,
    no_spike_time: float,
    no_spike_penalty: float = 0.1,
) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy over ``-t_c / xi``.

    Silent outputs (``None``) are clamped to ``no_spike_time``, cost
    ``no_spike_penalty`` each and receive a zero adjoint.  For spiking
    outputs ``dL/dt_c = (1[c = label] - p_c) / xi``: an earlier spike raises
    its class probability.
    """
    K = len(first_spike_times)
    if not 0 <= label < K:
        raise ValueError(f"label {label} out of range for {K} outputs")
    silent = np.array([t is None for t in first_spike_times])
    t = np.array([no_spike_time if s is None else float(s) for s in first_spike_times])
    logp = log_softmax(-t / xi)
    p = np.exp(logp)
    loss = -float(logp[label]) + no_spike_penalty * int(silent.sum())
    y = np.zeros(K)
    y[label] = 1.0
    adj = np.where(silent, 0.0, (y - p) / xi)
    return loss, adj


def spike_time_mse(
    actual: Sequence[Sequence[float]],
    target: Sequence[Sequence[float]],
    no_spike_penalty: float = 0.1,
) -> tuple[float, list[np.ndarray]]:
    """Squared timing error, k-th actual spike paired with k-th target spike.

    Unpaired spikes on either side cost ``no_spike_penalty`` each and have
    zero adjoint.
    """
    if len(actual) != len(target):
        raise ValueError(f"{len(actual)} actual trains vs {len(target)} target trains")
    loss = 0.0
    adjs = []
    for act, tgt in zip(actual, target):
        a = np.asarray(act, dtype=float)
        g = np.asarray(tgt, dtype=float)
        m = min(len(a), len(g))
        diff = a[:m] - g[:m]
        loss += float(np.sum(diff**2)) + no_spike_penalty * abs(len(a) - len(g))
        adj = np.zeros(len(a))
        adj[:m] = 2.0 * diff
        adjs.append(adj)
    return loss, adjs


def predict(trace: Trace) -> int:
    """Output neuron with the earliest first spike; ties and silence go to the lowest index."""
    best, best_t = 0, np.inf
    for c, k in enumerate(trace.first_spikes(-1)):
        if k is not None and trace.time[k] < best_t:
            best, best_t = c, trace.time[k]
    return best


def sample_loss(trace: Trace, spec: LossSpec, label: int = 0, targets=None) -> tuple[float, np.ndarray]:
    """Loss of one simulated sample and ``dL/dt`` for every spike of the trace."""
    pr = trace.params
    adj = np.zeros(len(trace))
    out_layer = pr.topology.n_layers - 1
    if spec.kind is LossKind.TTFS:
        firsts = trace.first_spikes(out_layer)
        times = [None if k is None else float(trace.time[k]) for k in firsts]
        loss, a = ttfs_cross_entropy(
            times, label, spec.resolved_xi(pr.kernel.tau_m), pr.window_T, spec.no_spike_penalty
        )
        for k, v in zip(firsts, a):
            if k is not None:
                adj[k] = v
        return loss, adj
    if targets is None:
        raise ValueError("spike-time MSE needs target spike trains")
    idx = [trace.spikes_of(out_layer, j) for j in range(pr.topology.n_outputs)]
    actual = [trace.time[i] for i in idx]
    loss, a = spike_time_mse(actual, targets, spec.no_spike_penalty)
    for i, v in zip(idx, a):
        adj[i] = v
    return loss, adj
