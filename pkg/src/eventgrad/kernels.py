"""Post-synaptic potential kernels and their time derivatives.

Two kernel families are supported:

* ``CAUSAL_EXP``  -- ``eps(tau) = exp(-tau / tau_m)`` for ``tau >= 0``.  The
  membrane potential jumps at every arrival.
* ``DOUBLE_EXP``  -- ``eps(tau) = N * (exp(-tau / tau_m) - exp(-tau / tau_s))``,
  normalised so that its peak equals one.  Continuous at ``tau = 0``, which
  gives smooth threshold up-crossings.

All functions accept scalars or numpy arrays and return the same kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class KernelKind(str, Enum):
    CAUSAL_EXP = "causal"
    DOUBLE_EXP = "double"


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus its time constants (ms)."""

    kind: KernelKind = KernelKind.DOUBLE_EXP
    tau_m: float = 20.0
    tau_s: float = 5.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if not self.tau_m > 0:
            raise ValueError(f"tau_m must be positive, got {self.tau_m}")
        if self.kind is KernelKind.DOUBLE_EXP:
            if not 0 < self.tau_s < self.tau_m:
                raise ValueError(
                    f"double-exponential kernel needs 0 < tau_s < tau_m, "
                    f"got tau_s={self.tau_s}, tau_m={self.tau_m}"
                )

    @classmethod
    def causal(cls, tau_m: float = 20.0) -> KernelSpec:
        return cls(KernelKind.CAUSAL_EXP, tau_m, 0.0)

    @classmethod
    def double(cls, tau_m: float = 20.0, tau_s: float = 5.0) -> KernelSpec:
        return cls(KernelKind.DOUBLE_EXP, tau_m, tau_s)

    @property
    def is_causal(self) -> bool:
        return self.kind is KernelKind.CAUSAL_EXP

    @property
    def peak_time(self) -> float:
        """Argmax of the kernel (0 for the causal exponential)."""
        if self.is_causal:
            return 0.0
        tm, ts = self.tau_m, self.tau_s
        return tm * ts / (tm - ts) * math.log(tm / ts)

    @property
    def norm(self) -> float:
        """Multiplicative constant applied to the exponential difference."""
        if self.is_causal:
            return 1.0
        tp = self.peak_time
        return 1.0 / (math.exp(-tp / self.tau_m) - math.exp(-tp / self.tau_s))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "tau_m": self.tau_m, "tau_s": self.tau_s}

    @classmethod
    def from_dict(cls, data: dict) -> KernelSpec:
        return cls(KernelKind(data["kind"]), float(data["tau_m"]), float(data["tau_s"]))


def psp(spec: KernelSpec, tau):
    """Kernel value at elapsed time ``tau`` (ms) since arrival."""
    t = np.asarray(tau, dtype=float)
    tc = np.maximum(t, 0.0)
    if spec.is_causal:
        val = np.exp(-tc / spec.tau_m)
    else:
        val = spec.norm * (np.exp(-tc / spec.tau_m) - np.exp(-tc / spec.tau_s))
    out = np.where(t >= 0.0, val, 0.0)
    return float(out) if out.ndim == 0 else out


def psp_deriv(spec: KernelSpec, tau):
    """Time derivative of :func:`psp`.

    For the causal exponential at ``tau == 0`` the right-limit ``-1/tau_m`` is
    returned; use :func:`is_jump_point` to detect that case.
    """
    t = np.asarray(tau, dtype=float)
    tc = np.maximum(t, 0.0)
    if spec.is_causal:
        val = -np.exp(-tc / spec.tau_m) / spec.tau_m
    else:
        val = spec.norm * (
            np.exp(-tc / spec.tau_s) / spec.tau_s - np.exp(-tc / spec.tau_m) / spec.tau_m
        )
    out = np.where(t >= 0.0, val, 0.0)
    return float(out) if out.ndim == 0 else out


def is_jump_point(spec: KernelSpec, tau) -> bool | np.ndarray:
    """True where the kernel is discontinuous (causal exponential at 0)."""
    t = np.asarray(tau, dtype=float)
    out = (t == 0.0) & spec.is_causal
    return bool(out) if out.ndim == 0 else out


def psp_deriv_flagged(spec: KernelSpec, tau: float) -> tuple[float, bool]:
    """Scalar ``psp_deriv`` plus the jump flag for that evaluation point."""
    return psp_deriv(spec, tau), is_jump_point(spec, tau)
