"""Topology, trainable parameters, spike records and gradient containers."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator

import numpy as np

from .kernels import KernelSpec

CHECKPOINT_VERSION = 1
RASTER_VERSION = 1

# A parameter coordinate: ("w" | "d", layer, i, j) or ("A", layer, j, None).
# ``layer`` indexes the synapse block; for "A" it indexes the block feeding the
# neuron, so A[l][j] belongs to neuron j of network layer l + 1.
ParamHandle = tuple


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Topology:
    """Dense feedforward layer sizes, input layer first."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("a topology needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be >= 1, got {sizes}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def block_shapes(self) -> list[tuple[int, int]]:
        s = self.layer_sizes
        return [(s[l], s[l + 1]) for l in range(len(s) - 1)]

    @property
    def n_synapses(self) -> int:
        return sum(a * b for a, b in self.block_shapes())

    @property
    def n_parameters(self) -> int:
        return 2 * self.n_synapses + sum(self.layer_sizes[1:])


@dataclass(frozen=True)
class InitRanges:
    """Uniform init bounds.

    ``w_lo`` and ``w_hi`` are either one value for every layer or a tuple with
    one value per weight block, which lets wide layers start at a smaller scale.
    """

    w_lo: float | tuple[float, ...] = 0.0
    w_hi: float | tuple[float, ...] = 1.0
    d_lo: float = 0.0
    d_hi: float = 5.0
    A_init: float = 0.5

    def __post_init__(self) -> None:
        for name in ("w_lo", "w_hi"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)):
                object.__setattr__(self, name, tuple(float(x) for x in v))
        problems = []
        lo, hi = self.w_lo, self.w_hi
        if isinstance(lo, tuple) and isinstance(hi, tuple) and len(lo) != len(hi):
            problems.append(f"w_lo has {len(lo)} entries but w_hi has {len(hi)}")
        else:
            n = max(len(x) if isinstance(x, tuple) else 1 for x in (lo, hi))
            for l in range(n):
                a, b = self._pick(lo, l), self._pick(hi, l)
                if a > b:
                    problems.append(f"w_lo={a} > w_hi={b}" + (f" in block {l}" if n > 1 else ""))
        if self.d_lo > self.d_hi:
            problems.append(f"d_lo={self.d_lo} > d_hi={self.d_hi}")
        if self.d_lo < 0:
            problems.append(f"d_lo={self.d_lo} is negative")
        if self.A_init < 0:
            problems.append(f"A_init={self.A_init} is negative")
        if problems:
            raise ValueError("invalid init ranges: " + "; ".join(problems))

    @staticmethod
    def _pick(v, l: int) -> float:
        return v[l] if isinstance(v, tuple) else float(v)

    def w_bounds(self, n_blocks: int) -> list[tuple[float, float]]:
        """``(lo, hi)`` for each of ``n_blocks`` weight blocks."""
        for name in ("w_lo", "w_hi"):
            v = getattr(self, name)
            if isinstance(v, tuple) and len(v) != n_blocks:
                raise ValueError(f"{name} has {len(v)} entries for {n_blocks} weight blocks")
        return [(self._pick(self.w_lo, l), self._pick(self.w_hi, l)) for l in range(n_blocks)]

    def to_dict(self) -> dict:
        out = {f: getattr(self, f) for f in ("w_lo", "w_hi", "d_lo", "d_hi", "A_init")}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


@dataclass(frozen=True, eq=False)
class Parameters:
    """All trainable (w, d, A) and fixed neuron constants of a network.

    ``w[l]`` and ``d[l]`` have shape ``(size[l], size[l+1])``; ``A[l]`` has
    shape ``(size[l+1],)``.  Arrays are stored read-only.
    """

    topology: Topology
    w: tuple[np.ndarray, ...]
    d: tuple[np.ndarray, ...]
    A: tuple[np.ndarray, ...]
    kernel: KernelSpec = field(default_factory=KernelSpec)
    theta0: float = 0.5
    tau_a: float = 30.0
    v_rest: float = 0.0
    window_T: float = 100.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "w", tuple(_readonly(a) for a in self.w))
        object.__setattr__(self, "d", tuple(_readonly(a) for a in self.d))
        object.__setattr__(self, "A", tuple(_readonly(a) for a in self.A))
        shapes = self.topology.block_shapes()
        if len(self.w) != len(shapes) or len(self.d) != len(shapes) or len(self.A) != len(shapes):
            raise ValueError("parameter block count does not match topology")
        for l, (a, b) in enumerate(shapes):
            if self.w[l].shape != (a, b) or self.d[l].shape != (a, b):
                raise ValueError(f"block {l}: expected w/d shape {(a, b)}")
            if self.A[l].shape != (b,):
                raise ValueError(f"block {l}: expected A shape {(b,)}")
        if not self.window_T > 0:
            raise ValueError("window_T must be positive")
        if not self.tau_a > 0:
            raise ValueError("tau_a must be positive")
        if not self.theta0 > self.v_rest:
            raise ValueError("theta0 must exceed v_rest")
        for l in range(len(shapes)):
            if not np.all(np.isfinite(self.w[l])):
                raise ValueError(f"non-finite weight in block {l}")
            if np.any(self.d[l] < 0) or np.any(self.d[l] >= self.window_T):
                raise ValueError(f"delays of block {l} must lie in [0, window_T)")
            if np.any(self.A[l] < 0) or not np.all(np.isfinite(self.A[l])):
                raise ValueError(f"adaptation jumps of block {l} must be finite and >= 0")

    def replace(self, **changes) -> Parameters:
        return dataclasses.replace(self, **changes)

    def get(self, handle: ParamHandle) -> float:
        fam, l, i, j = handle
        if fam == "A":
            return float(self.A[l][i])
        return float(getattr(self, fam)[l][i, j])

    def with_value(self, handle: ParamHandle, value: float) -> Parameters:
        """Copy with one coordinate replaced."""
        fam, l, i, j = handle
        blocks = [np.array(b) for b in getattr(self, fam)]
        if fam == "A":
            blocks[l][i] = value
        else:
            blocks[l][i, j] = value
        return self.replace(**{fam: tuple(blocks)})

    def handles(self, families: str = "wdA") -> Iterator[ParamHandle]:
        for fam in families:
            for l, (a, b) in enumerate(self.topology.block_shapes()):
                if fam == "A":
                    for j in range(b):
                        yield ("A", l, j, None)
                else:
                    for i in range(a):
                        for j in range(b):
                            yield (fam, l, i, j)

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "topology": list(self.topology.layer_sizes),
            "kernel": self.kernel.to_dict(),
            "theta0": self.theta0,
            "tau_a": self.tau_a,
            "v_rest": self.v_rest,
            "window_T": self.window_T,
            "w": [b.ravel().tolist() for b in self.w],
            "d": [b.ravel().tolist() for b in self.d],
            "A": [b.tolist() for b in self.A],
        }

    @classmethod
    def from_dict(cls, data: dict) -> Parameters:
        version = data.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {version!r}")
        topo = Topology(tuple(data["topology"]))
        shapes = topo.block_shapes()
        w = tuple(np.asarray(b, dtype=float).reshape(s) for b, s in zip(data["w"], shapes))
        d = tuple(np.asarray(b, dtype=float).reshape(s) for b, s in zip(data["d"], shapes))
        A = tuple(np.asarray(b, dtype=float) for b in data["A"])
        return cls(
            topo, w, d, A,
            kernel=KernelSpec.from_dict(data["kernel"]),
            theta0=float(data["theta0"]),
            tau_a=float(data["tau_a"]),
            v_rest=float(data["v_rest"]),
            window_T=float(data["window_T"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> Parameters:
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_parameters(
    topology: Topology,
    ranges: InitRanges = InitRanges(),
    seed: int = 0,
    *,
    kernel: KernelSpec | None = None,
    theta0: float = 0.5,
    tau_a: float = 30.0,
    v_rest: float = 0.0,
    window_T: float = 100.0,
) -> Parameters:
    """Uniform weights and delays from a seeded generator, constant ``A``."""
    rng = np.random.default_rng(seed)
    shapes = topology.block_shapes()
    bounds = ranges.w_bounds(len(shapes))
    w = tuple(rng.uniform(lo, hi, size=s) for (lo, hi), s in zip(bounds, shapes))
    d = tuple(rng.uniform(ranges.d_lo, ranges.d_hi, size=s) for s in shapes)
    A = tuple(np.full(b, float(ranges.A_init)) for _, b in shapes)
    return Parameters(
        topology, w, d, A,
        kernel=kernel or KernelSpec(),
        theta0=theta0, tau_a=tau_a, v_rest=v_rest, window_T=window_T,
    )


_HANDLE_RE = re.compile(r"^(w|d)\[(\d+)\]\[(\d+)\]\[(\d+)\]$|^A\[(\d+)\]\[(\d+)\]$")


def format_handle(handle: ParamHandle) -> str:
    fam, l, i, j = handle
    if fam == "A":
        return f"A[{l}][{i}]"
    return f"{fam}[{l}][{i}][{j}]"


def parse_handle(text: str) -> ParamHandle:
    m = _HANDLE_RE.match(text)
    if not m:
        raise ValueError(f"bad parameter id {text!r}")
    if m.group(1):
        return (m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4)))
    return ("A", int(m.group(5)), int(m.group(6)), None)


@dataclass(frozen=True)
class SpikeEvent:
    layer: int
    neuron: int
    ordinal: int
    time: float


@dataclass(frozen=True, eq=False)
class Trace:
    """Causal record of one forward pass.

    Spikes (input spikes included, layer 0) are indexed ``0..n-1`` in
    ``(time, layer, neuron)`` order, which is a topological order of the spike
    DAG.  Per-spike arrays:

    ``parents[k]`` / ``arrivals[k]``
        indices of the presynaptic spikes in the segment that produced spike
        ``k`` and their arrival times ``t_pre + d``.
    ``prev_own[k]``
        index of the neuron's previous spike, ``-1`` if none.
    ``dv_dt[k]``
        membrane slope at the crossing (left limit for jump crossings).
    ``adaptation[k]``
        threshold adaptation ``a(t_k^-)`` just before the spike.
    ``adapt_gain[k]``
        ``d a(t_k^-) / dA`` with all earlier own spike times held fixed.
    ``jump[k]``
        crossing happened at an arrival instant (causal kernel only).
    """

    params: Parameters
    layer: np.ndarray
    neuron: np.ndarray
    ordinal: np.ndarray
    time: np.ndarray
    parents: tuple[np.ndarray, ...]
    arrivals: tuple[np.ndarray, ...]
    prev_own: np.ndarray
    dv_dt: np.ndarray
    adaptation: np.ndarray
    adapt_gain: np.ndarray
    jump: np.ndarray

    def __len__(self) -> int:
        return len(self.time)

    @property
    def window_T(self) -> float:
        return self.params.window_T

    @cached_property
    def events(self) -> tuple[SpikeEvent, ...]:
        return tuple(
            SpikeEvent(int(l), int(n), int(f), float(t))
            for l, n, f, t in zip(self.layer, self.neuron, self.ordinal, self.time)
        )

    @cached_property
    def slope(self) -> np.ndarray:
        """Crossing slope ``dV/dt - dtheta/dt`` at every spike."""
        return self.dv_dt + self.adaptation / self.params.tau_a

    @cached_property
    def _by_neuron(self) -> dict[tuple[int, int], list[int]]:
        out: dict[tuple[int, int], list[int]] = {}
        for k, (l, n) in enumerate(zip(self.layer.tolist(), self.neuron.tolist())):
            out.setdefault((l, n), []).append(k)
        return out

    def spikes_of(self, layer: int, neuron: int) -> list[int]:
        return list(self._by_neuron.get((layer, neuron), []))

    def spike_times(self, layer: int) -> list[np.ndarray]:
        size = self.params.topology.layer_sizes[layer]
        return [self.time[self.spikes_of(layer, j)] for j in range(size)]

    def spike_counts(self) -> list[np.ndarray]:
        sizes = self.params.topology.layer_sizes
        counts = [np.zeros(s, dtype=int) for s in sizes]
        for l, n in zip(self.layer, self.neuron):
            counts[l][n] += 1
        return counts

    def first_spikes(self, layer: int = -1) -> list[int | None]:
        """Index of each neuron's first spike in ``layer`` (None if silent)."""
        sizes = self.params.topology.layer_sizes
        layer = layer % len(sizes)
        out: list[int | None] = []
        for j in range(sizes[layer]):
            ks = self._by_neuron.get((layer, j))
            out.append(ks[0] if ks else None)
        return out

    def raster_dict(self) -> dict:
        return {
            "schema_version": RASTER_VERSION,
            "window_T": self.window_T,
            "columns": ["layer", "neuron", "ordinal", "time"],
            "spikes": [
                [int(l), int(n), int(f), float(t)]
                for l, n, f, t in zip(self.layer, self.neuron, self.ordinal, self.time)
            ],
        }

    def save_raster(self, path) -> None:
        Path(path).write_text(json.dumps(self.raster_dict()) + "\n")


@dataclass
class GradientSet:
    """dL/dw, dL/dd, dL/dA with the same block layout as :class:`Parameters`."""

    g_w: list[np.ndarray]
    g_d: list[np.ndarray]
    g_A: list[np.ndarray]
    loss_value: float = 0.0
    n_jump: int = 0
    n_near_degenerate: int = 0

    @classmethod
    def zeros(cls, params: Parameters) -> GradientSet:
        shapes = params.topology.block_shapes()
        return cls(
            [np.zeros(s) for s in shapes],
            [np.zeros(s) for s in shapes],
            [np.zeros(b) for _, b in shapes],
        )

    def __add__(self, other: GradientSet) -> GradientSet:
        return GradientSet(
            [a + b for a, b in zip(self.g_w, other.g_w)],
            [a + b for a, b in zip(self.g_d, other.g_d)],
            [a + b for a, b in zip(self.g_A, other.g_A)],
            self.loss_value + other.loss_value,
            self.n_jump + other.n_jump,
            self.n_near_degenerate + other.n_near_degenerate,
        )

    def scaled(self, factor: float) -> GradientSet:
        return GradientSet(
            [a * factor for a in self.g_w],
            [a * factor for a in self.g_d],
            [a * factor for a in self.g_A],
            self.loss_value * factor,
            self.n_jump,
            self.n_near_degenerate,
        )

    def get(self, handle: ParamHandle) -> float:
        fam, l, i, j = handle
        if fam == "A":
            return float(self.g_A[l][i])
        return float((self.g_w if fam == "w" else self.g_d)[l][i, j])

    def first_nonfinite(self) -> ParamHandle | None:
        for fam, blocks in (("w", self.g_w), ("d", self.g_d), ("A", self.g_A)):
            for l, b in enumerate(blocks):
                bad = np.argwhere(~np.isfinite(b))
                if len(bad):
                    idx = tuple(int(x) for x in bad[0])
                    return (fam, l, idx[0], None) if fam == "A" else (fam, l, *idx)
        return None
