"""Datasets, generators, spike encoders and the IDX reader."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DATASET_VERSION = 1

YY_R_BIG = 0.5
YY_R_SMALL = 0.25
YY_R_DOT = 0.09
YY_CENTER = (0.5, 0.5)
YY_TOP = (0.5, 0.75)
YY_BOTTOM = (0.5, 0.25)


@dataclass
class Sample:
    """Input spike trains (one sorted array per input neuron), label, optional targets."""

    inputs: list[np.ndarray]
    label: int = 0
    targets: list[np.ndarray] | None = None

    def __post_init__(self) -> None:
        self.inputs = [np.sort(np.asarray(s, dtype=float).reshape(-1)) for s in self.inputs]
        if self.targets is not None:
            self.targets = [np.sort(np.asarray(s, dtype=float).reshape(-1)) for s in self.targets]
        self.label = int(self.label)

    def to_dict(self) -> dict:
        out = {"inputs": [s.tolist() for s in self.inputs], "label": self.label}
        if self.targets is not None:
            out["targets"] = [s.tolist() for s in self.targets]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> Sample:
        return cls(data["inputs"], data["label"], data.get("targets"))


@dataclass
class Dataset:
    """Labelled samples; ``test`` holds a designated held-out set if there is one."""

    samples: list[Sample]
    n_inputs: int
    n_classes: int
    window_T: float
    task: str = "custom"
    test: list[Sample] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=int)

    def to_dict(self) -> dict:
        out = {
            "schema_version": DATASET_VERSION,
            "task": self.task,
            "n_inputs": self.n_inputs,
            "n_classes": self.n_classes,
            "window_T": self.window_T,
            "meta": self.meta,
            "samples": [s.to_dict() for s in self.samples],
        }
        if self.test is not None:
            out["test"] = [s.to_dict() for s in self.test]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> Dataset:
        version = data.get("schema_version")
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset schema_version {version!r}")
        test = data.get("test")
        return cls(
            [Sample.from_dict(s) for s in data["samples"]],
            int(data["n_inputs"]), int(data["n_classes"]), float(data["window_T"]),
            data.get("task", "custom"),
            None if test is None else [Sample.from_dict(s) for s in test],
            data.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> Dataset:
        return cls.from_dict(json.loads(Path(path).read_text()))


def validate(dataset: Dataset) -> list[str]:
    """Every violated sample invariant, as messages; empty when valid."""
    problems = []
    T = dataset.window_T
    parts = [("sample", dataset.samples)]
    if dataset.test is not None:
        parts.append(("test sample", dataset.test))
    for name, samples in parts:
        for n, s in enumerate(samples):
            if len(s.inputs) != dataset.n_inputs:
                problems.append(f"{name} {n}: {len(s.inputs)} trains, expected {dataset.n_inputs}")
            if not 0 <= s.label < dataset.n_classes:
                problems.append(f"{name} {n}: label {s.label} outside [0, {dataset.n_classes})")
            for i, tr in enumerate(s.inputs):
                if len(tr) and (tr[0] < 0 or tr[-1] >= T or not np.all(np.isfinite(tr))):
                    problems.append(f"{name} {n}, input {i}: spike outside [0, {T})")
                if np.any(np.diff(tr) < 0):
                    problems.append(f"{name} {n}, input {i}: times not sorted")
    return problems


# ---------------------------------------------------------------------------
# synthetic spatiotemporal patterns

def gen_synthetic(
    n_samples: int, n_inputs: int, n_classes: int, window_T: float = 100.0, seed: int = 0,
    jitter: float = 2.0, proto_frac: float = 0.8,
) -> Dataset:
    """Jittered copies of one random single-spike prototype per class."""
    if min(n_samples, n_inputs, n_classes) < 1:
        raise ValueError("n_samples, n_inputs and n_classes must be positive")
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0.0, proto_frac * window_T, size=(n_classes, n_inputs))
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    hi = np.nextafter(window_T, 0.0)
    samples = []
    for c in labels:
        t = np.clip(protos[c] + rng.normal(0.0, jitter, size=n_inputs), 0.0, hi)
        samples.append(Sample([np.array([x]) for x in t], int(c)))
    meta = {"seed": seed, "jitter": jitter, "proto_frac": proto_frac, "prototypes": protos.tolist()}
    return Dataset(samples, n_inputs, n_classes, window_T, "synthetic", meta=meta)


# ---------------------------------------------------------------------------
# yin-yang

def yinyang_class(x: float, y: float) -> int:
    """0 = yin, 1 = yang, 2 = dot, for a point inside the unit-diameter disk."""
    d_top = np.hypot(x - YY_TOP[0], y - YY_TOP[1])
    d_bot = np.hypot(x - YY_BOTTOM[0], y - YY_BOTTOM[1])
    if d_top <= YY_R_DOT or d_bot <= YY_R_DOT:
        return 2
    if d_top <= YY_R_SMALL:
        return 0
    if d_bot <= YY_R_SMALL:
        return 1
    return 0 if x < YY_CENTER[0] else 1


def in_yinyang_disk(x: float, y: float) -> bool:
    return np.hypot(x - YY_CENTER[0], y - YY_CENTER[1]) <= YY_R_BIG


def latency_encode(features: Sequence[float], t_early: float, t_late: float) -> list[np.ndarray]:
    """Features ``v`` and ``1 - v`` as single spikes at ``t_early + v (t_late - t_early)``.

    A 2-D point ``(x, y)`` becomes four trains for ``x, y, 1 - x, 1 - y``.
    """
    if not t_early < t_late:
        raise ValueError("need t_early < t_late")
    v = np.asarray(features, dtype=float)
    if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
        raise ValueError(f"features must lie in [0, 1], got {v.tolist()}")
    vals = np.concatenate([v, 1.0 - v])
    return [np.array([t_early + x * (t_late - t_early)]) for x in vals]


def gen_yinyang(
    n_samples: int, seed: int = 0, window_T: float = 100.0, t_early: float = 0.0,
    t_late: float = 50.0,
) -> Dataset:
    """Class-balanced yin-yang points, latency-encoded into four inputs."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if t_late >= window_T:
        raise ValueError("t_late must lie inside the window")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples) % 3
    rng.shuffle(labels)
    samples, points = [], []
    for c in labels:
        while True:
            x, y = rng.uniform(0.0, 1.0, size=2)
            if in_yinyang_disk(x, y) and yinyang_class(x, y) == c:
                break
        points.append([float(x), float(y)])
        samples.append(Sample(latency_encode([x, y], t_early, t_late), int(c)))
    meta = {"seed": seed, "t_early": t_early, "t_late": t_late, "points": points}
    return Dataset(samples, 4, 3, window_T, "yinyang", meta=meta)


# ---------------------------------------------------------------------------
# Poisson encoding and IDX digits

def poisson_encode(
    image, rate_max: float = 100.0, window_T: float = 100.0, seed: int | np.random.Generator = 0
) -> list[np.ndarray]:
    """Homogeneous Poisson train per pixel, rate ``intensity * rate_max`` (Hz, window in ms)."""
    if not rate_max > 0:
        raise ValueError("rate_max must be positive")
    px = np.asarray(image, dtype=float).reshape(-1)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    counts = rng.poisson(px * rate_max * window_T / 1000.0)
    out = []
    for c in counts:
        t = np.sort(rng.uniform(0.0, window_T, size=int(c)))
        out.append(t)
    return out


class IdxFormatError(ValueError):
    pass


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise IdxFormatError(f"{what}: truncated header at offset 0")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{what}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(f"{what}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    size = int(np.prod(dims))
    if len(raw) < head + size:
        raise IdxFormatError(
            f"{what}: truncated data at offset {len(raw)}, expected {head + size} bytes"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path, keep_classes: Iterable[int] | None = None):
    """Images scaled to ``[0, 1]`` and labels, filtered to ``keep_classes`` in file order."""
    images = _parse_idx(_read_maybe_gzip(images_path), 0x00000803, "images")
    labels = _parse_idx(_read_maybe_gzip(labels_path), 0x00000801, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    x = images.astype(float) / 255.0
    y = labels.astype(int)
    if keep_classes is not None:
        keep = np.isin(y, sorted(set(keep_classes)))
        x, y = x[keep], y[keep]
    return x, y


def build_digits(
    images: np.ndarray, labels: np.ndarray, classes: Sequence[int], n_train: int = 300,
    n_test: int = 100, rate_max: float = 100.0, window_T: float = 100.0, seed: int = 0,
) -> Dataset:
    """Poisson-encoded digit subset with ``n_train``/``n_test`` images per class.

    Labels are re-indexed to ``0..len(classes)-1`` in the order given.
    """
    rng = np.random.default_rng(seed)
    classes = list(classes)
    train, test = [], []
    for c_new, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) < n_train + n_test:
            raise ValueError(f"class {c}: {len(idx)} images, need {n_train + n_test}")
        for split, sel in ((train, idx[:n_train]), (test, idx[n_train:n_train + n_test])):
            for k in sel:
                split.append(Sample(poisson_encode(images[k], rate_max, window_T, rng), c_new))
    order = rng.permutation(len(train))
    train = [train[k] for k in order]
    n_px = int(np.prod(images.shape[1:]))
    meta = {"seed": seed, "classes": classes, "rate_max": rate_max,
            "n_train": n_train, "n_test": n_test}
    return Dataset(train, n_px, len(classes), window_T, "digits", test, meta)
