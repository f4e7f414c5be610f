import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eventgrad.data import (
    Dataset, IdxFormatError, Sample, build_digits, gen_synthetic, gen_yinyang, in_yinyang_disk,
    latency_encode, load_idx, poisson_encode, validate, yinyang_class,
)


def _idx(path, magic, dims, payload, compress=False):
    raw = struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)
    path.write_bytes(gzip.compress(raw) if compress else raw)
    return path


# ---------------------------------------------------------------------------
# synthetic

def test_synthetic_deterministic():
    a = gen_synthetic(30, 5, 3, seed=4)
    b = gen_synthetic(30, 5, 3, seed=4)
    assert a.to_dict() == b.to_dict()
    assert validate(a) == []


def test_synthetic_zero_jitter_is_prototype():
    ds = gen_synthetic(12, 6, 3, seed=2, jitter=0.0)
    protos = np.array(ds.meta["prototypes"])
    for s in ds.samples:
        np.testing.assert_array_equal([x[0] for x in s.inputs], protos[s.label])
    assert np.all(protos <= 0.8 * ds.window_T)


def test_synthetic_nearest_prototype_separable():
    ds = gen_synthetic(600, 10, 2, seed=3)
    protos = np.array(ds.meta["prototypes"])
    X = np.array([[x[0] for x in s.inputs] for s in ds.samples])
    pred = np.argmin(((X[:, None, :] - protos[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.labels()) >= 0.99


def test_synthetic_rejects_nonpositive_counts():
    with pytest.raises(ValueError):
        gen_synthetic(0, 3, 2)


# ---------------------------------------------------------------------------
# yin-yang

def _yinyang_reference(x, y):
    """Independent set-algebra construction of the three regions."""
    dt = np.hypot(x - 0.5, y - 0.75)
    db = np.hypot(x - 0.5, y - 0.25)
    dot = (dt <= 0.09) | (db <= 0.09)
    yin = ~dot & (((x < 0.5) & (db > 0.25)) | (dt <= 0.25))
    return np.where(dot, 2, np.where(yin, 0, 1))


def test_dot_center():
    assert yinyang_class(0.5, 0.25) == 2
    assert yinyang_class(0.5, 0.75) == 2


def test_regions_match_reference():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 1, size=(100_000, 2))
    inside = np.hypot(pts[:, 0] - 0.5, pts[:, 1] - 0.5) <= 0.5
    pts = pts[inside]
    ours = np.array([yinyang_class(x, y) for x, y in pts])
    np.testing.assert_array_equal(ours, _yinyang_reference(pts[:, 0], pts[:, 1]))
    assert set(ours.tolist()) == {0, 1, 2}


@pytest.mark.parametrize("n", [1, 2, 3, 100, 301])
def test_yinyang_balanced(n):
    ds = gen_yinyang(n, seed=1)
    counts = np.bincount(ds.labels(), minlength=3)
    assert np.all(np.abs(counts - n / 3) <= 1)
    assert validate(ds) == []
    for (x, y), s in zip(ds.meta["points"], ds.samples):
        assert in_yinyang_disk(x, y) and yinyang_class(x, y) == s.label


def test_yinyang_deterministic():
    assert gen_yinyang(50, seed=3).to_dict() == gen_yinyang(50, seed=3).to_dict()


def test_latency_examples():
    tr = latency_encode([0.0, 0.3], 5.0, 45.0)
    assert len(tr) == 4
    assert tr[0][0] == 5.0 and tr[2][0] == 45.0
    mid = latency_encode([0.5, 0.5], 0.0, 50.0)
    assert len({t[0] for t in mid}) == 1 and mid[0][0] == 25.0
    with pytest.raises(ValueError):
        latency_encode([1.2, 0.0], 0.0, 50.0)
    with pytest.raises(ValueError):
        latency_encode([0.2, 0.0], 50.0, 50.0)


@given(a=st.tuples(st.floats(0, 1), st.floats(0, 1)), b=st.tuples(st.floats(0, 1), st.floats(0, 1)))
def test_latency_injective(a, b):
    ea = [t[0] for t in latency_encode(a, 0.0, 50.0)]
    eb = [t[0] for t in latency_encode(b, 0.0, 50.0)]
    if a != b:
        assert ea != eb


# ---------------------------------------------------------------------------
# poisson

def test_poisson_zero_intensity_is_empty():
    assert all(len(t) == 0 for t in poisson_encode(np.zeros(5), seed=0))


def test_poisson_mean_count():
    counts = np.array([len(t[0]) for t in (poisson_encode([1.0], 100.0, 100.0, s) for s in range(10_000))])
    # Poisson(10): the mean of 1e4 draws has sigma sqrt(10 / 1e4)
    assert abs(counts.mean() - 10.0) <= 3 * np.sqrt(10.0 / 10_000)


def test_poisson_deterministic_and_in_window():
    img = np.linspace(0, 1, 20)
    a, b = poisson_encode(img, seed=7), poisson_encode(img, seed=7)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(np.all((x >= 0) & (x < 100.0)) and np.all(np.diff(x) >= 0) for x in a)
    with pytest.raises(ValueError):
        poisson_encode(img, rate_max=0.0)


# ---------------------------------------------------------------------------
# IDX

def test_idx_example(tmp_path):
    img = _idx(tmp_path / "i", 0x803, (1, 2, 2), [0, 128, 255, 0])
    lab = _idx(tmp_path / "l", 0x801, (1,), [7])
    x, y = load_idx(img, lab)
    np.testing.assert_allclose(x.reshape(-1), [0, 128 / 255, 1, 0])
    assert y.tolist() == [7]


def test_idx_gzip_detected(tmp_path):
    img = _idx(tmp_path / "i.gz", 0x803, (1, 1, 2), [0, 255], compress=True)
    lab = _idx(tmp_path / "l", 0x801, (1,), [1])
    x, _ = load_idx(img, lab)
    assert x.reshape(-1).tolist() == [0.0, 1.0]


def test_idx_bad_magic_names_offset(tmp_path):
    img = _idx(tmp_path / "i", 0x801, (1,), [0])
    lab = _idx(tmp_path / "l", 0x801, (1,), [1])
    with pytest.raises(IdxFormatError, match="offset 0"):
        load_idx(img, lab)


def test_idx_truncated(tmp_path):
    img = _idx(tmp_path / "i", 0x803, (2, 2, 2), [1, 2, 3])
    lab = _idx(tmp_path / "l", 0x801, (2,), [1, 2])
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(img, lab)


def test_idx_count_mismatch(tmp_path):
    img = _idx(tmp_path / "i", 0x803, (2, 1, 1), [1, 2])
    lab = _idx(tmp_path / "l", 0x801, (3,), [1, 2, 3])
    with pytest.raises(IdxFormatError, match="2 images but 3 labels"):
        load_idx(img, lab)


def test_idx_class_filter_keeps_order(tmp_path):
    labels = [3, 0, 1, 2, 5, 1, 0]
    img = _idx(tmp_path / "i", 0x803, (7, 1, 1), list(range(7)))
    lab = _idx(tmp_path / "l", 0x801, (7,), labels)
    x, y = load_idx(img, lab, {0, 1, 2})
    assert y.tolist() == [0, 1, 2, 1, 0]
    assert (x.reshape(-1) * 255).round().tolist() == [1, 2, 3, 5, 6]


def test_build_digits():
    rng = np.random.default_rng(0)
    images = rng.uniform(0, 1, size=(40, 3, 3))
    labels = np.repeat([4, 7], 20)
    ds = build_digits(images, labels, [7, 4], n_train=5, n_test=3, seed=1)
    assert len(ds) == 10 and len(ds.test) == 6
    assert ds.n_inputs == 9 and ds.n_classes == 2
    assert sorted(ds.labels().tolist()) == [0] * 5 + [1] * 5
    assert validate(ds) == []
    with pytest.raises(ValueError, match="class 4"):
        build_digits(images, labels, [4], n_train=30, n_test=3)


# ---------------------------------------------------------------------------
# dataset container

def test_dataset_round_trip(tmp_path):
    ds = gen_synthetic(9, 3, 3, seed=0)
    ds.test = [Sample([[1.0], [2.0], [3.0]], 2, [[4.0]])]
    ds.save(tmp_path / "d.json")
    back = Dataset.load(tmp_path / "d.json")
    assert back.to_dict() == ds.to_dict()


def test_dataset_version_checked():
    data = gen_synthetic(3, 2, 2).to_dict()
    data["schema_version"] = 42
    with pytest.raises(ValueError, match="schema_version"):
        Dataset.from_dict(data)


def test_validator_flags_problems():
    ds = Dataset([Sample([[1.0], [150.0]], 0), Sample([[1.0]], 5)], 2, 2, 100.0)
    problems = validate(ds)
    assert any("outside [0, 100.0)" in p for p in problems)
    assert any("1 trains, expected 2" in p for p in problems)
    assert any("label 5" in p for p in problems)
