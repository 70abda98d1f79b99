import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xltavg.averaging import (
    AveragingVariant,
    IncompatibleCheckpointsError,
    RunSet,
    SnapshotSet,
    average,
    average_run_ca,
    average_runs,
    check_compatible,
    streaming_mean,
)
from xltavg.tensorstore import Checkpoint, CheckpointRef, encode_checkpoint
from oracles import incremental_mean, two_pass_mean


def cp(**tensors) -> Checkpoint:
    return Checkpoint({k: np.asarray(v) for k, v in tensors.items()})


def run_of(*cps: Checkpoint, run_id="r") -> SnapshotSet:
    return SnapshotSet(run_id, len(cps), [(i + 1, c) for i, c in enumerate(cps)])


def random_set(rng, k, shapes=((3,), (2, 2), ()), dtype=np.float32):
    return [
        Checkpoint({f"t{i}": rng.uniform(-1, 1, size=s).astype(dtype) for i, s in enumerate(shapes)}
                   | {"n": np.array(int(rng.integers(100)), dtype=np.int64)})
        for _ in range(k)
    ]


def test_worked_example_with_non_float():
    a = cp(w=np.array([1.0, 3.0], dtype=np.float32), n=np.array([7], dtype=np.int64))
    b = cp(w=np.array([3.0, 5.0], dtype=np.float32), n=np.array([9], dtype=np.int64))
    out = streaming_mean([a, b])
    assert out["w"].tolist() == [2.0, 4.0] and out["w"].dtype == np.float32
    assert out["n"].tolist() == [7] and out["n"].dtype == np.int64


def test_single_input_is_bitwise_identity():
    c = random_set(np.random.default_rng(0), 1)[0]
    assert streaming_mean([c]).equals(c)
    assert average_run_ca(run_of(c)).equals(c)


def test_works_over_file_backed_refs():
    cps = random_set(np.random.default_rng(1), 3)
    refs = [CheckpointRef.from_buffer(encode_checkpoint(c)) for c in cps]
    assert streaming_mean(refs).equals(streaming_mean(cps))


def test_ca_worked_example():
    assert average_run_ca(run_of(cp(w=[1.0]), cp(w=[3.0])))["w"].tolist() == [2.0]


def test_ca_k4_matches_two_pass_oracle():
    cps = random_set(np.random.default_rng(2), 4)
    out = average_run_ca(run_of(*cps))
    for name in ("t0", "t1", "t2"):
        np.testing.assert_allclose(out[name], two_pass_mean([c[name] for c in cps]), rtol=0, atol=1e-7)


def test_ra_worked_examples():
    r1 = run_of(cp(w=[1.0]), cp(w=[3.0]), run_id="a")
    r2 = run_of(cp(w=[5.0]), cp(w=[7.0]), run_id="b")
    assert average_runs(RunSet([r1, r2]), AveragingVariant.RA_LAST)["w"].tolist() == [5.0]
    assert average_runs([r1, r2], AveragingVariant.RA_CA)["w"].tolist() == [4.0]
    assert average_runs([r1, r2], AveragingVariant.SOUP_CA)["w"].tolist() == [4.0]
    assert average_runs([r1, r2], AveragingVariant.SOUP_LAST)["w"].tolist() == [5.0]


def test_single_run_reduces_to_ca_or_last():
    cps = random_set(np.random.default_rng(3), 3)
    run = run_of(*cps)
    assert average_runs([run], AveragingVariant.RA_CA).equals(average_run_ca(run))
    assert average_runs([run], AveragingVariant.RA_LAST).equals(cps[-1])


def test_dispatch():
    run = run_of(cp(w=[1.0]), cp(w=[3.0]))
    assert average(AveragingVariant.CA, [run])["w"].tolist() == [2.0]
    with pytest.raises(ValueError):
        average(AveragingVariant.CA, [run, run])
    with pytest.raises(ValueError):
        average_runs([run], AveragingVariant.CA)


def test_compatibility_errors_name_the_tensor():
    check_compatible([cp(w=[1.0, 2.0]), cp(w=[3.0, 4.0])])
    with pytest.raises(IncompatibleCheckpointsError) as e:
        check_compatible([cp(w=[1.0, 2.0]), cp(w=[1.0, 2.0, 3.0])])
    assert e.value.tensor_name == "w" and "shape" in str(e.value)
    with pytest.raises(IncompatibleCheckpointsError) as e:
        check_compatible([cp(w=[1.0]), cp(w=[1.0], b=[0.0])])
    assert e.value.tensor_name == "b"
    with pytest.raises(IncompatibleCheckpointsError) as e:
        check_compatible([cp(w=np.zeros(1)), cp(w=np.zeros(1, dtype=np.float32))])
    assert e.value.tensor_name == "w" and "dtype" in str(e.value)
    with pytest.raises(ValueError):
        check_compatible([])


def test_snapshot_set_validation():
    with pytest.raises(ValueError):
        SnapshotSet("r", 3, [(2, cp(w=[0.0])), (1, cp(w=[0.0]))])
    with pytest.raises(ValueError):
        SnapshotSet("r", 3, [(1, cp(w=[0.0]))])
    with pytest.raises(ValueError):
        SnapshotSet("r", 3, [])


def test_streaming_matches_incremental_oracle():
    cps = random_set(np.random.default_rng(4), 7, dtype=np.float64)
    out = streaming_mean(cps)
    np.testing.assert_allclose(out["t1"], incremental_mean([c["t1"] for c in cps]), rtol=0, atol=1e-12)


floats = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@given(st.lists(st.lists(floats, min_size=4, max_size=4), min_size=1, max_size=8))
@settings(max_examples=100)
def test_convexity(rows):
    arrays = [np.array(r, dtype=np.float32) for r in rows]
    out = streaming_mean([cp(w=a) for a in arrays])["w"]
    lo, hi = np.min(arrays, axis=0), np.max(arrays, axis=0)
    assert np.all(out >= np.nextafter(lo, -np.inf)) and np.all(out <= np.nextafter(hi, np.inf))


@given(st.lists(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=3, max_size=3), min_size=2, max_size=6),
       st.randoms(use_true_random=False))
@settings(max_examples=100)
def test_permutation_robustness(rows, rnd):
    cps = [cp(w=np.array(r), n=np.array([i], dtype=np.int64)) for i, r in enumerate(rows)]
    shuffled = cps[1:]
    rnd.shuffle(shuffled)
    shuffled = [cps[0]] + shuffled
    a, b = streaming_mean(cps), streaming_mean(shuffled)
    scale = max(1.0, float(np.max(np.abs(a["w"]))))
    assert np.max(np.abs(a["w"] - b["w"])) <= 1e-12 * scale
    assert a["n"].tolist() == b["n"].tolist() == [0]


def test_non_floats_follow_first_input():
    a, b = cp(n=np.array([1], dtype=np.int64)), cp(n=np.array([2], dtype=np.int64))
    assert streaming_mean([a, b])["n"].tolist() == [1]
    assert streaming_mean([b, a])["n"].tolist() == [2]


@given(st.integers(1, 10), st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_idempotence(k, seed):
    c = random_set(np.random.default_rng(seed), 1)[0]
    out = streaming_mean([c] * k)
    for name in ("t0", "t1", "t2"):
        np.testing.assert_allclose(out[name], c[name], rtol=0, atol=1e-7)


@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_ra_ca_is_flat_mean(r, k, seed):
    rng = np.random.default_rng(seed)
    runs = [run_of(*random_set(rng, k), run_id=str(i)) for i in range(r)]
    out = average_runs(runs, AveragingVariant.RA_CA)
    for name in ("t0", "t1", "t2"):
        flat = two_pass_mean([c[name] for run in runs for c in run.refs])
        np.testing.assert_allclose(out[name], flat, rtol=0, atol=1e-7)
