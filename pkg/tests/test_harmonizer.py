import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact import harmonizer as H
from artifact.errors import DegenerateReference, InvalidInput, NoHistory, UndefinedGeodesic
from artifact.trainer import Heads

import oracles


def unit(v):
    return v / np.linalg.norm(v)


def angle(a, b):
    # well conditioned for small and large angles alike
    return 2.0 * np.arctan2(np.linalg.norm(a - b), np.linalg.norm(a + b))


def random_pair(rng, d=16):
    return unit(rng.standard_normal(d)), unit(rng.standard_normal(d))


def heads_from(rng, d=8, scale=1.0):
    return Heads(bin_w=scale * rng.standard_normal((2, d)), bin_b=rng.standard_normal(2),
                 ind_w=scale * rng.standard_normal((5, d)), ind_b=rng.standard_normal(5))


# --- slerp geometry -------------------------------------------------------------------

def test_slerp_geometry_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = random_pair(rng)
        t = rng.random()
        theta = angle(a, b)
        w = H.slerp(a, b, t)
        assert abs(np.linalg.norm(w) - 1.0) <= 1e-9
        assert abs(angle(w, a) - t * theta) <= 1e-6
        assert abs(angle(w, b) - (1 - t) * theta) <= 1e-6
        basis, _ = np.linalg.qr(np.stack([a, b], axis=1))
        assert np.linalg.norm(w - basis @ (basis.T @ w)) <= 1e-9


def test_slerp_endpoints_exact():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = random_pair(rng)
        assert np.array_equal(H.slerp(a, b, 0.0), a)
        assert np.array_equal(H.slerp(a, b, 1.0), b)


def test_slerp_degenerate_cases():
    a = unit(np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(H.slerp(a, a, 0.7), a)
    with pytest.raises(UndefinedGeodesic):
        H.slerp(a, -a, 0.5)


def test_slerp_two_dimensional_example():
    a = np.array([1.0, 0.0])
    b = np.array([0.0, 1.0])
    w = H.slerp(a, b, 0.5)
    assert np.allclose(w, [np.sqrt(0.5), np.sqrt(0.5)], atol=1e-15)


# --- affinity and reference -----------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.floats(0.01, 10.0))
def test_affinity_is_a_distribution(seed, k, tau):
    rng = np.random.default_rng(seed)
    cur = unit(rng.standard_normal(10))
    hist = np.stack([unit(rng.standard_normal(10)) for _ in range(k)])
    w = H.affinity_weights(cur, hist, tau)
    assert abs(w.sum() - 1.0) <= 1e-12 and np.all(w >= 0)


def test_affinity_favours_similar_heads():
    cur = np.array([1.0, 0.0])
    hist = np.array([[1.0, 0.0], [0.0, 1.0]])
    w = H.affinity_weights(cur, hist, 0.1)
    assert w[0] == pytest.approx(np.exp(10) / (np.exp(10) + 1), rel=1e-12)


def test_affinity_errors():
    with pytest.raises(NoHistory):
        H.affinity_weights(np.ones(3), np.empty((0, 3)))
    with pytest.raises(InvalidInput):
        H.affinity_weights(np.ones(3), np.ones((1, 3)), tau=0.0)


def test_reference_cancellation():
    hist = np.array([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(DegenerateReference):
        H.global_reference(hist, np.array([0.5, 0.5]))


def test_adaptive_t_clamps():
    a = np.array([1.0, 0.0])
    assert H.adaptive_t(a, np.array([0.5, np.sqrt(0.75)])) == pytest.approx(0.5)
    assert H.adaptive_t(a, np.array([-1.0, 0.0])) == 0.0


# --- harmonize --------------------------------------------------------------------------

def test_first_task_is_only_archived():
    heads = heads_from(np.random.default_rng(2))
    archive = H.TaskHeadArchive()
    out = H.harmonize(heads, archive)
    assert out is heads
    assert len(archive) == 1 and len(archive.entries["multilabel"]) == 1


def test_identical_and_orthogonal_history_leave_heads():
    heads = heads_from(np.random.default_rng(3))
    for hist in (heads.bin_w, np.array([[-heads.bin_w[0, 1], heads.bin_w[0, 0], 0, 0, 0, 0, 0, 0],
                                        [-heads.bin_w[1, 1], heads.bin_w[1, 0], 0, 0, 0, 0, 0, 0]])):
        arch = H.TaskHeadArchive()
        arch.append(H.HeadVector.from_weights(hist, "binary", 1))
        arch.append(H.HeadVector.from_weights(heads.ind_w, "multilabel", 1))
        out = H.harmonize(heads, arch)
        assert np.allclose(out.bin_w, heads.bin_w, atol=1e-12)
        assert np.allclose(out.ind_w, heads.ind_w, atol=1e-12)


def test_sixty_degrees_moves_halfway():
    heads = Heads(bin_w=np.array([[2.0, 0.0]]), bin_b=np.zeros(1),
                  ind_w=np.array([[1.0, 0.0]]), ind_b=np.zeros(1))
    arch = H.TaskHeadArchive()
    ref = np.array([0.5, np.sqrt(0.75)])
    arch.append(H.HeadVector(ref, 1.0, "binary", 1))
    arch.append(H.HeadVector(ref, 1.0, "multilabel", 1))
    out = H.harmonize(heads, arch)
    want = 2.0 * np.array([np.cos(np.pi / 6), np.sin(np.pi / 6)])
    assert np.allclose(out.bin_w[0], want, atol=1e-12)
    assert np.array_equal(out.bin_b, heads.bin_b)
    assert len(arch) == 2
    assert np.allclose(arch.entries["binary"][-1].flat, want / 2, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_matches_scalar_pipeline(seed):
    rng = np.random.default_rng(seed)
    arch = H.TaskHeadArchive()
    hist = []
    for t in range(3):
        prev = heads_from(rng)
        hist.append(prev)
        H.harmonize(prev, arch, task_id=t + 1)
    heads = heads_from(rng)
    out = H.harmonize(heads, arch, tau=0.1)
    for attr, kind in (("bin_w", "binary"), ("ind_w", "multilabel")):
        history = [e.flat.tolist() for e in arch.entries[kind][:3]]
        want = oracles.harmonize_slerp(getattr(heads, attr).ravel().tolist(), history, 0.1)
        assert np.max(np.abs(getattr(out, attr).ravel() - np.array(want))) <= 1e-12


@pytest.mark.parametrize("method", H.METHODS)
def test_every_method_preserves_norm(method):
    rng = np.random.default_rng(4)
    arch = H.TaskHeadArchive()
    H.harmonize(heads_from(rng), arch)
    H.harmonize(heads_from(rng), arch)
    heads = heads_from(rng, scale=3.0)
    out = H.harmonize(heads, arch, method=method)
    assert abs(np.linalg.norm(out.bin_w) - np.linalg.norm(heads.bin_w)) <= 1e-9
    assert abs(np.linalg.norm(out.ind_w) - np.linalg.norm(heads.ind_w)) <= 1e-9
    assert not np.allclose(out.bin_w, heads.bin_w)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_scale_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    hist = np.stack([unit(rng.standard_normal(6)) for _ in range(2)])
    w = rng.standard_normal(6)

    def run(vec):
        d, _ = H.merge_direction(unit(vec), hist)
        return H.rescale(d, np.linalg.norm(vec))

    assert np.allclose(run(c * w), c * run(w), rtol=1e-9, atol=1e-12)


def test_unknown_method():
    with pytest.raises(InvalidInput):
        H.merge_direction(np.array([1.0, 0.0]), np.array([[0.0, 1.0]]), method="nope")


def test_failure_leaves_state_untouched():
    heads = Heads(bin_w=np.array([[1.0, 0.0]]), bin_b=np.zeros(1),
                  ind_w=np.array([[0.0, 1.0]]), ind_b=np.zeros(1))
    arch = H.TaskHeadArchive()
    arch.append(H.HeadVector(np.array([0.0, 1.0]), 1.0, "binary", 1))
    arch.append(H.HeadVector(np.array([0.0, -1.0]), 1.0, "multilabel", 1))
    saved = heads.copy()
    with pytest.raises(UndefinedGeodesic):
        H.harmonize(heads, arch)
    assert len(arch.entries["binary"]) == 1 and len(arch.entries["multilabel"]) == 1
    assert all(np.array_equal(a, b) for a, b in zip(heads.as_dict().values(), saved.as_dict().values()))


# --- archive --------------------------------------------------------------------------------

def test_archive_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    arch = H.TaskHeadArchive()
    for t in range(3):
        H.harmonize(heads_from(rng), arch, task_id=t + 1)
    arch.save(tmp_path / "heads.bin")
    assert (tmp_path / "heads.bin").read_bytes()[:4] == b"AIFH"
    back = H.TaskHeadArchive.load(tmp_path / "heads.bin")
    for kind in H.HEAD_KINDS:
        assert [e.task_id for e in back.entries[kind]] == [1, 2, 3]
        assert np.array_equal(back.vectors(kind), arch.vectors(kind))
        assert [e.norm for e in back.entries[kind]] == [e.norm for e in arch.entries[kind]]


def test_archive_rejects_non_unit_and_bad_magic(tmp_path):
    arch = H.TaskHeadArchive()
    with pytest.raises(InvalidInput):
        arch.append(H.HeadVector(np.array([2.0, 0.0]), 1.0, "binary", 1))
    (tmp_path / "x.bin").write_bytes(b"ZZZZ\x00\x00\x00\x00")
    with pytest.raises(InvalidInput):
        H.TaskHeadArchive.load(tmp_path / "x.bin")
