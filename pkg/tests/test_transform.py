import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spreg.errors import DegenerateGeometryError
from spreg.procrustes import weighted_procrustes
from spreg.transform import RigidTransform, rotation_error_deg, translation_error


def trace_rre(Ra, Rb):
    c = np.clip((np.trace(Rb.T @ Ra) - 1) / 2, -1, 1)
    return np.degrees(np.arccos(c))


def test_rigid_transform_rejects_non_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 1.01, np.zeros(3))


def test_compose_and_inverse(rng):
    a, b = RigidTransform.random(rng, np.pi, 5), RigidTransform.random(rng, np.pi, 5)
    p = rng.normal(size=(7, 3))
    assert np.allclose((a @ b).apply(p), a.apply(b.apply(p)))
    assert np.allclose((a @ a.inverse()).as_matrix(), np.eye(4), atol=1e-12)


def test_rre_ten_degrees_about_z():
    T = RigidTransform.from_axis_angle([0, 0, 1], np.radians(10))
    assert rotation_error_deg(T.rotation, np.eye(3)) == pytest.approx(10.0, abs=1e-12)


@given(st.floats(0, np.pi), st.integers(0, 2**31))
@settings(max_examples=80, deadline=None)
def test_rre_matches_trace_formula(angle, seed):
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    R = RigidTransform.from_axis_angle(axis, angle).rotation
    G = RigidTransform.random(rng).rotation
    got = rotation_error_deg(R @ G, G)
    assert got == pytest.approx(trace_rre(R @ G, G), abs=1e-5)
    assert got == pytest.approx(np.degrees(angle), abs=1e-6)
    assert 0.0 <= got <= 180.0


def test_translation_error():
    assert translation_error(np.array([3.0, 4.0, 0.0]), np.zeros(3)) == 5.0


def test_procrustes_identity():
    src = np.random.default_rng(1).normal(size=(10, 3))
    T = weighted_procrustes(src, src)
    assert np.allclose(T.as_matrix(), np.eye(4), atol=1e-12)


@given(st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_procrustes_recovers_known_transform_any_weights(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(12, 3)) * 5
    T = RigidTransform.random(rng, np.pi, 20)
    w = rng.uniform(0.01, 3.0, 12)
    est = weighted_procrustes(src, T.apply(src), w)
    assert rotation_error_deg(est.rotation, T.rotation) < 1e-7
    assert translation_error(est.translation, T.translation) < 1e-9


def test_procrustes_fixes_reflection():
    # planar target mirrored: best proper rotation still has det +1
    rng = np.random.default_rng(4)
    src = rng.normal(size=(20, 3))
    tgt = src * np.array([1, 1, -1])
    T = weighted_procrustes(src, tgt)
    assert np.linalg.det(T.rotation) == pytest.approx(1.0)


def test_procrustes_collinear_is_degenerate():
    src = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateGeometryError):
        weighted_procrustes(src, src + 1)


def test_procrustes_input_checks():
    with pytest.raises(ValueError):
        weighted_procrustes(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        weighted_procrustes(np.eye(3), np.eye(3), np.zeros(3))
