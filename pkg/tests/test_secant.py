import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiltflow import secant as sec
from tiltflow.oracle import GaussianWorld, dense_B_recursion
from tiltflow.schedule import Schedule

E1, E2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])


def diag41():
    return sec.CompactB.single(1.0, E1, [[3.0]])


def test_apply_B_examples():
    B = sec.CompactB.identity(2.5, 2, 1)
    assert np.allclose(sec.apply_B(B, np.array([[1.0, -2.0]])), [[2.5, -5.0]])
    assert np.allclose(sec.apply_B(diag41(), E1), 4 * E1)
    assert np.allclose(sec.apply_B(diag41(), E2), E2)


def test_damp_examples():
    I = sec.CompactB.identity(1.0, 2, 1)
    y_hat, phi, sBs = sec.damp(np.array([3.0, 0.0]), E1, I, 0.2, 1.0)
    assert phi == pytest.approx(0.5)
    assert np.allclose(y_hat, [2.0, 0.0])
    assert E1 @ y_hat == pytest.approx(2.0 * sBs)
    y_hat, phi, _ = sec.damp(E2, E1, I, 0.2, 1.0)
    assert phi == pytest.approx(0.2)
    assert E1 @ y_hat == pytest.approx(0.8)
    y = np.array([1.3, 0.4])
    y_hat, phi, _ = sec.damp(y, E1, I, 0.2, 1.0)
    assert phi == 1.0 and np.array_equal(y_hat, y)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
@settings(max_examples=80, deadline=None)
def test_damp_lands_in_band(s1, s2, y1, y2):
    s = np.array([s1, s2])
    if s @ s < 1e-6:
        return
    B = sec.CompactB.single(0.7, np.array([0.6, 0.8]), [[1.5]])
    y_hat, _, sBs = sec.damp(np.array([y1, y2]), s, B, 0.2, 1.0)
    sy = s @ y_hat
    assert sy >= (1 - 0.2) * sBs * (1 - 1e-9) - 1e-12
    assert sy <= (1 + 1.0) * sBs * (1 + 1e-9) + 1e-12


def test_damp_validates_parameters():
    with pytest.raises(ValueError):
        sec.damp(E1, E1, sec.CompactB.identity(1.0, 2, 1), 1.5, 1.0)


def test_queue_capacity_and_order():
    q = sec.MemoryQueue(1)
    a = sec.SecantPair(E1, E1, 1.0, 0.0)
    b = sec.SecantPair(E2, E2, 1.0, 0.0)
    sec.push_pair(sec.push_pair(q, a), b)
    assert list(q) == [b]
    q3 = sec.MemoryQueue(3)
    pairs = [sec.SecantPair(k * E1, E1, 1.0, 0.0) for k in (1.0, 2.0, 3.0, 4.0)]
    for pr in pairs:
        q3.push(pr)
    assert list(q3) == pairs[1:]
    with pytest.raises(ValueError):
        sec.MemoryQueue(0)


def test_update_B_examples():
    empty = sec.update_B(sec.MemoryQueue(4), 1.7, dim=2)
    assert np.allclose(empty.dense()[0], 1.7 * np.eye(2))
    q = sec.MemoryQueue(4)
    q.push(sec.SecantPair(E1, [2.0, 0.0], 1.0, 0.0))
    B = sec.update_B(q, 1.0)
    assert np.allclose(B.dense()[0], np.diag([2.0, 1.0]), atol=1e-15)
    assert np.allclose(B.Gamma[0], [[0.0, -0.5], [-0.5, 0.75]])
    assert np.allclose(sec.apply_B(B, E1), [2.0, 0.0])


def test_update_B_rejects_negative_curvature():
    q = sec.MemoryQueue(2)
    q.push(sec.SecantPair(E1, -E1, 1.0, 0.0))
    with pytest.raises(FloatingPointError):
        sec.update_B(q, 1.0)
    with pytest.raises(ValueError):
        sec.update_B(sec.MemoryQueue(2), 1.0)


@given(st.integers(0, 10_000), st.integers(1, 6))
@settings(max_examples=30, deadline=None)
def test_compact_matches_dense(seed, n_pairs):
    rng = np.random.default_rng(seed)
    d = 3
    q = sec.MemoryQueue(8)
    pairs = []
    for _ in range(n_pairs):
        s = rng.normal(size=d)
        M = rng.normal(size=(d, d))
        y = (M @ M.T + 0.5 * np.eye(d)) @ s
        u, w = rng.uniform(0.3, 1.0), rng.uniform(0.0, 1.0)
        q.push(sec.SecantPair(s, y, u, w))
        pairs.append((s, y, u, w))
    B = sec.update_B(q, 0.8).dense()[0]
    ref = dense_B_recursion(pairs, 0.8, d)
    assert np.linalg.norm(B - ref) <= 1e-10 * np.linalg.norm(ref)


def test_skipped_pair_only_rescales():
    q = sec.MemoryQueue(4)
    q.push(sec.SecantPair(E1, [2.0, 0.0], 0.5, 0.25, live=np.array([False])))
    B = sec.update_B(q, 1.0)
    assert np.allclose(B.dense()[0], 0.75 * np.eye(2))


def test_sqrt_examples():
    F = sec.semi_numerical_sqrt(sec.CompactB.identity(4.0, 3, 1))
    assert np.allclose(sec.apply_L(F, np.ones(3)), 2 * np.ones(3))
    F = sec.semi_numerical_sqrt(diag41())
    L = sec.apply_L(F, np.eye(2)[None])[0].T
    assert np.allclose(L, np.diag([2.0, 1.0]), atol=1e-14)
    assert np.allclose(sec.apply_L(F, E2), E2, atol=1e-15)


def test_sqrt_factorizes_random():
    rng = np.random.default_rng(5)
    d = 4
    q = sec.MemoryQueue(3)
    for _ in range(3):
        s = rng.normal(size=d)
        q.push(sec.SecantPair(s, (np.eye(d) + 0.3 * np.outer(s, s)) @ s, 0.9, 0.1))
    B = sec.update_B(q, 1.0)
    F = sec.semi_numerical_sqrt(B)
    L = sec.apply_L(F, np.eye(d)[None])[0].T
    assert np.allclose(L @ L.T, B.dense()[0], atol=1e-12)
    x = rng.normal(size=(1, d))
    assert np.allclose(sec.apply_LT(F, x)[0], L.T @ x[0])
    assert not F.fallback.any()


def test_sqrt_rejects_nonpositive_gamma():
    with pytest.raises(FloatingPointError):
        sec.semi_numerical_sqrt(sec.CompactB.identity(-1.0, 2, 1))


def test_secant_update_on_gaussian_world():
    world = GaussianWorld(np.array([[1.2, 0.4], [0.4, 0.6]]))
    sched = Schedule()
    state = sec.SecantState.create(5, 2, sched.unit_prior_jacobian(0.0), memory=4)
    x = np.random.default_rng(0).normal(size=(5, 2))
    ts = np.linspace(0, 0.9, 12)
    for t, tn in zip(ts[:-1], ts[1:]):
        v = world.velocity(x, t)
        diag = sec.secant_update(state, x, v, t, sched)
        x = x + (tn - t) * v
    assert state.B.rank == 8
    assert diag["secant_residual"].max() < 1e-8
    margin = np.minimum(diag["band_lo"], diag["band_hi"]) / diag["scale"]
    assert margin.min() > -1e-10
    assert state.nbytes_per_trajectory() > 0


def test_secant_update_skips_zero_steps():
    sched = Schedule()
    state = sec.SecantState.create(2, 2, 1.0)
    x = np.array([[0.0, 0.0], [1.0, 1.0]])
    v = np.ones((2, 2))
    sec.secant_update(state, x, v, 0.1, sched)
    x2 = x.copy()
    x2[1] += 0.1
    diag = sec.secant_update(state, x2, v, 0.2, sched)
    assert diag["skipped"] == 1 and list(diag["live"]) == [False, True]
    sc = sched.step_coeffs(0.1, 0.2)
    assert state.B.gamma[0] == pytest.approx(sc.u * 1.0 + sc.w)
    assert state.events and state.events[0][0] == "skipped_pair"
