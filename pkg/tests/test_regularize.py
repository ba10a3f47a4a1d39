import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import motiondistill.gradcore as gc
from motiondistill.gradcore import ContractViolation
from motiondistill.regularize import (Neighborhoods, arap_loss, build_neighborhoods,
                                      optimal_rotation, tv3d_loss)


def quat_to_mat(q):
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def cloud(n=12, seed=0, spread=1.0):
    return np.random.default_rng(seed).uniform(-spread, spread, (n, 3))


def test_tv_hand_value():
    # two points, three frames, every frame moves (0.1, 0, 0)
    step = np.array([0.1, 0.0, 0.0])
    base = cloud(2, seed=1)
    traj = np.stack([base + k * step for k in range(3)])
    assert float(gc.values(tv3d_loss(traj))) == pytest.approx(0.1, abs=1e-12)


def test_tv_null_space_and_positivity():
    base = cloud(5, seed=2)
    still = np.stack([base] * 4)
    assert float(gc.values(tv3d_loss(still))) == 0.0
    moved = still.copy()
    moved[2, 0, 1] += 0.3
    assert float(gc.values(tv3d_loss(moved))) > 0.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_tv_invariant_to_static_offsets(seed):
    rng = np.random.default_rng(seed)
    traj = rng.normal(size=(4, 6, 3))
    offset = rng.normal(size=(6, 3))  # same shift in every frame
    a = float(gc.values(tv3d_loss(traj)))
    b = float(gc.values(tv3d_loss(traj + offset)))
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_tv_gradients_match_finite_differences():
    store = gc.ParamStore()
    traj = store.add("traj", np.random.default_rng(3).normal(size=(4, 5, 3)), lr=1e-3)

    def f():
        return tv3d_loss(traj) * 1e-2

    assert gc.finite_diff_check(f, store, step=1e-6) < 1e-4


def test_neighborhoods_match_brute_force():
    pos = cloud(30, seed=4)
    radius = 0.6
    nb = build_neighborhoods(pos, radius=radius)
    for j in range(30):
        brute = {i for i in range(30)
                 if i != j and np.linalg.norm(pos[i] - pos[j]) <= radius}
        assert set(nb.edges_of(j)) == brute or (not brute and len(nb.edges_of(j)) > 0)
    # weight formula: exp(-d^2 / (2 (r/2)^2))
    d = np.linalg.norm(pos[nb.neighbor] - pos[nb.center], axis=1)
    assert np.allclose(nb.weight, np.exp(-d ** 2 / (2 * (radius / 2) ** 2)))


def test_isolated_point_gets_knn_fallback():
    pos = np.vstack([cloud(9, seed=5, spread=0.3), [[50.0, 50.0, 50.0]]])
    nb = build_neighborhoods(pos, radius=0.5, k_fallback=4)
    far = nb.edges_of(9)
    assert len(far) == 4
    assert 9 not in far


def test_default_radius_is_fraction_of_diagonal():
    pos = cloud(10, seed=6)
    nb = build_neighborhoods(pos)
    diag = np.linalg.norm(pos.max(axis=0) - pos.min(axis=0))
    assert nb.radius == pytest.approx(0.1 * diag)


def test_optimal_rotation_recovers_applied_rotation():
    rng = np.random.default_rng(7)
    ec = rng.normal(size=(6, 3))
    r_true = quat_to_mat(rng.normal(size=4))
    ed = ec @ r_true.T
    w = rng.uniform(0.2, 1.0, 6)
    r = optimal_rotation(ec, ed, w)
    assert np.allclose(r, r_true, atol=1e-10)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_arap_zero_under_global_rigid_motion():
    pos = cloud(14, seed=8)
    nb = build_neighborhoods(pos, radius=1.2)
    rng = np.random.default_rng(9)
    frames = []
    for _ in range(4):
        r = quat_to_mat(rng.normal(size=4))
        t = rng.normal(size=3)
        frames.append(pos @ r.T + t)
    loss = float(gc.values(arap_loss(np.stack(frames), pos, nb)))
    assert loss <= 1e-9


def test_arap_positive_under_uniform_scaling():
    pos = cloud(14, seed=8)
    nb = build_neighborhoods(pos, radius=1.2)
    traj = np.stack([pos, pos * 1.1])
    assert float(gc.values(arap_loss(traj, pos, nb))) > 1e-4


def test_single_neighborhood_matches_so3_grid_search():
    # displaced tetrahedron: Kabsch energy must match a dense rotation sweep
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    ec = pos[1:] - pos[0]
    rng = np.random.default_rng(10)
    r_true = quat_to_mat(rng.normal(size=4))
    ed = ec @ r_true.T
    ed[1] += np.array([0.15, -0.1, 0.05])  # break exact rigidity
    w = np.ones(3)

    r = optimal_rotation(ec, ed, w)
    e_kabsch = float(np.sum(w[:, None] * (ed - ec @ r.T) ** 2))

    def energy_min(mats):
        rotated = np.einsum("mij,kj->mki", mats, ec)
        energies = np.sum((ed[None] - rotated) ** 2, axis=(1, 2))
        k = int(np.argmin(energies))
        return float(energies[k]), mats[k]

    # svd-free sweep: coarse random start, then shrinking local perturbations
    e_grid, best = energy_min(quat_to_mat(rng.normal(size=(4000, 4))))
    sigma = 0.4
    for _ in range(14):
        deltas = quat_to_mat(np.concatenate(
            [np.ones((1500, 1)), sigma * rng.normal(size=(1500, 3))], axis=1))
        e_new, cand = energy_min(deltas @ best)
        if e_new < e_grid:
            e_grid, best = e_new, cand
        sigma *= 0.55

    assert e_kabsch <= e_grid + 1e-12
    assert (e_grid - e_kabsch) / e_kabsch < 0.01


def test_arap_gradients_match_finite_differences():
    pos = cloud(8, seed=11)
    nb = build_neighborhoods(pos, radius=1.5)
    store = gc.ParamStore()
    traj0 = np.stack([pos, pos + 0.05 * np.random.default_rng(12).normal(size=(8, 3))])
    traj = store.add("traj", traj0, lr=1e-3)

    def f():
        return arap_loss(traj, pos, nb) * 1e-2

    # rotations are re-fit inside f; at the Kabsch optimum the envelope
    # theorem makes the frozen-rotation gradient the true one
    assert gc.finite_diff_check(f, store, step=1e-6) < 1e-4


def test_arap_rejects_mismatched_point_count():
    pos = cloud(6, seed=13)
    nb = build_neighborhoods(pos, radius=1.5)
    with pytest.raises(ContractViolation):
        arap_loss(np.zeros((2, 5, 3)), pos[:5], nb)


def test_tv_rejects_short_trajectories():
    with pytest.raises(ContractViolation):
        tv3d_loss(np.zeros((1, 4, 3)))
