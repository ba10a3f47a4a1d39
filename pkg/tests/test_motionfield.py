import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import motiondistill.gradcore as gc
from motiondistill.gradcore import ContractViolation
from motiondistill.motionfield import MotionField, bilinear_interp, interpolate_time_grid
from motiondistill.render import render_image
from motiondistill.scene import deform_scene

from test_scene import CAM, random_scene


def small_field(seed=0, **kw):
    kw.setdefault("spatial_res", (5,))
    kw.setdefault("time_res", 5)
    kw.setdefault("features", 4)
    kw.setdefault("hidden", 8)
    return MotionField([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], seed=seed, **kw)


def randomize(field, seed=1, scale=0.3):
    rng = np.random.default_rng(seed)
    field.store.load_values({n: rng.normal(size=field.store[n].shape) * scale
                             for n in field.store.names()})


def test_fresh_field_is_exact_identity():
    scene = random_scene(n=5, seed=4)
    field = MotionField.from_scene_bbox(scene, seed=9)
    warped = deform_scene(scene, field, 0.37)
    assert gc.values(warped.positions).tobytes() == gc.values(scene.positions).tobytes()
    assert np.allclose(gc.values(warped.rotations), gc.values(scene.rotations), atol=1e-14)
    a = render_image(scene, CAM)
    b = render_image(warped, CAM)
    assert gc.values(a).tobytes() == gc.values(b).tobytes()


def test_grid_node_feature_passthrough():
    # five planes forced to one -> fused feature equals the sixth plane's node value
    field = small_field(seed=2)
    ones = {n: np.ones(field.store[n].shape) for n in field.store.names()
            if n.startswith("hexplane.")}
    rng = np.random.default_rng(3)
    xy = rng.normal(size=field.store["hexplane.L0.xy"].shape)
    ones["hexplane.L0.xy"] = xy
    field.store.load_values(ones)
    # node (i, j, k) at unit coords i/4, j/4, k/4; tau at a node too
    pts = np.array([[2 / 4, 3 / 4, 1 / 4]])
    feat = gc.values(field.features_at(pts, tau=2 / 4))
    assert np.allclose(feat[0], xy[2, 3], atol=1e-12)


def test_bilinear_matches_hand_average():
    grid = np.zeros((2, 2, 1))
    grid[0, 0, 0], grid[0, 1, 0], grid[1, 0, 0], grid[1, 1, 0] = 1.0, 2.0, 3.0, 4.0
    mid = bilinear_interp(grid, np.array([0.5]), np.array([0.5]))
    assert mid[0, 0] == pytest.approx(2.5, abs=1e-15)
    edge = bilinear_interp(grid, np.array([0.0]), np.array([0.25]))
    assert edge[0, 0] == pytest.approx(1.25, abs=1e-15)
    corner = bilinear_interp(grid, np.array([1.0]), np.array([1.0]))
    assert corner[0, 0] == pytest.approx(4.0, abs=1e-15)


def test_query_gradients_match_finite_differences():
    field = small_field(seed=5)
    randomize(field, seed=6)
    pts = np.random.default_rng(7).uniform(0.05, 0.95, (6, 3))
    target = np.random.default_rng(8).normal(size=(6, 3))

    # small overall scale keeps fd round-off under the 1e-8 relative guard
    def f():
        dpos, drot = field.query(pts, 0.43)
        d = dpos - target
        return ((d * d).sum() + (drot * drot).sum() * 0.5) * 1e-3

    assert gc.finite_diff_check(f, field.store, step=1e-5, sample=60) < 1e-4


def test_trajectory_shape_and_time_interpolation():
    field = small_field(seed=1)
    randomize(field)
    pts = np.random.default_rng(0).uniform(0.2, 0.8, (7, 3))
    times = np.linspace(0, 1, 4)
    traj = field.trajectory(pts, times)
    assert gc.values(traj).shape == (4, 7, 3)

    fine = interpolate_time_grid(8)
    assert fine.shape == (15,)
    assert fine.tobytes() == np.linspace(0, 1, 15).tobytes()
    assert fine[::2].tobytes() == np.linspace(0, 1, 8).tobytes()


def test_interpolate_time_grid_rejects_degenerate():
    with pytest.raises(ContractViolation):
        interpolate_time_grid(1)


def test_out_of_box_queries_clamp_and_count():
    field = small_field(seed=3)
    randomize(field)
    inside = np.array([[1.0, 0.5, 0.5]])
    outside = np.array([[1.7, 0.5, 0.5]])
    before = field.clamp_warnings
    d_in, _ = field.query(inside, 0.5)
    assert field.clamp_warnings == before
    d_out, _ = field.query(outside, 0.5)
    assert field.clamp_warnings == before + 1
    assert np.allclose(gc.values(d_in), gc.values(d_out), atol=1e-15)
    field.query(inside, 1.4)  # bad tau counts too
    assert field.clamp_warnings == before + 2


def test_field_checkpoint_round_trip(tmp_path):
    field = small_field(seed=11)
    randomize(field, seed=12)
    p = tmp_path / "field.msdf"
    field.store.save(p)
    other = small_field(seed=0)
    other.store.load(p)
    assert other.store.checksum() == field.store.checksum()
    assert "hexplane.L0.xy" in field.store.names()
    assert "decoder.dpos_w" in field.store.names()


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10 ** 6), tau=st.floats(0, 1))
def test_deformed_rotations_stay_unit(seed, tau):
    scene = random_scene(n=4, seed=1)
    field = MotionField.from_scene_bbox(scene, seed=seed % 50,
                                        spatial_res=(4,), time_res=4,
                                        features=3, hidden=6)
    randomize(field, seed=seed, scale=0.5)
    warped = deform_scene(scene, field, tau)
    norms = np.linalg.norm(gc.values(warped.rotations), axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12)


def test_rejects_bad_boxes_and_resolutions():
    with pytest.raises(ContractViolation):
        MotionField([0, 0, 0], [0, 1, 1])
    with pytest.raises(ContractViolation):
        MotionField([0, 0, 0], [1, 1, 1], spatial_res=(1,))
    field = small_field()
    with pytest.raises(ContractViolation):
        field.query(np.zeros((3, 2)), 0.5)
