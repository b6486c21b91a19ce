import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from camtraj import geometry as geo
from camtraj.errors import InvalidInputError, MissingGravityError, TrajectoryFormatError
from camtraj.rng import make_rng

G = np.array([0.0, -9.81, 0.0])


def random_traj(rng, n=None, gravity=True, rate=20.0):
    n = n or int(rng.integers(1, 40))
    t = np.arange(n) / rate
    return geo.Trajectory(t, rng.normal(size=(n, 3)), geo.random_rotations(rng, n),
                          sample_rate_hz=rate, gravity_world=G if gravity else None, uniform=True)


def rot_z(deg):
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


seeds = st.integers(0, 2 ** 32 - 1)


# --- quaternions ---------------------------------------------------------


def test_quat_identity():
    np.testing.assert_allclose(geo.quat_to_matrix([1, 0, 0, 0]), np.eye(3), atol=1e-12)


def test_quat_90_about_x_matches_scipy():
    q = [0.7071068, 0.7071068, 0, 0]
    expect = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
    got = geo.quat_to_matrix(q)
    np.testing.assert_allclose(got, expect, atol=1e-6)
    # scipy takes scalar-last quaternions
    np.testing.assert_allclose(got, Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix(), atol=1e-12)


def test_quat_zero_norm_rejected():
    with pytest.raises(InvalidInputError):
        geo.quat_to_matrix([0, 0, 0, 0])


@given(seeds)
def test_quat_double_cover(seed):
    q = make_rng(seed).normal(size=4)
    np.testing.assert_allclose(geo.quat_to_matrix(q), geo.quat_to_matrix(-q), atol=1e-12)


@given(seeds)
def test_matrix_quat_roundtrip(seed):
    R = geo.random_rotations(make_rng(seed), 1)[0]
    q = geo.matrix_to_quat(R)
    assert q[0] >= 0
    assert abs(np.linalg.norm(q) - 1) < 1e-9
    np.testing.assert_allclose(geo.quat_to_matrix(q), R, atol=1e-9)


# --- 6D ------------------------------------------------------------------


def test_6d_identity():
    np.testing.assert_array_equal(geo.matrix_to_6d(np.eye(3)), [1, 0, 0, 0, 1, 0])


def test_6d_of_90_about_z():
    np.testing.assert_allclose(geo.matrix_to_6d(geo.quat_to_matrix([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])),
                               [0, 1, 0, -1, 0, 0], atol=1e-12)


@pytest.mark.parametrize("v", [[1, 0, 0, 0, 1, 0], [2, 0, 0, 0, 3, 0], [1, 0, 0, 1, 1, 0]])
def test_sixd_to_identity(v):
    np.testing.assert_allclose(geo.sixd_to_matrix(v), np.eye(3), atol=1e-12)


@pytest.mark.parametrize("v", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [1, 2, 3, 0, 0, 0]])
def test_sixd_degenerate(v):
    with pytest.raises(InvalidInputError):
        geo.sixd_to_matrix(v)


def test_sixd_roundtrip_1000():
    R = geo.random_rotations(make_rng(3), 1000)
    err = np.linalg.norm(R - geo.sixd_to_matrix(geo.matrix_to_6d(R)), axis=(1, 2))
    assert err.max() < 1e-9


@given(seeds)
def test_sixd_output_is_rotation(seed):
    v = make_rng(seed).normal(size=6)
    R = geo.sixd_to_matrix(v)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9


# --- relative encoding ---------------------------------------------------


def test_single_pose_identity_row():
    traj = random_traj(make_rng(0), n=1)
    seq = geo.relative_to_midpoint(traj)
    np.testing.assert_array_equal(seq.rows, [geo.IDENTITY_ROW])
    assert seq.midpoint_index == 0


def test_three_poses_along_x():
    traj = geo.Trajectory([0, 1, 2], [[0, 0, 0], [1, 0, 0], [2, 0, 0]], np.tile(np.eye(3), (3, 1, 1)),
                          sample_rate_hz=1.0)
    rows = geo.relative_to_midpoint(traj).rows
    np.testing.assert_allclose(rows[:, :3], [[-1, 0, 0], [0, 0, 0], [1, 0, 0]], atol=1e-12)


@pytest.mark.parametrize("n,mid", [(1, 0), (2, 1), (5, 2), (6, 3)])
def test_midpoint_floor(n, mid):
    assert geo.relative_to_midpoint(random_traj(make_rng(n), n=n)).midpoint_index == mid


def test_missing_gravity():
    with pytest.raises(MissingGravityError):
        geo.relative_to_midpoint(random_traj(make_rng(0), gravity=False), use_gravity=True)
    with pytest.raises(MissingGravityError):
        geo.gravity_in_reference(random_traj(make_rng(0), gravity=False))


def test_rigid_invariance_1000():
    rng = make_rng(11)
    worst = 0.0
    for _ in range(1000):
        traj = random_traj(rng)
        R = geo.random_rotations(rng, 1)[0]
        t = rng.normal(scale=10.0, size=3)
        a = geo.relative_to_midpoint(traj).rows
        b = geo.relative_to_midpoint(geo.transform_trajectory(traj, R, t)).rows
        worst = max(worst, np.abs(a - b).max())
    assert worst < 1e-9


@given(seeds)
def test_midpoint_row_and_valid_rotations(seed):
    seq = geo.relative_to_midpoint(random_traj(make_rng(seed)))
    np.testing.assert_allclose(seq.rows[seq.midpoint_index], geo.IDENTITY_ROW, atol=1e-9)
    R = geo.sixd_to_matrix(seq.rows[:, 3:])
    np.testing.assert_allclose(np.einsum("nji,njk->nik", R, R), np.broadcast_to(np.eye(3), R.shape), atol=1e-9)


# --- gravity -------------------------------------------------------------


def test_gravity_identity_mid():
    traj = geo.Trajectory([0.0], [[0, 0, 0]], [np.eye(3)], gravity_world=G)
    np.testing.assert_allclose(geo.gravity_in_reference(traj), G)


def test_gravity_mid_rotated_90_z():
    traj = geo.Trajectory([0.0], [[0, 0, 0]], [rot_z(90)], gravity_world=G)
    np.testing.assert_allclose(geo.gravity_in_reference(traj), [-9.81, 0, 0], atol=1e-12)


@given(seeds, st.floats(-np.pi, np.pi))
def test_gravity_invariant_under_yaw(seed, yaw):
    traj = random_traj(make_rng(seed))
    Y = Rotation.from_rotvec([0, yaw, 0]).as_matrix()
    moved = geo.transform_trajectory(traj, Y, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(geo.gravity_in_reference(moved), geo.gravity_in_reference(traj), atol=1e-9)


@given(seeds)
def test_gravity_reference_general_rotation(seed):
    # rotating the world moves gravity with it, so the reference reading is unchanged too
    rng = make_rng(seed)
    traj = random_traj(rng)
    R = geo.random_rotations(rng, 1)[0]
    moved = geo.transform_trajectory(traj, R, np.zeros(3))
    np.testing.assert_allclose(moved.gravity_world, R @ G, atol=1e-12)
    np.testing.assert_allclose(geo.gravity_in_reference(moved), geo.gravity_in_reference(traj), atol=1e-9)


# --- frames --------------------------------------------------------------


def test_convert_identity_pose():
    traj = geo.Trajectory([0.0], [[0, 0, 0]], [np.eye(3)], frame="opencv")
    out = geo.convert_frame(traj, "aria")
    np.testing.assert_array_equal(out.rotations[0], np.eye(3))
    assert out.frame is geo.Frame.ARIA


def test_convert_translation_sign():
    traj = geo.Trajectory([0.0], [[1, 2, 3]], [np.eye(3)], frame="opencv")
    np.testing.assert_array_equal(geo.convert_frame(traj, "aria").translations[0], [-1, -2, 3])


def test_convert_same_frame_noop():
    traj = random_traj(make_rng(0))
    assert geo.convert_frame(traj, "aria") is traj


@given(seeds)
def test_convert_involution_bit_exact(seed):
    traj = random_traj(make_rng(seed))
    back = geo.convert_frame(geo.convert_frame(traj, "opencv"), "aria")
    np.testing.assert_array_equal(back.translations, traj.translations)
    np.testing.assert_array_equal(back.rotations, traj.rotations)
    np.testing.assert_array_equal(back.gravity_world, traj.gravity_world)


@given(seeds)
def test_convert_preserves_relative_angles(seed):
    traj = random_traj(make_rng(seed), n=6)
    conv = geo.convert_frame(traj, "opencv")

    def rel_angles(tr):
        R = tr.rotations
        return geo.rotation_angle(np.einsum("nji,njk->nik", R[:-1], R[1:]))

    np.testing.assert_allclose(rel_angles(conv), rel_angles(traj), atol=1e-9)


# --- resampling ----------------------------------------------------------


def test_resample_native_rate_identity():
    traj = random_traj(make_rng(5), n=30)
    out = geo.resample(traj, 20.0)
    np.testing.assert_allclose(out.timestamps, traj.timestamps, atol=1e-12)
    np.testing.assert_allclose(out.translations, traj.translations, atol=1e-9)
    np.testing.assert_allclose(out.rotations, traj.rotations, atol=1e-9)


def test_interp_translation_midpoint():
    traj = geo.Trajectory([0.0, 1.0], [[0, 0, 0], [2, 0, 0]], [np.eye(3), np.eye(3)], sample_rate_hz=1.0)
    np.testing.assert_allclose(geo.interpolate(traj, [0.5]).translations[0], [1, 0, 0])


def test_slerp_midpoint_45_deg():
    traj = geo.Trajectory([0.0, 1.0], np.zeros((2, 3)), [np.eye(3), rot_z(90)], sample_rate_hz=1.0)
    np.testing.assert_allclose(geo.interpolate(traj, [0.5]).rotations[0], rot_z(45), atol=1e-9)


def test_slerp_against_scipy():
    from scipy.spatial.transform import Slerp

    rng = make_rng(9)
    R = geo.random_rotations(rng, 2)
    times = np.linspace(0, 1, 11)
    ref = Slerp([0, 1], Rotation.from_matrix(R))(times).as_matrix()
    traj = geo.Trajectory([0.0, 1.0], np.zeros((2, 3)), R, sample_rate_hz=1.0)
    np.testing.assert_allclose(geo.interpolate(traj, times).rotations, ref, atol=1e-9)


def test_resample_needs_two_poses():
    with pytest.raises(InvalidInputError):
        geo.resample(random_traj(make_rng(0), n=1), 10.0)


def test_resample_rates():
    traj = random_traj(make_rng(1), n=61, rate=30.0)
    out = geo.resample(traj, 20.0)
    assert out.uniform and out.sample_rate_hz == 20.0
    np.testing.assert_allclose(np.diff(out.timestamps), 0.05, atol=1e-9)
    assert out.timestamps[0] == 0.0 and out.timestamps[-1] <= traj.timestamps[-1]


def test_interpolate_out_of_range():
    with pytest.raises(InvalidInputError):
        geo.interpolate(random_traj(make_rng(0), n=5), [10.0])


@given(seeds, st.floats(0, 1))
def test_slerp_valid_rotation(seed, a):
    q = make_rng(seed).normal(size=(2, 4))
    R = geo.quat_to_matrix(geo.slerp(q[0], q[1], a))
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_slerp_takes_short_way():
    # the rotations differ by 20 degrees; -q1 must not send slerp the long way round
    q0 = geo.matrix_to_quat(np.eye(3))
    q1 = -geo.matrix_to_quat(rot_z(20))
    mid = geo.quat_to_matrix(geo.slerp(q0, q1, 0.5))
    np.testing.assert_allclose(mid, rot_z(10), atol=1e-9)


# --- trajectory invariants and TUM I/O -----------------------------------


def test_trajectory_rejects_non_increasing():
    with pytest.raises(InvalidInputError):
        geo.Trajectory([0.0, 0.0], np.zeros((2, 3)), np.tile(np.eye(3), (2, 1, 1)))


def test_trajectory_uniform_check():
    with pytest.raises(InvalidInputError):
        geo.Trajectory([0.0, 0.1, 0.3], np.zeros((3, 3)), np.tile(np.eye(3), (3, 1, 1)),
                       sample_rate_hz=10.0, uniform=True)


def test_trajectory_count_mismatch():
    with pytest.raises(InvalidInputError):
        geo.Trajectory([0.0, 1.0], np.zeros((3, 3)), np.tile(np.eye(3), (2, 1, 1)))


def test_tum_roundtrip(tmp_path):
    traj = random_traj(make_rng(2), n=25)
    p = tmp_path / "a.tum"
    geo.write_tum(traj, p)
    back = geo.read_tum(p)
    np.testing.assert_array_equal(back.timestamps, traj.timestamps)
    np.testing.assert_array_equal(back.translations, traj.translations)
    np.testing.assert_allclose(back.rotations, traj.rotations, atol=1e-12)
    assert back.frame == traj.frame and back.sample_rate_hz == traj.sample_rate_hz and back.uniform
    np.testing.assert_array_equal(back.gravity_world, G)
    meta = json.loads(geo.sidecar_path(p).read_text())
    assert meta["frame"] == "aria"


def test_tum_comments_and_no_sidecar(tmp_path):
    p = tmp_path / "b.tum"
    p.write_text("# header\n0.0 1 2 3 0 0 0 1\n\n# mid comment\n0.5 1 2 3 0 0 0 1\n")
    traj = geo.read_tum(p, frame="opencv", sample_rate_hz=2.0)
    assert len(traj) == 2 and traj.frame is geo.Frame.OPENCV
    assert traj.gravity_world is None


def test_tum_bad_line(tmp_path):
    p = tmp_path / "c.tum"
    p.write_text("0.0 1 2 3 0 0 0\n")
    with pytest.raises(TrajectoryFormatError):
        geo.read_tum(p, frame="aria", sample_rate_hz=20.0)


def test_tum_unknown_frame(tmp_path):
    p = tmp_path / "d.tum"
    p.write_text("0.0 1 2 3 0 0 0 1\n")
    with pytest.raises(TrajectoryFormatError):
        geo.read_tum(p)


@settings(max_examples=25)
@given(seed=seeds)
def test_tum_roundtrip_property(seed, tmp_path_factory):
    traj = random_traj(make_rng(seed))
    p = tmp_path_factory.mktemp("tum") / "x.tum"
    geo.write_tum(traj, p)
    back = geo.read_tum(p)
    np.testing.assert_allclose(geo.relative_to_midpoint(back).rows, geo.relative_to_midpoint(traj).rows, atol=1e-9)
