import math

import numpy as np
import pytest

from uwbfuse import geometry as g
from uwbfuse.errors import OutOfRange


def random_rotation(rng, max_angle=math.pi - 1e-9):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return g.Rotation.from_rotvec(axis * rng.uniform(0.0, max_angle))


def quat_power_slerp(r0, r1, u):
    """Independent oracle: q0 * (q0^-1 q1)^u via the quaternion log/exp."""
    rel = r0.inverse() * r1
    return r0 * g.Rotation.from_rotvec(u * rel.log())


class TestSlerp:
    def test_identity_case(self):
        q = g.Rotation.from_rotvec((0.2, -0.1, 0.4))
        out = g.slerp(q, q, 0.5)
        assert out.angle_to(q) < 1e-12

    def test_endpoint_case(self):
        q0 = g.Rotation.from_rotvec((0.3, 0.0, -0.2))
        q1 = g.Rotation.from_rotvec((-0.1, 0.5, 0.0))
        assert g.slerp(q0, q1, 0.0).angle_to(q0) < 1e-12
        assert g.slerp(q0, q1, 1.0).angle_to(q1) < 1e-12

    def test_half_angle_about_z(self):
        q0 = g.Rotation.identity()
        q1 = g.Rotation.about_z(math.pi / 2)
        mid = g.slerp(q0, q1, 0.5)
        np.testing.assert_allclose(mid.log(), [0.0, 0.0, math.pi / 4], atol=1e-12)

    def test_matches_quaternion_power_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            r0 = random_rotation(rng)
            r1 = random_rotation(rng)
            u = rng.uniform(0.0, 1.0)
            got = g.slerp(r0, r1, u)
            want = quat_power_slerp(r0, r1, u)
            assert got.angle_to(want) < 1e-9

    def test_unit_norm_output(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            r0 = random_rotation(rng)
            r1 = random_rotation(rng)
            out = g.slerp(r0, r1, rng.uniform(0.0, 1.0))
            assert abs(np.linalg.norm(out.quat) - 1.0) < 1e-9

    def test_reversal_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            r0 = random_rotation(rng)
            r1 = random_rotation(rng)
            u = rng.uniform(0.0, 1.0)
            a = g.slerp(r0, r1, u)
            b = g.slerp(r1, r0, 1.0 - u)
            assert a.angle_to(b) < 1e-9

    def test_shortest_arc(self):
        # endpoints 170 degrees apart must interpolate through <= 85 degrees
        r0 = g.Rotation.identity()
        r1 = g.Rotation.about_z(math.radians(170.0))
        mid = g.slerp(r0, r1, 0.5)
        assert mid.angle() < math.radians(86.0)


class TestLogExp:
    def test_identity(self):
        np.testing.assert_allclose(g.so3_log_vee(g.Rotation.identity()), np.zeros(3), atol=1e-15)

    def test_single_axis(self):
        r = g.Rotation.about_z(0.3)
        np.testing.assert_allclose(r.log(), [0.0, 0.0, 0.3], atol=1e-12)

    def test_round_trip_1000(self):
        rng = np.random.default_rng(4)
        angles = np.concatenate(
            [
                rng.uniform(0.0, math.pi - 1e-9, size=960),
                rng.uniform(0.0, 1e-7, size=20),
                rng.uniform(math.pi - 1e-6, math.pi - 1e-12, size=20),
            ]
        )
        worst = 0.0
        for ang in angles:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            r = g.Rotation.from_rotvec(axis * ang)
            back = g.Rotation.from_rotvec(r.log())
            worst = max(worst, r.angle_to(back))
        assert worst < 1e-9

    def test_angle_in_0_pi(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            v = g.so3_log_vee(random_rotation(rng))
            assert 0.0 <= np.linalg.norm(v) <= math.pi + 1e-12

    def test_near_pi_from_matrix(self):
        # matrix construction path must survive the 180-degree neighborhood
        for axis in ((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)):
            a = np.asarray(axis, dtype=float)
            a /= np.linalg.norm(a)
            r = g.Rotation.from_rotvec(a * (math.pi - 1e-9))
            r2 = g.Rotation.from_matrix(r.as_matrix())
            assert r.angle_to(r2) < 1e-7


class TestPoseGroup:
    def test_compose_identity(self):
        rng = np.random.default_rng(6)
        b = g.Pose(1.0, rng.normal(size=3), random_rotation(rng))
        out = g.compose(g.Pose.identity(), b)
        np.testing.assert_allclose(out.p, b.p, atol=1e-15)
        assert out.r.angle_to(b.r) < 1e-15

    def test_double_inverse(self):
        rng = np.random.default_rng(7)
        a = g.Pose(0.5, rng.normal(size=3), random_rotation(rng))
        back = g.inverse(g.inverse(a))
        np.testing.assert_allclose(back.p, a.p, atol=1e-12)
        assert back.r.angle_to(a.r) < 1e-12

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            a = g.Pose(0.0, rng.normal(size=3), random_rotation(rng))
            e = g.compose(a, g.inverse(a))
            assert np.linalg.norm(e.p) < 1e-10
            assert e.r.angle() < 1e-10

    def test_associativity(self):
        rng = np.random.default_rng(9)
        a, b, c = (g.Pose(float(i), rng.normal(size=3), random_rotation(rng)) for i in range(3))
        left = g.compose(g.compose(a, b), c)
        right = g.compose(a, g.compose(b, c))
        np.testing.assert_allclose(left.p, right.p, atol=1e-10)
        assert left.r.angle_to(right.r) < 1e-10


class TestTrajectory:
    def make_two(self):
        return g.Trajectory(
            [
                g.Pose(0.0, (0.0, 0.0, 0.0), g.Rotation.identity()),
                g.Pose(1.0, (2.0, 0.0, 0.0), g.Rotation.identity()),
            ]
        )

    def test_exact_knot(self):
        traj = g.Trajectory(
            [
                g.Pose(0.0, (0.0, 0.0, 0.0), g.Rotation.identity()),
                g.Pose(0.5, (1.0, 2.0, 3.0), g.Rotation.about_z(0.3)),
                g.Pose(1.0, (2.0, 0.0, 0.0), g.Rotation.identity()),
            ]
        )
        p = traj.interpolate(0.5)
        np.testing.assert_allclose(p.p, [1.0, 2.0, 3.0], atol=1e-15)
        assert p.r.angle_to(g.Rotation.about_z(0.3)) < 1e-15

    def test_linear_mix(self):
        p = self.make_two().interpolate(0.25)
        np.testing.assert_allclose(p.p, [0.5, 0.0, 0.0], atol=1e-15)

    def test_yaw_midpoint_against_power_oracle(self):
        r0 = g.Rotation.identity()
        r1 = g.Rotation.about_z(math.pi / 2)
        traj = g.Trajectory([g.Pose(0.0, (0, 0, 0), r0), g.Pose(1.0, (1, 1, 0), r1)])
        mid = traj.interpolate(0.5)
        want = quat_power_slerp(r0, r1, 0.5)
        assert mid.r.angle_to(want) < 1e-12
        np.testing.assert_allclose(mid.p, [0.5, 0.5, 0.0], atol=1e-15)

    def test_out_of_range(self):
        traj = self.make_two()
        with pytest.raises(OutOfRange):
            traj.interpolate(-0.1)
        with pytest.raises(OutOfRange):
            traj.interpolate(1.1)

    def test_continuity_across_knots(self):
        rng = np.random.default_rng(10)
        poses = [
            g.Pose(0.1 * k, rng.normal(size=3), random_rotation(rng, 0.8)) for k in range(20)
        ]
        traj = g.Trajectory(poses)
        for t in np.linspace(0.0, 1.9 - 1e-9, 311):
            a = traj.interpolate(t)
            b = traj.interpolate(t + 1e-9)
            assert np.linalg.norm(a.p - b.p) < 1e-6
            assert a.r.angle_to(b.r) < 1e-6

    def test_strictly_increasing_enforced(self):
        with pytest.raises(ValueError):
            g.Trajectory(
                [
                    g.Pose(0.0, (0, 0, 0), g.Rotation.identity()),
                    g.Pose(0.0, (1, 0, 0), g.Rotation.identity()),
                ]
            )

    def test_interpolate_many_matches_scalar(self):
        rng = np.random.default_rng(11)
        poses = [
            g.Pose(0.1 * k, rng.normal(size=3), random_rotation(rng, 0.6)) for k in range(30)
        ]
        traj = g.Trajectory(poses)
        ts = rng.uniform(0.0, 2.9, size=200)
        ps, qs = traj.interpolate_many(ts)
        for i, t in enumerate(ts):
            one = traj.interpolate(float(t))
            np.testing.assert_allclose(ps[i], one.p, atol=1e-12)
            assert g.Rotation._from_unit(qs[i]).angle_to(one.r) < 1e-12


class TestRotationInvariants:
    def test_canonical_w_nonnegative(self):
        rng = np.random.default_rng(12)
        for _ in range(300):
            q = rng.normal(size=4)
            r = g.Rotation(*q)
            assert r.quat[0] >= 0.0
            assert abs(np.linalg.norm(r.quat) - 1.0) < 1e-9

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(13)
        for _ in range(300):
            r = random_rotation(rng)
            r2 = g.Rotation.from_matrix(r.as_matrix())
            assert r.angle_to(r2) < 1e-9

    def test_rotate_matches_matrix(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            r = random_rotation(rng)
            v = rng.normal(size=3)
            np.testing.assert_allclose(r.rotate(v), r.as_matrix() @ v, atol=1e-12)

    def test_jacobian_helpers_consistent(self):
        rng = np.random.default_rng(15)
        for _ in range(100):
            v = rng.normal(size=3)
            J = g.right_jacobian(v)
            Jinv = g.right_jacobian_inv(v)
            np.testing.assert_allclose(J @ Jinv, np.eye(3), atol=1e-9)
