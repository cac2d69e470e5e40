import math

import numpy as np
import pytest

from uwbfuse import geometry as g, simgen
from uwbfuse.errors import ConfigError


def small_cfg(**kw):
    base = dict(seed=11, run_id=1, duration_s=40.0, range_noise_m=0.0, spike_prob=0.0,
                bias_abs_max_m=0.0, identity_frame=True)
    base.update(kw)
    return simgen.ScenarioConfig(**base)


class TestDeterminism:
    def test_same_seed_identical(self):
        a = simgen.generate(small_cfg(range_noise_m=0.05, spike_prob=0.05, bias_abs_max_m=0.2))
        b = simgen.generate(small_cfg(range_noise_m=0.05, spike_prob=0.05, bias_abs_max_m=0.2))
        assert len(a.ranges) == len(b.ranges)
        for ma, mb in zip(a.ranges, b.ranges):
            assert ma == mb
        np.testing.assert_array_equal(a.labels, b.labels)
        for aid in a.anchors:
            np.testing.assert_array_equal(a.anchors[aid], b.anchors[aid])
        np.testing.assert_array_equal(a.odom_s.positions, b.odom_s.positions)

    def test_different_run_id_same_environment(self):
        a = simgen.generate(small_cfg(run_id=1, identity_frame=False))
        b = simgen.generate(small_cfg(run_id=2, identity_frame=False))
        for aid in a.anchors:
            np.testing.assert_array_equal(a.anchors[aid], b.anchors[aid])
        assert a.biases == b.biases
        assert np.any(a.odom_s.positions != b.odom_s.positions)


class TestNoiselessExactness:
    def test_ranges_equal_distances_plus_bias(self):
        truth = simgen.generate(small_cfg(bias_abs_max_m=0.2))
        ts = np.array([m.t for m in truth.ranges])
        ps, qs = truth.traj_u.interpolate_many(ts)
        for i, m in enumerate(truth.ranges):
            rot = g.Rotation._from_unit(qs[i])
            site = ps[i] + rot.rotate(truth.extrinsics.offset(m.tag_id))
            dist = float(np.linalg.norm(site - truth.anchors[m.anchor_id]))
            # corrected measurement (d + b) equals the true distance
            assert abs(m.d + truth.biases[(m.tag_id, m.anchor_id)] - dist) < 1e-9

    def test_odometry_increments_equal_truth_increments(self):
        truth = simgen.generate(small_cfg())
        for k in range(0, len(truth.traj_u) - 1, 17):
            inc_truth = g.relative(truth.traj_u[k], truth.traj_u[k + 1])
            inc_odom = g.relative(truth.odom_s[k], truth.odom_s[k + 1])
            assert np.linalg.norm(inc_truth.p - inc_odom.p) < 1e-10
            assert inc_truth.r.angle_to(inc_odom.r) < 1e-10

    def test_frame_transform_closure(self):
        truth = simgen.generate(small_cfg(identity_frame=False))
        # zero drift: s_from_u composed with truth reproduces the odometry
        for k in range(0, len(truth.traj_u), 23):
            want = g.compose(truth.s_from_u, truth.traj_u[k])
            got = truth.odom_s[k]
            assert np.linalg.norm(want.p - got.p) < 1e-9
            assert want.r.angle_to(got.r) < 1e-9


class TestSpikes:
    def test_binomial_spike_count(self):
        cfg = small_cfg(duration_s=308.0, range_rate_hz=325.0, spike_prob=0.05,
                        range_noise_m=0.05)
        truth = simgen.generate(cfg)
        n = len(truth.ranges)
        assert n >= 100000
        count = int(truth.labels.sum())
        p = 0.05
        bound = 3.0 * math.sqrt(n * p * (1 - p))
        assert abs(count - n * p) <= bound

    def test_spikes_positive_and_bounded(self):
        cfg = small_cfg(spike_prob=0.2, range_noise_m=0.0, bias_abs_max_m=0.0)
        truth = simgen.generate(cfg)
        ts = np.array([m.t for m in truth.ranges])
        ps, qs = truth.traj_u.interpolate_many(ts)
        for i, m in enumerate(truth.ranges):
            rot = g.Rotation._from_unit(qs[i])
            site = ps[i] + rot.rotate(truth.extrinsics.offset(m.tag_id))
            dist = float(np.linalg.norm(site - truth.anchors[m.anchor_id]))
            excess = m.d - dist
            if truth.labels[i]:
                assert cfg.spike_min_m - 1e-9 <= excess <= cfg.spike_max_m + 1e-9
            else:
                assert abs(excess) < 1e-9


class TestTrajectoryShapes:
    @pytest.mark.parametrize("kind", ["figure8", "lawnmower", "random_waypoint"])
    def test_bounded_steps(self, kind):
        cfg = small_cfg(trajectory=kind, duration_s=60.0, speed_mps=1.5)
        truth = simgen.generate(cfg)
        ps = truth.traj_u.positions
        steps = np.linalg.norm(np.diff(ps, axis=0), axis=1)
        assert steps.max() <= cfg.speed_mps / cfg.odom_rate_hz + 1e-9
        rots = [
            truth.traj_u[k].r.angle_to(truth.traj_u[k + 1].r)
            for k in range(len(truth.traj_u) - 1)
        ]
        assert max(rots) < 0.5  # bounded per-step rotation

    @pytest.mark.parametrize("kind", ["figure8", "lawnmower", "random_waypoint"])
    def test_inside_volume(self, kind):
        cfg = small_cfg(trajectory=kind, duration_s=60.0)
        truth = simgen.generate(cfg)
        ps = truth.traj_u.positions
        vol = np.asarray(cfg.volume)
        assert np.all(ps >= -1e-9) and np.all(ps <= vol + 1e-9)

    def test_stationary_prefix(self):
        truth = simgen.generate(small_cfg(stationary_s=5.0))
        ps = truth.traj_u.positions
        k = int(5.0 * 10)
        assert np.all(np.linalg.norm(ps[: k + 1] - ps[0], axis=1) < 1e-12)


class TestValidation:
    def test_anchor_outside_volume(self):
        with pytest.raises(ConfigError):
            simgen.ScenarioConfig(
                anchor_positions={"100": (30.0, 0.0, 0.0)}, volume=(20, 20, 10)
            ).validate()

    def test_bad_rates(self):
        with pytest.raises(ConfigError):
            small_cfg(odom_rate_hz=0.0).validate()

    def test_duration_vs_stationary(self):
        with pytest.raises(ConfigError):
            small_cfg(duration_s=3.0, stationary_s=5.0).validate()

    def test_config_round_trip(self):
        cfg = small_cfg(link_biases={("200", "100"): 0.1}, spike_prob=0.02)
        back = simgen.ScenarioConfig.from_dict(cfg.to_dict())
        assert back == cfg


class TestLabelReport:
    def test_all_keep_spike_free(self):
        labels = np.zeros(50, dtype=np.int8)
        cm = simgen.label_report(labels, np.ones(50, dtype=bool))
        assert (cm.tp, cm.fp, cm.fn) == (0, 0, 0)
        assert cm.tn == 50

    def test_perfect_gate(self):
        labels = np.array([0, 1, 0, 1, 0], dtype=np.int8)
        kept = np.array([True, False, True, False, True])
        cm = simgen.label_report(labels, kept)
        assert cm.fp == 0 and cm.fn == 0
        assert cm.spike_recall == 1.0 and cm.clean_retention == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            simgen.label_report(np.zeros(5, dtype=np.int8), np.ones(4, dtype=bool))


def test_bias_oracle_closure():
    # biases recoverable by calibration on clean data equal the stored ones
    from uwbfuse import apc

    truth = simgen.generate(small_cfg(duration_s=80.0, bias_abs_max_m=0.2))
    res = apc.calibrate(truth.odom_s, truth.ranges, truth.extrinsics, cfg=apc.ApcConfig())
    for link, b in truth.biases.items():
        assert abs(res.biases.get(*link) - b) < 1e-4
