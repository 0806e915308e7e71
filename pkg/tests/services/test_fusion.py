import numpy as np
import pandas as pd
import pytest

from app.errors import InvalidInputError, StreamError
from app.models import FilterState, ImuSample, UnitQuaternion
from app.services import fusion
from app.services.rotations import angular_offset, axis_angle_to_quat, quat_conjugate, quat_rotate

GRAVITY = np.array([0.0, 0.0, 9.81])
FIELD = np.array([np.cos(np.radians(60)), 0.0, -np.sin(np.radians(60))])


def static_stream(q_true, seconds=10.0, rate_hz=30.0, noise=None, seed=0):
    """Measurements of a sensor resting at orientation q_true."""
    n = int(seconds * rate_hz)
    rng = np.random.default_rng(seed)
    accel = np.tile(quat_rotate(quat_conjugate(q_true), GRAVITY), (n, 1))
    mag = np.tile(quat_rotate(quat_conjugate(q_true), FIELD), (n, 1))
    gyro = np.zeros((n, 3))
    if noise:
        gyro += rng.normal(0, noise[0], size=(n, 3))
        accel += rng.normal(0, noise[1], size=(n, 3))
        mag += rng.normal(0, noise[2], size=(n, 3))
    ts = (np.arange(n) * 1e6 / rate_hz).astype(np.int64)
    return fusion.ImuStream(timestamps_us=ts, gyro=gyro, accel=accel, mag=mag)


def series(t, quats):
    return fusion.OrientationSeries(timestamps=np.asarray(t, dtype=float), quats=np.asarray(quats, dtype=float))


class TestMadgwick:

    @pytest.fixture
    def tilted(self):
        return axis_angle_to_quat(np.array([1.0, 0.0, 0.0]), np.radians(30.0))

    def test_converges_from_identity_on_static_tilt(self, tilted):
        stream = static_stream(tilted, noise=(0.005, 0.05, 0.01))
        out = fusion.estimate_stream_orientation(stream, beta=0.1)
        assert np.degrees(angular_offset(out.quats[-1], tilted)) < 2.0

    def test_exact_measurements_are_a_fixed_point(self, tilted):
        stream = static_stream(tilted, seconds=2.0)
        q0 = fusion.initial_orientation(stream.accel[0], stream.mag[0])
        assert angular_offset(q0, tilted) < 1e-9
        out = fusion.estimate_stream_orientation(stream, beta=0.1, q0=q0)
        assert np.max(angular_offset(out.quats, tilted)) < 1e-6

    def test_single_update_keeps_unit_norm(self, tilted):
        state = FilterState(q=UnitQuaternion.identity(), beta=0.1)
        sample = ImuSample(timestamp_us=0, gyro=(0.1, -0.2, 0.3), accel=(0.0, 0.0, 9.81), mag=tuple(FIELD))
        new = fusion.madgwick_update(state, sample, dt=1 / 30)
        assert np.linalg.norm(new.q.as_array()) == pytest.approx(1.0, abs=1e-9)
        assert new.gyro_only_steps == 0

    def test_zero_accel_falls_back_to_gyro(self):
        state = FilterState()
        sample = ImuSample(timestamp_us=0, gyro=(0.0, 0.0, 1.0), accel=(0.0, 0.0, 0.0), mag=tuple(FIELD))
        new = fusion.madgwick_update(state, sample, dt=0.1)
        assert new.gyro_only_steps == 1
        # pure integration about z
        assert new.q.z > 0 and new.q.x == pytest.approx(0.0) and new.q.y == pytest.approx(0.0)

    def test_non_positive_dt_rejected(self):
        sample = ImuSample(timestamp_us=0, gyro=(0, 0, 0), accel=(0, 0, 1), mag=(1, 0, 0))
        with pytest.raises(InvalidInputError):
            fusion.madgwick_update(FilterState(), sample, dt=0.0)

    def test_tracks_constant_rotation_about_z(self):
        rate, seconds, hz = np.radians(10.0), 10.0, 30.0
        n = int(seconds * hz)
        t = np.arange(n) / hz
        truth = axis_angle_to_quat(np.tile([0.0, 0.0, 1.0], (n, 1)), rate * t)
        stream = fusion.ImuStream(
            timestamps_us=(t * 1e6).astype(np.int64),
            gyro=np.tile([0.0, 0.0, rate], (n, 1)),
            accel=quat_rotate(quat_conjugate(truth), GRAVITY),
            mag=quat_rotate(quat_conjugate(truth), FIELD),
        )
        out = fusion.estimate_stream_orientation(stream, beta=0.1, q0=truth[0])
        assert np.degrees(np.max(angular_offset(out.quats, truth))) < 1.0

    def test_non_increasing_timestamps(self, tilted):
        stream = static_stream(tilted, seconds=1.0)
        ts = stream.timestamps_us.copy()
        ts[5] = ts[4]
        broken = stream.model_copy(update={"timestamps_us": ts})
        with pytest.raises(StreamError):
            fusion.estimate_stream_orientation(broken)


class TestInterSensorFusion:

    def test_identical_orientations_give_identity(self):
        q = axis_angle_to_quat(np.array([0.0, 1.0, 0.0]), 0.4)
        parent = series([0.0, 0.1, 0.2], np.tile(q, (3, 1)))
        rel = fusion.fuse_module(parent, parent)
        np.testing.assert_allclose(rel.quats, np.tile([1.0, 0, 0, 0], (3, 1)), atol=1e-12)

    def test_unpaired_samples_are_dropped(self):
        ident = np.tile([1.0, 0, 0, 0], (4, 1))
        parent = series([0.0, 0.1, 0.2, 0.3], ident)
        child = series([0.0, 0.1, 0.2, 5.0], ident)
        rel = fusion.fuse_module(parent, child)
        assert len(rel.timestamps) == 3
        assert rel.diagnostics.unpaired_samples == 1

    def test_no_overlap_raises(self):
        ident = np.tile([1.0, 0, 0, 0], (2, 1))
        with pytest.raises(StreamError):
            fusion.fuse_module(series([0.0, 0.1], ident), series([10.0, 10.1], ident))

    def test_midpoint_interpolation(self):
        ten = axis_angle_to_quat(np.array([0.0, 0.0, 1.0]), np.radians(10.0))
        ident = np.array([1.0, 0, 0, 0])
        channels = [series([0.0, 1.0], [ident, ten])] + [series([0.0, 0.5, 1.0], np.tile(ident, (3, 1)))] * 3
        poses = fusion.synchronize_streams(channels, rate_hz=2.0)
        np.testing.assert_allclose(poses.timestamps, [0.0, 0.5, 1.0])
        assert np.degrees(angular_offset(poses.quats[1, 0], ident)) == pytest.approx(5.0, abs=0.1)

    def test_disjoint_channels_raise(self):
        ident = np.tile([1.0, 0, 0, 0], (2, 1))
        channels = [series([0.0, 1.0], ident)] * 3 + [series([2.0, 3.0], ident)]
        with pytest.raises(StreamError):
            fusion.synchronize_streams(channels)

    def test_warmup_trims_leading_samples(self):
        poses = fusion.PoseTimeseries(timestamps=np.arange(10) / 2.0, quats=np.tile([1.0, 0, 0, 0], (10, 4, 1)))
        assert len(poses.after(2.0)) == 6

    def test_missing_module_rejected(self):
        with pytest.raises(InvalidInputError):
            fusion.fuse_session({})


class TestTestMatrix:

    def test_pads_shorter_recordings_with_nan(self):
        short = fusion.PoseTimeseries(timestamps=np.arange(3.0), quats=np.tile([1.0, 0, 0, 0], (3, 4, 1)))
        long = fusion.PoseTimeseries(timestamps=np.arange(5.0), quats=np.tile([1.0, 0, 0, 0], (5, 4, 1)))
        matrix = fusion.build_test_matrix([(1, short), (2, long)])
        assert matrix.values.shape == (5, 32)
        assert matrix.padded_count == 2
        assert np.all(np.isnan(matrix.values[3:, :16]))
        features, labels = matrix.valid_rows()
        assert features.shape == (8, 16)
        assert labels.tolist() == [1, 1, 1, 2, 2, 2, 2, 2]

    def test_empty_input_rejected(self):
        with pytest.raises(InvalidInputError):
            fusion.build_test_matrix([])


class TestImuTables:

    def test_gyro_columns_are_degrees(self):
        rows = []
        for module in ("RW", "LW", "RA", "LA"):
            for role in ("p", "c"):
                rows.append({"timestamp_us": 0, "module_id": module, "imu_role": role,
                             "gx": 0.0, "gy": 0.0, "gz": 180.0, "ax": 0.0, "ay": 0.0, "az": 9.81,
                             "mx": 0.5, "my": 0.0, "mz": -0.8})
        streams = fusion.streams_from_frame(pd.DataFrame(rows))
        assert set(streams) == {"RW", "LW", "RA", "LA"}
        assert streams["RW"].parent.gyro[0, 2] == pytest.approx(np.pi)

    def test_missing_columns_rejected(self):
        with pytest.raises(InvalidInputError):
            fusion.streams_from_frame(pd.DataFrame({"timestamp_us": [0]}))

    def test_unknown_role_rejected(self):
        frame = pd.DataFrame([{c: 0 for c in fusion.IMU_COLUMNS}])
        frame["module_id"], frame["imu_role"] = "RW", "x"
        with pytest.raises(InvalidInputError):
            fusion.streams_from_frame(frame)
