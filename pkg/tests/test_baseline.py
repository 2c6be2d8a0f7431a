from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from tactile.baseline import (
    BaselineEstimator,
    DepthCalibration,
    StateEstimate,
    baseline_estimate,
    calibrate_baseline,
    find_contact,
)
from tactile.contact_mechanics import MAX_DEPTH, ContactSpec, Indenter, contact_load
from tactile.metrics import torsion_sign_summary
from tactile.photometric_renderer import CameraModel, SensorInstance, reference_image, render_contact
from tactile.shell_geometry import ShellGeometry, sample_surface_uv, surface_point

SPHERE = Indenter.sphere(4.0)


@pytest.fixture(scope="module")
def mid_sensor() -> SensorInstance:
    return SensorInstance.create("mid", "RRRGGGBBB", False, seed=0, perturb=False, camera=CameraModel(image_size=128))


@pytest.fixture(scope="module")
def mid_calibration(geom: ShellGeometry, mid_sensor: SensorInstance) -> DepthCalibration:
    return calibrate_baseline(geom, mid_sensor, SPHERE, presses=12, seed=4)


def test_state_estimate_vectors() -> None:
    est = StateEstimate.from_vector(range(8))
    assert est.x == (0.0, 1.0, 2.0) and est.tau == 6.0 and est.d == 7.0
    np.testing.assert_array_equal(est.to_vector(), np.arange(8.0))
    assert not StateEstimate.zero().is_contact


def test_calibration_curve_and_persistence(tmp_path: Path) -> None:
    cal = DepthCalibration(slope=0.5, intercept=-1.0, indenter="sphere-4", sensor_id="s", presses=10)
    assert cal.depth(0.0) == 0.0
    assert cal.depth(math.e**2) == pytest.approx(1.0)
    assert cal.depth(1e12) == MAX_DEPTH
    cal.save(tmp_path / "cal" / "s.json")
    assert DepthCalibration.load(tmp_path / "cal" / "s.json") == cal


def test_reference_frame_reads_as_no_contact(geom: ShellGeometry, mid_sensor: SensorInstance, mid_calibration: DepthCalibration) -> None:
    ref = reference_image(geom, mid_sensor)
    assert find_contact(geom, mid_sensor, ref, ref) is None
    assert baseline_estimate(ref, ref, mid_sensor, geom, mid_calibration, SPHERE) == StateEstimate.zero()


def test_calibration_slope_is_positive(mid_calibration: DepthCalibration) -> None:
    assert mid_calibration.presses >= 2
    assert mid_calibration.slope > 0.0
    assert mid_calibration.sensor_id == "mid"


def test_press_is_localized(geom: ShellGeometry, mid_sensor: SensorInstance, mid_calibration: DepthCalibration) -> None:
    uv = (2.5, 0.55)
    ref = reference_image(geom, mid_sensor)
    img = render_contact(geom, mid_sensor, SPHERE, ContactSpec(uv=uv, depth=1.5))
    est = baseline_estimate(ref, img, mid_sensor, geom, mid_calibration, SPHERE)
    assert est.is_contact
    truth = surface_point(geom, uv).position
    assert np.linalg.norm(np.asarray(est.x) - truth) < 4.0
    assert est.f[2] < 0.0


def test_estimator_adapter_calibrates_lazily(geom: ShellGeometry, mid_sensor: SensorInstance, mid_calibration: DepthCalibration) -> None:
    est = BaselineEstimator(geom, {"mid": mid_sensor}, SPHERE, {"mid": mid_calibration})
    ref = reference_image(geom, mid_sensor)
    assert est.estimate(ref, ref) == StateEstimate.zero()
    assert est.calibration("mid") is mid_calibration
    assert est.trained_episodes == frozenset()


@pytest.fixture(scope="module")
def full_sensor() -> SensorInstance:
    return SensorInstance.create("full", "RRRGGGBBB", True, seed=0, perturb=False)


@pytest.fixture(scope="module")
def full_calibration(geom: ShellGeometry, full_sensor: SensorInstance) -> DepthCalibration:
    return calibrate_baseline(geom, full_sensor, SPHERE, presses=30, seed=1)


@pytest.mark.slow
def test_baseline_localizes_full_size_presses(geom: ShellGeometry, full_sensor: SensorInstance, full_calibration: DepthCalibration) -> None:
    inst, cal = full_sensor, full_calibration
    ref = reference_image(geom, inst)
    u, v = sample_surface_uv(geom, 20, seed=21)
    errors = []
    for i in range(20):
        uv = (float(u[i]), float(np.clip(v[i], 0.25, 0.95)))
        img = render_contact(geom, inst, SPHERE, ContactSpec(uv=uv, depth=1.5))
        est = baseline_estimate(ref, img, inst, geom, cal, SPHERE)
        errors.append(np.linalg.norm(np.asarray(est.x) - surface_point(geom, uv).position))
    assert float(np.mean(errors)) <= 2.5


@pytest.mark.slow
def test_baseline_depth_error_on_full_size_presses(geom: ShellGeometry, full_sensor: SensorInstance, full_calibration: DepthCalibration) -> None:
    ref = reference_image(geom, full_sensor)
    u, v = sample_surface_uv(geom, 20, seed=33)
    depths = np.random.default_rng(33).uniform(0.5, 1.8, 20)
    errors = []
    for i in range(20):
        spec = ContactSpec(uv=(float(u[i]), float(v[i])), depth=float(depths[i]))
        est = baseline_estimate(ref, render_contact(geom, full_sensor, SPHERE, spec), full_sensor, geom, full_calibration, SPHERE)
        errors.append(abs(est.d - spec.depth))
    assert float(np.mean(errors)) <= 0.3


@pytest.mark.slow
def test_baseline_torsion_sign_on_twist_frames(geom: ShellGeometry, full_sensor: SensorInstance, full_calibration: DepthCalibration) -> None:
    ref = reference_image(geom, full_sensor)
    u, v = sample_surface_uv(geom, 20, seed=21)
    pairs = []
    for i in range(20):
        twist = 0.25 if i % 2 == 0 else -0.25
        spec = ContactSpec(uv=(float(u[i]), float(v[i])), depth=1.2, twist=twist)
        _, tau = contact_load(SPHERE, spec)
        est = baseline_estimate(ref, render_contact(geom, full_sensor, SPHERE, spec), full_sensor, geom, full_calibration, SPHERE)
        pairs.append((tau, est.tau))
    summary = torsion_sign_summary(pairs)
    assert summary["count"] >= 15
    assert summary["accuracy"] >= 0.95
    # magnitude follows the applied twist, not a small fraction of it
    taus = np.array([abs(t) for t, e in pairs if e != 0.0])
    ests = np.array([abs(e) for t, e in pairs if e != 0.0])
    assert float(np.median(ests / taus)) > 0.4

