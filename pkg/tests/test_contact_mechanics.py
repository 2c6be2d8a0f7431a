from __future__ import annotations

import math

import numpy as np
import pytest

from tactile.contact_mechanics import (
    K_N,
    STANDARD_INDENTERS,
    SKIRT_SIGMA,
    SUPPORT_SIGMAS,
    ContactSpec,
    Indenter,
    Magnitude,
    contact_load,
    displacement_at,
    displacement_field,
    episode_states,
    make_episode,
    random_episode,
)
from tactile.errors import DomainError, RangeError
from tactile.shell_geometry import ShellGeometry, grid_cell_areas, sample_surface_uv, surface_point, surface_points, uv_grid

MID_WALL = (1.0, 0.3)


def test_indenter_names_round_trip() -> None:
    assert [i.name for i in STANDARD_INDENTERS] == [
        "sphere-3", "sphere-4", "sphere-5", "square-6", "hexagon-3", "ellipse-4x2",
    ]
    assert Indenter.from_name("ellipse-4x2") == Indenter.ellipse(4.0, 2.0)
    with pytest.raises(DomainError):
        Indenter.from_name("cone-3")
    with pytest.raises(DomainError):
        Indenter.from_name("sphere")


def test_zero_depth_gives_zero_field_and_load(geom: ShellGeometry) -> None:
    spec = ContactSpec(uv=MID_WALL, depth=0.0, slip=(0.5, 0.0), twist=0.1)
    fld = displacement_field(geom, Indenter.sphere(3.0), spec)
    assert fld.is_zero
    assert contact_load(Indenter.sphere(3.0), spec) == ((0.0, 0.0, 0.0), 0.0)


def test_depth_bounds() -> None:
    with pytest.raises(DomainError):
        ContactSpec(uv=MID_WALL, depth=-0.1)
    with pytest.raises(DomainError):
        ContactSpec(uv=MID_WALL, depth=3.5)


def test_normal_load_closed_form() -> None:
    f, _ = contact_load(Indenter.sphere(3.0), ContactSpec(uv=MID_WALL, depth=2.0))
    expected = K_N * math.sqrt(3.0) * 2.0**1.5
    assert abs(-f[2] - expected) <= 1e-6
    assert -f[2] == pytest.approx(12.0, abs=0.01)


def test_load_is_odd_in_slip_and_twist() -> None:
    ind = Indenter.hexagon(3.0)
    rng = np.random.default_rng(4)
    for _ in range(50):
        d = rng.uniform(0.1, 1.5)
        slip = tuple(rng.uniform(-1.0, 1.0, 2))
        twist = rng.uniform(-0.3, 0.3)
        f1, t1 = contact_load(ind, ContactSpec(uv=MID_WALL, depth=d, slip=slip, twist=twist))
        f2, t2 = contact_load(ind, ContactSpec(uv=MID_WALL, depth=d, slip=(-slip[0], -slip[1]), twist=-twist))
        assert f1[0] == -f2[0] and f1[1] == -f2[1]
        assert f1[2] == f2[2]
        assert t1 == -t2


def test_tangential_force_respects_friction_cone() -> None:
    f, _ = contact_load(Indenter.sphere(3.0), ContactSpec(uv=MID_WALL, depth=0.2, slip=(20.0, 20.0)))
    assert math.hypot(f[0], f[1]) <= -f[2] + 1e-12


def test_sphere_footprint_area(geom: ShellGeometry) -> None:
    ind = Indenter.sphere(4.0)
    d = 1.0
    fld = displacement_field(geom, ind, ContactSpec(uv=MID_WALL, depth=d), grid=(1024, 512))
    area = grid_cell_areas(geom, 1024, 512)[fld.footprint].sum()
    expected = math.pi * (2 * 4.0 * d - d * d)
    assert area == pytest.approx(expected, rel=0.1)


def test_peak_displacement_equals_depth_at_center(geom: ShellGeometry) -> None:
    u, v = uv_grid(256, 128)
    spec = ContactSpec(uv=(u[40], v[50]), depth=1.2)
    fld = displacement_field(geom, Indenter.sphere(3.0), spec)
    assert fld.normal.max() == pytest.approx(1.2, abs=1e-9)
    assert fld.normal[40, 50] == pytest.approx(1.2, abs=1e-9)
    assert fld.normal.min() >= 0.0


def test_flat_punch_skirt_has_compact_support(geom: ShellGeometry) -> None:
    spec = ContactSpec(uv=MID_WALL, depth=1.0)
    fld = displacement_field(geom, Indenter.square(6.0), spec)
    u, v = uv_grid(*fld.shape)
    pos, _ = surface_points(geom, u[:, None], v[None, :])
    center = surface_point(geom, spec.uv).position
    far = np.linalg.norm(pos - center, axis=-1) > 6.0 / math.sqrt(2) + SUPPORT_SIGMAS * SKIRT_SIGMA + 0.5
    assert np.all(fld.normal[far] == 0.0)
    assert np.any(fld.normal[~fld.footprint] > 0.0)


def test_field_grows_with_depth(geom: ShellGeometry) -> None:
    ind = Indenter.ellipse(4.0, 2.0)
    prev = None
    for d in (0.5, 1.0, 1.5):
        fld = displacement_field(geom, ind, ContactSpec(uv=MID_WALL, depth=d))
        if prev is not None:
            assert np.all(fld.normal >= prev - 1e-12)
        prev = fld.normal


def test_base_crossing_footprint_is_clipped(geom: ShellGeometry, caplog: pytest.LogCaptureFixture) -> None:
    fld = displacement_field(geom, Indenter.sphere(5.0), ContactSpec(uv=(0.0, 0.05), depth=1.0))
    assert fld.clipped
    assert "clipped" in caplog.text


def test_slip_moves_material_inside_footprint(geom: ShellGeometry) -> None:
    fld = displacement_field(geom, Indenter.sphere(4.0), ContactSpec(uv=MID_WALL, depth=1.0, slip=(0.5, 0.0)))
    mags = np.linalg.norm(fld.tangential[fld.footprint], axis=-1)
    assert mags.max() == pytest.approx(0.5, abs=0.05)
    assert np.linalg.norm(fld.tangential[~fld.footprint], axis=-1).max() <= 0.5 + 1e-9


def test_point_evaluation_matches_the_grid(geom: ShellGeometry) -> None:
    spec = ContactSpec(uv=MID_WALL, depth=1.2, slip=(0.3, -0.2), twist=0.2)
    ind = Indenter.sphere(4.0)
    fld = displacement_field(geom, ind, spec, grid=(256, 128))
    u, v = uv_grid(256, 128)
    nodes = [(40, 38), (41, 40), (45, 30), (10, 100)]
    pos, _ = surface_points(geom, np.array([u[i] for i, _ in nodes]), np.array([v[j] for _, j in nodes]))
    normal, tangential = displacement_at(geom, ind, spec, pos)
    np.testing.assert_allclose(normal, [fld.normal[i, j] for i, j in nodes], atol=1e-9)
    np.testing.assert_allclose(tangential, [fld.tangential[i, j] for i, j in nodes], atol=1e-9)

    rest_n, rest_t = displacement_at(geom, ind, ContactSpec(uv=MID_WALL, depth=0.0), pos)
    assert not rest_n.any() and not rest_t.any()


def test_episode_schedule() -> None:
    ep = make_episode(MID_WALL, "tilt", Magnitude(depth=1.0, slip=0.8), frames=10, seed=3, indenter=Indenter.sphere(3.0))
    assert ep.frames == 10
    assert ep.specs[0].depth == 0.0
    assert max(s.depth for s in ep.specs) == pytest.approx(1.0)
    assert all(math.hypot(*s.slip) <= 0.8 + 1e-12 for s in ep.specs)

    press = make_episode(MID_WALL, "press", Magnitude(depth=1.5), frames=5, seed=0)
    assert [s.depth for s in press.specs] == pytest.approx([0.0, 0.375, 0.75, 1.125, 1.5])


def test_episode_rejects_out_of_range_magnitudes() -> None:
    with pytest.raises(RangeError):
        make_episode(MID_WALL, "press", Magnitude(depth=2.9), frames=4, seed=0, indenter=Indenter.sphere(5.0))
    with pytest.raises(RangeError):
        make_episode(MID_WALL, "twist", Magnitude(depth=2.0, twist=5.0), frames=4, seed=0)
    with pytest.raises(DomainError):
        make_episode(MID_WALL, "spin", Magnitude(depth=1.0), frames=4, seed=0)
    with pytest.raises(DomainError):
        make_episode(MID_WALL, "press", Magnitude(depth=1.0), frames=1, seed=0)


def test_random_episodes_stay_inside_label_ranges(geom: ShellGeometry) -> None:
    u, v = sample_surface_uv(geom, 1000, seed=1)
    for i in range(1000):
        ind = STANDARD_INDENTERS[i % len(STANDARD_INDENTERS)]
        ep = random_episode(geom, ind, frames=6, seed=i, uv=(u[i], v[i]))
        for _, state in episode_states(ep, ind, geom):
            assert state.in_range(), (ind.name, ep.mode, state)


def test_random_episode_is_seeded(geom: ShellGeometry) -> None:
    a = random_episode(geom, Indenter.sphere(3.0), 8, seed=42, uv=MID_WALL)
    b = random_episode(geom, Indenter.sphere(3.0), 8, seed=42, uv=MID_WALL)
    assert a == b
