import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from papertrust.errors import DegenerateGeometry, InvalidParams
from papertrust.optics import (AcquisitionMeta, AcquisitionPlan, CaptureSet, EnvironmentModel,
                               SurfaceImage, acquire, default_camera_lights, render_camera,
                               render_scanner, shift_image)
from papertrust.surface import NormMap, SurfaceParams, generate_surface


def camera_pixel(n, row, col, env):
    """Scalar reference for one pixel of the point-light model."""
    lx, ly, lz = env.light_position
    v = (lx - col, ly - row, lz)
    d = math.sqrt(sum(c * c for c in v))
    dot = max(sum(a * b for a, b in zip(n, v)), 0.0)
    return env.albedo * env.source_intensity * dot / d**3 + env.ambient


def test_camera_render_matches_scalar_oracle(surface):
    env = EnvironmentModel(albedo=0.8, source_intensity=2.0, light_position=(3.0, 20.0, 15.0), ambient=0.01)
    img = render_camera(surface, env).intensities
    for row, col in [(0, 0), (5, 17), (31, 31), (12, 3)]:
        assert img[row, col] == pytest.approx(camera_pixel(surface.normals[row, col], row, col, env), rel=1e-12)


def test_scanner_render_matches_scalar_oracle(surface):
    env = EnvironmentModel(albedo=0.9, elevation_angle=0.6, ambient=0.05)
    ce, se = math.cos(0.6), math.sin(0.6)
    for orient, (sx, cy) in {0: (0, 1), 90: (1, 0), 180: (0, -1), 270: (-1, 0)}.items():
        img = render_scanner(surface, orient, env).intensities
        n = surface.normals[4, 9]
        expected = 0.05 + 0.9 * max(n[0] * ce * sx + n[1] * ce * cy + n[2] * se, 0.0)
        assert img[4, 9] == pytest.approx(expected, rel=1e-12)


@given(st.floats(0.5, 1.3), st.floats(0.1, 3.0))
def test_opposite_scans_isolate_components(elev, gain):
    # slope 0.4 stays unshadowed while tan(elevation) > 0.4 / sqrt(1 - 0.16)
    nm = generate_surface(SurfaceParams(8, 8, 2.0, 0.4, seed=1))
    env = EnvironmentModel(source_intensity=gain, elevation_angle=elev, ambient=0.3)
    i = {o: render_scanner(nm, o, env).intensities for o in (0, 90, 180, 270)}
    scale = env.scanner_scale()
    assert np.allclose((i[0] - i[180]) / scale, nm.ny, atol=1e-12)
    assert np.allclose((i[90] - i[270]) / scale, nm.nx, atol=1e-12)


def test_low_elevation_shadows_break_the_difference_identity():
    nm = generate_surface(SurfaceParams(8, 8, 2.0, 0.4, seed=1))
    env = EnvironmentModel(elevation_angle=0.25)
    i0, i180 = (render_scanner(nm, o, env).intensities for o in (0, 180))
    assert (i0 == 0).any() or (i180 == 0).any()
    assert not np.allclose((i0 - i180) / env.scanner_scale(), nm.ny, atol=1e-6)


def test_flat_surface_under_overhead_light_is_symmetric():
    env = EnvironmentModel(light_position=(7.0, 7.0, 10.0))
    img = render_camera(NormMap.flat(15, 15), env).intensities
    assert np.allclose(img, img[::-1, :]) and np.allclose(img, img[:, ::-1])
    assert img.argmax() == 7 * 15 + 7


def test_noise_is_seeded_and_nonnegative(surface):
    env = EnvironmentModel()
    a = render_scanner(surface, 0, env, 0.05, seed=3)
    b = render_scanner(surface, 0, env, 0.05, seed=3)
    c = render_scanner(surface, 0, env, 0.05, seed=4)
    assert a == b and a != c
    assert a.intensities.min() >= 0


@pytest.mark.parametrize("env", [
    EnvironmentModel(light_position=None),
    EnvironmentModel(light_position=(0.0, 0.0, 0.0)),
    EnvironmentModel(light_position=(1.0, 1.0, -5.0)),
])
def test_degenerate_light_geometry(env, surface):
    with pytest.raises(DegenerateGeometry):
        render_camera(surface, env)


@pytest.mark.parametrize("env", [
    EnvironmentModel(albedo=0), EnvironmentModel(elevation_angle=math.pi / 2), EnvironmentModel(ambient=-1),
])
def test_invalid_environment(env, surface):
    with pytest.raises(InvalidParams):
        render_scanner(surface, 0, env)


def test_bad_orientation(surface):
    with pytest.raises(InvalidParams):
        render_scanner(surface, 45, EnvironmentModel())


def test_default_lights_are_above_and_distinct():
    lights = default_camera_lights(32, 24, 8)
    assert len(set(lights)) == 8
    assert all(z > 0 for _, _, z in lights)
    with pytest.raises(InvalidParams):
        default_camera_lights(32, 24, 9)


def test_image_serialization_roundtrips(surface):
    img = render_scanner(surface, 90, EnvironmentModel(), 0.01, seed=1)
    raw = SurfaceImage.from_bytes(img.to_bytes(), img.meta)
    assert np.allclose(raw.intensities, img.intensities, atol=1e-6)
    pgm = img.to_pgm()
    assert pgm.startswith(b"P5\n")
    back = SurfaceImage.from_pgm(pgm, img.meta)
    peak = img.intensities.max()
    assert np.max(np.abs(back.intensities - img.intensities)) <= peak / 65535


def test_images_validate_contents():
    with pytest.raises(InvalidParams):
        SurfaceImage(np.array([[1.0, -0.1]]), AcquisitionMeta("camera"))
    with pytest.raises(InvalidParams):
        SurfaceImage(np.array([[np.nan]]), AcquisitionMeta("camera"))


def test_capture_set_checks_dimensions():
    a = SurfaceImage(np.ones((4, 4)), AcquisitionMeta("camera"))
    b = SurfaceImage(np.ones((4, 5)), AcquisitionMeta("camera"))
    with pytest.raises(InvalidParams):
        CaptureSet((a, b))
    with pytest.raises(InvalidParams):
        CaptureSet((a,), environments=(EnvironmentModel(), EnvironmentModel()))


def test_acquire_scanner_and_camera(surface):
    s = acquire(surface, AcquisitionPlan(seed=1))
    assert [im.meta.orientation for im in s.images] == [0, 90, 180, 270]
    assert len({im.meta.nonce for im in s.images}) == 1 and s.images[0].meta.nonce == s.nonce
    c = acquire(surface, AcquisitionPlan(mode="camera", n_images=6, seed=1))
    assert len(c.images) == 6 and len(c.environments) == 6 and c.mode == "camera"
    assert acquire(surface, AcquisitionPlan(seed=1)) == s


def test_acquire_noise_scales_with_peak(surface):
    clean = acquire(surface, AcquisitionPlan())
    noisy = acquire(surface, AcquisitionPlan(noise=0.02, seed=9))
    resid = np.concatenate([(n.intensities - c.intensities).ravel()
                            for n, c in zip(noisy.images, clean.images)])
    peak = max(im.intensities.max() for im in clean.images)
    assert resid.std() == pytest.approx(0.02 * peak, rel=0.1)


def test_shift_matches_phase_correlation(surface):
    from skimage.registration import phase_cross_correlation

    img = render_scanner(surface, 0, EnvironmentModel()).intensities
    moved = shift_image(img, 2.0, -3.0)
    shift, _, _ = phase_cross_correlation(moved, img, upsample_factor=20)
    assert np.allclose(shift, (-3.0, 2.0), atol=0.1)  # (rows, cols)


def test_inverse_square_at_center():
    h = 12.0
    img = render_camera(NormMap.flat(9, 9), EnvironmentModel(light_position=(4.0, 4.0, h))).intensities
    assert img[4, 4] == pytest.approx(1 / h**2, rel=1e-12)


def test_ambient_cancels_in_opposite_scans(surface):
    a = EnvironmentModel(ambient=0.0)
    b = EnvironmentModel(ambient=0.37)
    d = lambda env: render_scanner(surface, 90, env).intensities - render_scanner(surface, 270, env).intensities
    assert np.array_equal(d(a), d(b)) or np.max(np.abs(d(a) - d(b))) < 1e-12
