import numpy as np
import pytest
from hypothesis import given, strategies as st

from papertrust.errors import InvalidParams
from papertrust.surface import (DEGRADATION_KINDS, DegradationSpec, NormMap, SurfaceParams,
                                degrade_surface, generate_surface)


def autocorr_direct(field, lag):
    """Normalized autocorrelation along rows by explicit summation (wrap-around)."""
    h, w = field.shape
    f = field - field.mean()
    num = 0.0
    for r in range(h):
        for c in range(w):
            num += f[r, c] * f[r, (c + lag) % w]
    return num / float((f * f).sum())


@given(seed=st.integers(0, 2**32 - 1), size=st.integers(4, 24),
       corr=st.floats(1.0, 6.0), slope=st.floats(0.0, 0.95))
def test_generated_maps_are_unit_and_upward(seed, size, corr, slope):
    nm = generate_surface(SurfaceParams(size, size + 3, corr, slope, seed))
    assert nm.shape == (size + 3, size)
    assert nm.check_invariants(1e-9)


def test_generation_is_deterministic():
    p = SurfaceParams(16, 16, 2.0, 0.3, seed=5)
    assert generate_surface(p) == generate_surface(p)
    assert generate_surface(p) != generate_surface(SurfaceParams(16, 16, 2.0, 0.3, seed=6))


def test_slope_scale_sets_peak_tangential_magnitude():
    nm = generate_surface(SurfaceParams(32, 32, 3.0, 0.25, seed=1))
    assert np.hypot(nm.nx, nm.ny).max() == pytest.approx(0.25, abs=1e-12)


def test_zero_slope_is_flat():
    nm = generate_surface(SurfaceParams(8, 8, 3.0, 0.0, seed=1))
    assert nm == NormMap.flat(8, 8)


def test_correlation_decays_with_lag():
    nm = generate_surface(SurfaceParams(96, 96, 3.0, 0.2, seed=3))
    near = autocorr_direct(nm.nx, 1)
    far = autocorr_direct(nm.nx, 12)
    assert near > 0.7
    assert abs(far) < 0.15
    # vectorized check against the summation oracle
    f = nm.nx - nm.nx.mean()
    fast = float((f * np.roll(f, -1, axis=1)).sum() / (f * f).sum())
    assert fast == pytest.approx(near, abs=1e-12)


@pytest.mark.parametrize("bad", [
    dict(width=0), dict(height=-1), dict(correlation_length=0.0), dict(slope_scale=1.0),
    dict(slope_scale=-0.1),
])
def test_invalid_params_rejected(bad):
    with pytest.raises(InvalidParams):
        generate_surface(SurfaceParams(**{**dict(width=8, height=8), **bad}))


def test_from_tangential_clamps_overlong_vectors():
    nm = NormMap.from_tangential(np.array([[2.0, 0.0]]), np.array([[0.0, 0.5]]))
    assert nm.check_invariants()
    assert np.hypot(nm.nx, nm.ny)[0, 0] == pytest.approx(0.999)


def test_normals_are_read_only(surface):
    with pytest.raises(ValueError):
        surface.normals[0, 0, 0] = 1.0


def test_bytes_roundtrip(surface):
    back = NormMap.from_bytes(surface.to_bytes())
    assert back.shape == surface.shape
    assert np.max(np.abs(back.normals - surface.normals)) < 1e-6
    assert back.check_invariants()
    assert surface.to_bytes()[:4] == b"NMAP"


def test_bytes_rejects_corruption(surface):
    blob = surface.to_bytes()
    with pytest.raises(InvalidParams):
        NormMap.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(InvalidParams):
        NormMap.from_bytes(blob[:-4])


def test_csv_layout():
    text = NormMap.flat(2, 1).to_csv().splitlines()
    assert text[0] == "row,col,nx,ny,nz"
    assert text[1:] == ["0,0,0.0,0.0,1.0", "0,1,0.0,0.0,1.0"]


@pytest.mark.parametrize("kind", DEGRADATION_KINDS)
def test_degradations_keep_invariants_and_input(kind, surface):
    before = surface.normals.copy()
    out = degrade_surface(surface, DegradationSpec(kind, 0.7, seed=2))
    assert out.check_invariants()
    assert np.array_equal(surface.normals, before)
    assert out != surface
    assert degrade_surface(surface, DegradationSpec(kind, 0.0)) == surface


def test_region_confines_damage(surface):
    out = degrade_surface(surface, DegradationSpec("scribble", 1.0, region=(0, 0, 8, 8), seed=1))
    diff = np.any(out.normals != surface.normals, axis=-1)
    assert diff[:8, :8].any()
    assert not diff[8:, :].any() and not diff[:, 8:].any()


def test_wet_smoothing_grows_with_severity(surface):
    rough = [np.abs(np.diff(degrade_surface(surface, DegradationSpec("wet", s)).nx, axis=1)).mean()
             for s in (0.0, 0.25, 0.5, 1.0)]
    assert all(a > b for a, b in zip(rough, rough[1:]))


@pytest.mark.parametrize("spec", [
    DegradationSpec("melt", 0.5), DegradationSpec("wet", 1.5), DegradationSpec("tear", 0.5, region=(0, 0, 40, 4)),
])
def test_bad_degradation_spec(spec, surface):
    with pytest.raises(InvalidParams):
        degrade_surface(surface, spec)
