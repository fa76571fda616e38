"""Image formation under the fully diffuse reflection model.

Two acquisition devices are simulated:

* a camera with a point light, where each pixel receives
  ``albedo * l0 * (n . v) / |v|**3`` with ``v`` pointing from the pixel to
  the light (inverse-square falloff times the cosine term);
* a flatbed scanner, whose linear lamp is modelled as a directional light at
  a fixed elevation.  Scanning at 0/90/180/270 degrees rotates the lamp
  azimuth, so opposite orientations differ by a term proportional to one
  tangential component of the normal.

Pixel (row, col) sits at world position (x=col, y=row, z=0).
"""
from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import DegenerateGeometry, InvalidParams
from .surface import NormMap

SCANNER_ORIENTATIONS = (0, 90, 180, 270)

SIMG_MAGIC = b"SIMG"
SIMG_VERSION = 1
_SIMG_HEADER = struct.Struct("<4sHII2x")


@dataclass(frozen=True)
class EnvironmentModel:
    albedo: float = 1.0
    source_intensity: float = 1.0
    light_position: Optional[Tuple[float, float, float]] = None  # (x, y, z), camera mode
    elevation_angle: float = math.pi / 4  # scanner mode
    ambient: float = 0.0

    def validate(self):
        if not self.albedo > 0 or not self.source_intensity > 0:
            raise InvalidParams("albedo and source intensity must be positive")
        if not 0 < self.elevation_angle < math.pi / 2:
            raise InvalidParams("elevation angle must lie in (0, pi/2)")
        if self.ambient < 0:
            raise InvalidParams("ambient offset must be non-negative")

    @property
    def gain(self) -> float:
        return self.albedo * self.source_intensity

    def scanner_scale(self) -> float:
        """Factor linking opposite-orientation differences to a normal component."""
        return 2.0 * self.gain * math.cos(self.elevation_angle)

    def to_dict(self) -> dict:
        return {
            "albedo": self.albedo,
            "source_intensity": self.source_intensity,
            "light_position": None if self.light_position is None else list(self.light_position),
            "elevation_angle": self.elevation_angle,
            "ambient": self.ambient,
        }


def default_camera_lights(width: int, height: int, count: int = 4) -> List[Tuple[float, float, float]]:
    """Lights over the four corners at height = width, then edge midpoints."""
    z = float(width)
    x0, y0, x1, y1 = 0.0, 0.0, float(width - 1), float(height - 1)
    xm, ym = x1 / 2, y1 / 2
    candidates = [
        (x0, y0, z), (x1, y0, z), (x1, y1, z), (x0, y1, z),
        (xm, y0, z), (x1, ym, z), (xm, y1, z), (x0, ym, z),
    ]
    if count > len(candidates):
        raise InvalidParams(f"at most {len(candidates)} default camera lights")
    return candidates[:count]


@dataclass(frozen=True)
class AcquisitionMeta:
    mode: str  # "scanner" | "camera"
    orientation: Optional[int] = None
    shot: Optional[int] = None
    noise_sigma: float = 0.0
    nonce: int = 0


@dataclass(frozen=True, eq=False)
class SurfaceImage:
    intensities: np.ndarray
    meta: AcquisitionMeta

    def __post_init__(self):
        a = np.asarray(self.intensities, dtype=np.float64).copy()
        if a.ndim != 2:
            raise InvalidParams("intensities must be a 2D grid")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise InvalidParams("intensities must be finite and non-negative")
        a.setflags(write=False)
        object.__setattr__(self, "intensities", a)

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SurfaceImage):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.intensities, other.intensities)

    __hash__ = None

    def to_bytes(self) -> bytes:
        header = _SIMG_HEADER.pack(SIMG_MAGIC, SIMG_VERSION, self.width, self.height)
        return header + self.intensities.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, meta: Optional[AcquisitionMeta] = None) -> "SurfaceImage":
        magic, version, width, height = _SIMG_HEADER.unpack_from(data)
        if magic != SIMG_MAGIC or version != SIMG_VERSION:
            raise InvalidParams("not a surface image container")
        body = np.frombuffer(data, dtype="<f4", offset=_SIMG_HEADER.size)
        if body.size != width * height:
            raise InvalidParams("surface image body size does not match header")
        return cls(body.reshape(height, width).astype(np.float64), meta or AcquisitionMeta("camera"))

    def to_pgm(self) -> bytes:
        """16-bit binary PGM; the applied scale factor is kept in a comment."""
        peak = float(self.intensities.max())
        scale = 65535.0 / peak if peak > 0 else 1.0
        pixels = np.round(self.intensities * scale).astype(">u2")
        header = f"P5\n# scale={scale!r}\n{self.width} {self.height}\n65535\n".encode("ascii")
        return header + pixels.tobytes()

    @classmethod
    def from_pgm(cls, data: bytes, meta: Optional[AcquisitionMeta] = None) -> "SurfaceImage":
        m = re.match(rb"P5\n# scale=(\S+)\n(\d+) (\d+)\n65535\n", data)
        if m is None:
            raise InvalidParams("unsupported PGM layout")
        scale = float(m.group(1))
        width, height = int(m.group(2)), int(m.group(3))
        pixels = np.frombuffer(data, dtype=">u2", offset=m.end()).reshape(height, width)
        return cls(pixels.astype(np.float64) / scale, meta or AcquisitionMeta("camera"))


def _pixel_grid(height: int, width: int) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([cols, rows, np.zeros_like(rows)], axis=-1)


def light_vectors(env: EnvironmentModel, height: int, width: int) -> np.ndarray:
    """Per-pixel vector from the surface point to the light, shape (H, W, 3)."""
    if env.light_position is None:
        raise DegenerateGeometry("camera rendering needs a light position")
    light = np.asarray(env.light_position, dtype=np.float64)
    if light[2] <= 0:
        raise DegenerateGeometry("light must lie above the surface (z > 0)")
    return light - _pixel_grid(height, width)


def _add_noise(clean: np.ndarray, noise_sigma: float, seed) -> np.ndarray:
    if noise_sigma < 0:
        raise InvalidParams("noise_sigma must be non-negative")
    if noise_sigma == 0:
        return clean
    rng = np.random.default_rng(seed)
    return np.clip(clean + rng.normal(0.0, noise_sigma, clean.shape), 0.0, None)


def render_camera(nm: NormMap, env: EnvironmentModel, noise_sigma: float = 0.0, seed=0,
                  shot: int = 0, nonce: int = 0) -> SurfaceImage:
    env.validate()
    v = light_vectors(env, nm.height, nm.width)
    dist = np.linalg.norm(v, axis=-1)
    ndotv = np.maximum(np.einsum("ijk,ijk->ij", nm.normals, v), 0.0)
    clean = env.gain * ndotv / dist**3 + env.ambient
    meta = AcquisitionMeta("camera", shot=shot, noise_sigma=noise_sigma, nonce=nonce)
    return SurfaceImage(_add_noise(clean, noise_sigma, seed), meta)


def scanner_direction(orientation: int, elevation: float) -> np.ndarray:
    if orientation not in SCANNER_ORIENTATIONS:
        raise InvalidParams(f"scanner orientation must be one of {SCANNER_ORIENTATIONS}")
    theta = math.radians(orientation)
    c = math.cos(elevation)
    # exact values at the four orientations keep opposite differences clean
    s_t, c_t = round(math.sin(theta)), round(math.cos(theta))
    return np.array([c * s_t, c * c_t, math.sin(elevation)])


def render_scanner(nm: NormMap, orientation: int, env: EnvironmentModel, noise_sigma: float = 0.0,
                   seed=0, nonce: int = 0) -> SurfaceImage:
    env.validate()
    d = scanner_direction(orientation, env.elevation_angle)
    clean = env.ambient + env.gain * np.maximum(nm.normals @ d, 0.0)
    meta = AcquisitionMeta("scanner", orientation=orientation, noise_sigma=noise_sigma, nonce=nonce)
    return SurfaceImage(_add_noise(clean, noise_sigma, seed), meta)


@dataclass(frozen=True, eq=False)
class CaptureSet:
    images: Tuple[SurfaceImage, ...]
    marker_state: str = "intact"
    misalignment: Tuple[float, float] = (0.0, 0.0)  # (dx, dy) in pixels
    environments: Tuple[EnvironmentModel, ...] = ()
    nonce: int = 0

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "environments", tuple(self.environments))
        object.__setattr__(self, "misalignment", tuple(float(m) for m in self.misalignment))
        if self.marker_state not in ("intact", "tampered"):
            raise InvalidParams(f"unknown marker state {self.marker_state!r}")
        if len({(im.height, im.width) for im in self.images}) > 1:
            raise InvalidParams("all images in a capture set must share dimensions")
        if self.environments and len(self.environments) != len(self.images):
            raise InvalidParams("one environment per image is required")

    @property
    def mode(self) -> Optional[str]:
        return self.images[0].meta.mode if self.images else None

    def __eq__(self, other):
        if not isinstance(other, CaptureSet):
            return NotImplemented
        return (self.images == other.images and self.marker_state == other.marker_state
                and self.misalignment == other.misalignment
                and self.environments == other.environments and self.nonce == other.nonce)

    __hash__ = None

    def nbytes(self) -> int:
        """Wire size when the raw images are shipped."""
        return sum(len(im.to_bytes()) for im in self.images) + 8

    def with_marker_state(self, state: str) -> "CaptureSet":
        return replace(self, marker_state=state)


@dataclass(frozen=True)
class AcquisitionPlan:
    mode: str = "scanner"
    environments: Tuple[EnvironmentModel, ...] = ()  # empty -> defaults
    n_images: int = 4  # camera mode only
    noise: float = 0.0  # noise std as a fraction of the peak noiseless intensity
    misalignment: Tuple[float, float] = (0.0, 0.0)
    tamper_markers: bool = False
    seed: int = 0


def plan_environments(plan: AcquisitionPlan, width: int, height: int) -> Tuple[EnvironmentModel, ...]:
    if plan.environments:
        return tuple(plan.environments)
    if plan.mode == "scanner":
        return (EnvironmentModel(),) * len(SCANNER_ORIENTATIONS)
    if plan.mode == "camera":
        return tuple(EnvironmentModel(light_position=p)
                     for p in default_camera_lights(width, height, plan.n_images))
    raise InvalidParams(f"unknown acquisition mode {plan.mode!r}")


def shift_image(a: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Bilinear resampling so that content moves by (+dx, +dy)."""
    return ndimage.shift(a, (dy, dx), order=1, mode="grid-wrap")


def acquire(nm: NormMap, plan: AcquisitionPlan) -> CaptureSet:
    envs = plan_environments(plan, nm.width, nm.height)
    rng = np.random.default_rng(plan.seed)
    nonce = int(rng.integers(0, 2**63))
    noise_seeds = rng.integers(0, 2**63, size=len(envs))
    images = []
    if plan.mode == "scanner":
        if len(envs) != len(SCANNER_ORIENTATIONS):
            raise InvalidParams("scanner plans take exactly four environments")
        for orient, env, s in zip(SCANNER_ORIENTATIONS, envs, noise_seeds):
            clean = render_scanner(nm, orient, env)
            sigma = plan.noise * float(clean.intensities.max())
            images.append(render_scanner(nm, orient, env, sigma, int(s), nonce=nonce))
    elif plan.mode == "camera":
        for i, (env, s) in enumerate(zip(envs, noise_seeds)):
            clean = render_camera(nm, env)
            sigma = plan.noise * float(clean.intensities.max())
            images.append(render_camera(nm, env, sigma, int(s), shot=i, nonce=nonce))
    else:
        raise InvalidParams(f"unknown acquisition mode {plan.mode!r}")

    dx, dy = plan.misalignment
    if dx or dy:
        images = [SurfaceImage(np.clip(shift_image(im.intensities, dx, dy), 0, None), im.meta)
                  for im in images]
    return CaptureSet(
        images=tuple(images),
        marker_state="tampered" if plan.tamper_markers else "intact",
        misalignment=(dx, dy),
        environments=envs,
        nonce=nonce,
    )
