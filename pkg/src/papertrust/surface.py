"""Synthetic paper micro-surfaces and physical degradation of them.

A surface is represented by its norm map: one unit normal per pixel.  The
tangential components (n_x, n_y) are drawn as smoothed Gaussian noise, so
nearby pixels are correlated and pixels a few correlation lengths apart are
essentially independent.  n_z completes the unit vector.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import InvalidParams

NMAP_MAGIC = b"NMAP"
NMAP_VERSION = 1
_HEADER = struct.Struct("<4sHII2x")  # 16 bytes

# tangential magnitude is clamped here so that n_z stays strictly positive
MAX_TANGENTIAL = 0.999


@dataclass(frozen=True, eq=False)
class NormMap:
    normals: np.ndarray  # (height, width, 3), float64

    def __post_init__(self):
        n = np.asarray(self.normals, dtype=np.float64)
        if n.ndim != 3 or n.shape[2] != 3 or n.shape[0] == 0 or n.shape[1] == 0:
            raise InvalidParams(f"normals must have shape (H, W, 3), got {n.shape}")
        n = n.copy()
        n.setflags(write=False)
        object.__setattr__(self, "normals", n)

    @property
    def height(self) -> int:
        return self.normals.shape[0]

    @property
    def width(self) -> int:
        return self.normals.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.normals.shape[:2]

    @property
    def nx(self) -> np.ndarray:
        return self.normals[..., 0]

    @property
    def ny(self) -> np.ndarray:
        return self.normals[..., 1]

    @property
    def nz(self) -> np.ndarray:
        return self.normals[..., 2]

    def __eq__(self, other):
        if not isinstance(other, NormMap):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.normals, other.normals)

    __hash__ = None

    def check_invariants(self, tol: float = 1e-9) -> bool:
        norms = np.einsum("ijk,ijk->ij", self.normals, self.normals)
        return bool(np.all(np.abs(norms - 1.0) <= tol) and np.all(self.nz > 0))

    @classmethod
    def from_tangential(cls, nx: np.ndarray, ny: np.ndarray) -> "NormMap":
        """Build a valid norm map from tangential components, clamping if needed."""
        nx = np.asarray(nx, dtype=np.float64)
        ny = np.asarray(ny, dtype=np.float64)
        mag = np.hypot(nx, ny)
        over = mag >= 1.0
        if np.any(over):
            scale = np.where(over, MAX_TANGENTIAL / np.where(over, mag, 1.0), 1.0)
            nx = nx * scale
            ny = ny * scale
        nz = np.sqrt(1.0 - nx * nx - ny * ny)
        return cls(np.stack([nx, ny, nz], axis=-1))

    @classmethod
    def flat(cls, width: int, height: int) -> "NormMap":
        n = np.zeros((height, width, 3))
        n[..., 2] = 1.0
        return cls(n)

    # serialization ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(NMAP_MAGIC, NMAP_VERSION, self.width, self.height)
        return header + self.normals.astype("<f4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> "NormMap":
        if len(data) < _HEADER.size:
            raise InvalidParams("truncated norm map container")
        magic, version, width, height = _HEADER.unpack_from(data)
        if magic != NMAP_MAGIC or version != NMAP_VERSION:
            raise InvalidParams(f"not a norm map container (magic={magic!r}, version={version})")
        body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
        if body.size != width * height * 3:
            raise InvalidParams("norm map body size does not match header")
        n = body.reshape(height, width, 3).astype(np.float64)
        # float32 storage loses the unit-norm guarantee; restore it
        return cls.from_tangential(n[..., 0], n[..., 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("row,col,nx,ny,nz\n")
        for (r, c), v in zip(np.ndindex(self.shape), self.normals.reshape(-1, 3)):
            buf.write(f"{r},{c},{float(v[0])!r},{float(v[1])!r},{float(v[2])!r}\n")
        return buf.getvalue()


@dataclass(frozen=True)
class SurfaceParams:
    width: int = 64
    height: int = 64
    correlation_length: float = 3.0
    slope_scale: float = 0.2
    seed: int = 0

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidParams("surface dimensions must be positive")
        if not self.correlation_length >= 1:
            raise InvalidParams("correlation_length must be >= 1 pixel")
        if not 0 <= self.slope_scale < 1:
            raise InvalidParams("slope_scale must lie in [0, 1)")


def _correlated_field(rng: np.random.Generator, shape, correlation_length: float) -> np.ndarray:
    # Smoothing white noise with a Gaussian of std s gives an autocorrelation
    # exp(-d^2 / (4 s^2)); s = L/2 makes it fall to 1/e at distance L.
    sigma = correlation_length / 2.0
    white = rng.standard_normal(shape)
    field = ndimage.gaussian_filter(white, sigma=sigma, mode="wrap")
    field -= field.mean()
    return field


def generate_surface(params: SurfaceParams) -> NormMap:
    params.validate()
    shape = (params.height, params.width)
    if params.slope_scale == 0:
        return NormMap.flat(params.width, params.height)
    rng = np.random.default_rng(params.seed)
    fx = _correlated_field(rng, shape, params.correlation_length)
    fy = _correlated_field(rng, shape, params.correlation_length)
    peak = np.hypot(fx, fy).max()
    if peak == 0:
        return NormMap.flat(params.width, params.height)
    scale = params.slope_scale / peak
    return NormMap.from_tangential(fx * scale, fy * scale)


# degradation --------------------------------------------------------------

DEGRADATION_KINDS = ("crumple", "wet", "scribble", "tear")

# widest smoothing kernel (std, pixels) applied by a fully wet patch
WET_MAX_SIGMA = 3.0


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    severity: float
    region: Optional[Tuple[int, int, int, int]] = None  # (row0, col0, row1, col1), half-open
    seed: int = 0

    def validate(self, shape):
        if self.kind not in DEGRADATION_KINDS:
            raise InvalidParams(f"unknown degradation kind {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise InvalidParams("severity must lie in [0, 1]")
        if self.region is not None:
            r0, c0, r1, c1 = self.region
            h, w = shape
            if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
                raise InvalidParams(f"region {self.region} outside a {h}x{w} map")


def _region_slices(spec: DegradationSpec, shape):
    if spec.region is None:
        return slice(0, shape[0]), slice(0, shape[1])
    r0, c0, r1, c1 = spec.region
    return slice(r0, r1), slice(c0, c1)


def degrade_surface(nm: NormMap, spec: DegradationSpec) -> NormMap:
    """Apply a stylized physical attack; the input map is never modified."""
    spec.validate(nm.shape)
    if spec.severity == 0:
        return NormMap(nm.normals)

    rng = np.random.default_rng(spec.seed)
    rs, cs = _region_slices(spec, nm.shape)
    nx = nm.nx.copy()
    ny = nm.ny.copy()

    if spec.kind == "crumple":
        # creases: broad, strong slope field over the region
        h = rs.stop - rs.start
        w = cs.stop - cs.start
        corr = max(4.0, min(h, w) / 4.0)
        px = _correlated_field(rng, (h, w), corr)
        py = _correlated_field(rng, (h, w), corr)
        peak = max(np.hypot(px, py).max(), 1e-12)
        amp = 0.5 * spec.severity / peak
        nx[rs, cs] += amp * px
        ny[rs, cs] += amp * py
    elif spec.kind == "wet":
        sigma = WET_MAX_SIGMA * spec.severity
        nx[rs, cs] = ndimage.gaussian_filter(nx[rs, cs], sigma=sigma, mode="wrap")
        ny[rs, cs] = ndimage.gaussian_filter(ny[rs, cs], sigma=sigma, mode="wrap")
    elif spec.kind == "scribble":
        h = rs.stop - rs.start
        w = cs.stop - cs.start
        params = SurfaceParams(width=w, height=h, correlation_length=3.0, slope_scale=0.2,
                               seed=int(rng.integers(2**63)))
        ink = generate_surface(params)
        s = spec.severity
        nx[rs, cs] = (1 - s) * nx[rs, cs] + s * ink.nx
        ny[rs, cs] = (1 - s) * ny[rs, cs] + s * ink.ny
    elif spec.kind == "tear":
        # a severity fraction of the region is destroyed (flattened)
        destroyed = rng.random(nx[rs, cs].shape) < spec.severity
        nx[rs, cs] = np.where(destroyed, 0.0, nx[rs, cs])
        ny[rs, cs] = np.where(destroyed, 0.0, ny[rs, cs])

    return NormMap.from_tangential(nx, ny)
