"""Preprocessing, norm-map estimation and binarization into PUF responses."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .errors import (AlignmentFailed, EmptyCapture, InvalidConfig, InvalidParams,
                     SingularSystem, WrongImageCount)
from .optics import (SCANNER_ORIENTATIONS, CaptureSet, EnvironmentModel, SurfaceImage,
                     light_vectors, shift_image)
from .surface import NormMap

# relative singular-value floor below which a per-pixel light system is rank deficient
RANK_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PufResponse:
    bits: np.ndarray
    origin: Tuple[int, int] = (0, 0)  # (surface k, trial t)

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 1 or b.size == 0:
            raise InvalidParams("a response is a non-empty bit vector")
        if not np.all((b == 0) | (b == 1)):
            raise InvalidParams("response bits must be 0 or 1")
        b = b.astype(np.uint8).copy()
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def length(self) -> int:
        return self.bits.size

    @property
    def degenerate(self) -> bool:
        """True when every bit is equal, i.e. the response carries no information."""
        return bool(self.bits.min() == self.bits.max())

    def __eq__(self, other):
        if not isinstance(other, PufResponse):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    __hash__ = None

    def __invert__(self) -> "PufResponse":
        return PufResponse(1 - self.bits, self.origin)

    def to_hex(self) -> str:
        return f"L={self.length}:{np.packbits(self.bits).tobytes().hex()}"

    @classmethod
    def from_hex(cls, text: str, origin=(0, 0)) -> "PufResponse":
        head, _, body = text.partition(":")
        if not head.startswith("L="):
            raise InvalidParams("response hex must start with 'L=<length>:'")
        length = int(head[2:])
        packed = np.frombuffer(bytes.fromhex(body), dtype=np.uint8)
        bits = np.unpackbits(packed)
        if bits.size < length or np.any(bits[length:]):
            raise InvalidParams("hex body does not match declared length")
        return cls(bits[:length], origin)

    def canonical_bytes(self) -> bytes:
        return self.to_hex().encode("ascii")


@dataclass(frozen=True)
class QuantizerConfig:
    scheme: str = "sign"  # "sign" | "median"
    components: Tuple[str, ...] = ("nx", "ny")
    downsample_stride: int = 2

    def validate(self):
        if self.scheme not in ("sign", "median"):
            raise InvalidConfig(f"unknown quantization scheme {self.scheme!r}")
        if not self.components or any(c not in ("nx", "ny") for c in self.components):
            raise InvalidConfig("components must be a non-empty subset of {nx, ny}")
        if len(set(self.components)) != len(self.components):
            raise InvalidConfig("components must not repeat")
        if self.downsample_stride < 1:
            raise InvalidConfig("downsample_stride must be >= 1")

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "components": list(self.components),
                "downsample_stride": self.downsample_stride}


# preprocessing (f) ---------------------------------------------------------

def preprocess(captures: CaptureSet) -> CaptureSet:
    """Geometric registration: undo the recorded misalignment of every image."""
    if not captures.images:
        raise EmptyCapture("capture set holds no images")
    if captures.marker_state == "tampered":
        raise AlignmentFailed("registration markers are tampered; cannot align")
    dx, dy = captures.misalignment
    if dx == 0 and dy == 0:
        return captures
    images = tuple(
        SurfaceImage(np.clip(shift_image(im.intensities, -dx, -dy), 0, None), im.meta)
        for im in captures.images
    )
    return replace(captures, images=images, misalignment=(0.0, 0.0))


# feature extraction (phi) -------------------------------------------------------

def _by_orientation(captures: CaptureSet):
    if len(captures.images) != 4:
        raise WrongImageCount(f"scanner estimation needs 4 images, got {len(captures.images)}")
    found = {}
    for i, im in enumerate(captures.images):
        if im.meta.mode != "scanner" or im.meta.orientation not in SCANNER_ORIENTATIONS:
            raise WrongImageCount("scanner estimation needs images at 0/90/180/270 degrees")
        found[im.meta.orientation] = i
    if len(found) != 4:
        raise WrongImageCount("scanner orientations must be distinct")
    return found


def estimate_norm_map_scanner(captures: CaptureSet,
                              env: Optional[EnvironmentModel] = None) -> NormMap:
    """Scanner branch of feature extraction.

    Opposite scans cancel the ambient term and isolate one tangential
    component each: I0 - I180 tracks n_y, I90 - I270 tracks n_x.  With a known
    environment (passed explicitly or carried by the capture set) the
    differences are divided by the calibration gain; otherwise they are
    treated as surface gradients normalized to unit RMS slope.
    """
    captures = preprocess(captures)
    idx = _by_orientation(captures)
    img = {o: captures.images[i].intensities for o, i in idx.items()}
    dy = img[0] - img[180]
    dx = img[90] - img[270]

    if env is None and captures.environments:
        env = captures.environments[idx[0]]
    if env is not None:
        scale = env.scanner_scale()
        return NormMap.from_tangential(dx / scale, dy / scale)

    rms = np.sqrt(np.mean(dx * dx + dy * dy))
    if rms == 0:
        return NormMap.flat(captures.images[0].width, captures.images[0].height)
    gx, gy = dx / rms, dy / rms
    norm = np.sqrt(1.0 + gx * gx + gy * gy)
    return NormMap(np.stack([gx / norm, gy / norm, 1.0 / norm], axis=-1))


def _camera_system(captures: CaptureSet):
    h, w = captures.images[0].height, captures.images[0].width
    rows, rhs = [], []
    for im, env in zip(captures.images, captures.environments):
        v = light_vectors(env, h, w)
        dist = np.linalg.norm(v, axis=-1, keepdims=True)
        rows.append(env.source_intensity * v / dist**3)
        rhs.append(im.intensities - env.ambient)
    a = np.stack(rows, axis=-2)  # (H, W, n_images, 3)
    b = np.stack(rhs, axis=-1)   # (H, W, n_images)
    return a, b


@dataclass(frozen=True, eq=False)
class CameraEstimate:
    norm_map: NormMap
    scaled_normal: np.ndarray  # albedo * n per pixel, (H, W, 3)
    residual: np.ndarray       # per-pixel least-squares residual norm


def solve_camera(captures: CaptureSet) -> CameraEstimate:
    """Per-pixel least squares for albedo * n from >= 4 point-light shots."""
    captures = preprocess(captures)
    if len(captures.images) < 4:
        raise WrongImageCount(f"camera estimation needs >= 4 images, got {len(captures.images)}")
    if len(captures.environments) != len(captures.images):
        raise InvalidParams("camera estimation needs one known environment per image")
    a, b = _camera_system(captures)

    # SVD of each per-pixel system: the rank check and the solve share it
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if np.any(s[..., -1] <= RANK_TOL * s[..., 0]):
        raise SingularSystem("light directions are rank deficient (e.g. collinear lights)")
    utb = np.einsum("...ki,...k->...i", u, b)
    g = np.einsum("...ij,...i->...j", vt, utb / s)
    residual = np.linalg.norm(np.einsum("...ij,...j->...i", a, g) - b, axis=-1)

    length = np.linalg.norm(g, axis=-1, keepdims=True)
    if np.any(length == 0):
        raise SingularSystem("zero intensity at some pixel; normal undefined")
    n = g / length
    return CameraEstimate(NormMap.from_tangential(n[..., 0], n[..., 1]), g, residual)


def estimate_norm_map_camera(captures: CaptureSet) -> NormMap:
    return solve_camera(captures).norm_map


def estimate_norm_map(captures: CaptureSet, env: Optional[EnvironmentModel] = None) -> NormMap:
    """Dispatch on acquisition mode."""
    if not captures.images:
        raise EmptyCapture("capture set holds no images")
    if captures.mode == "scanner":
        return estimate_norm_map_scanner(captures, env)
    return estimate_norm_map_camera(captures)


# quantization ----------------------------------------------------------------

def _block_mean(a: np.ndarray, stride: int) -> np.ndarray:
    h, w = a.shape
    return a.reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3))


def quantize(nm: NormMap, cfg: QuantizerConfig = QuantizerConfig(), origin=(0, 0)) -> PufResponse:
    cfg.validate()
    st = cfg.downsample_stride
    if nm.height % st or nm.width % st:
        raise InvalidConfig(f"stride {st} does not divide a {nm.height}x{nm.width} map")
    planes = []
    for comp in cfg.components:
        field = _block_mean(nm.nx if comp == "nx" else nm.ny, st)
        thresh = 0.0 if cfg.scheme == "sign" else float(np.median(field))
        planes.append((field > thresh).ravel())  # ties -> 0
    bits = np.stack(planes, axis=-1).ravel()  # interleave components per cell
    return PufResponse(bits.astype(np.uint8), origin)


def response_length(width: int, height: int, cfg: QuantizerConfig) -> int:
    st = cfg.downsample_stride
    return len(cfg.components) * (width // st) * (height // st)


@dataclass(frozen=True)
class Pipeline:
    """The composed map capture set -> response, i.e. quantize(phi(f(x))).

    ``environments`` is the verifier's own calibration; when set it replaces
    whatever environment metadata arrives with the captures.
    """
    quantizer: QuantizerConfig = QuantizerConfig()
    environments: Tuple[EnvironmentModel, ...] = ()

    def norm_map(self, captures: CaptureSet) -> NormMap:
        if self.environments:
            captures = replace(captures, environments=tuple(self.environments))
        return estimate_norm_map(captures)

    def response(self, captures: CaptureSet, origin=(0, 0)) -> PufResponse:
        return quantize(self.norm_map(captures), self.quantizer, origin)
