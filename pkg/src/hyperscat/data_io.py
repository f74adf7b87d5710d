"""Cube container format, mask files, MSI projection and a synthetic scene generator.

A cube file is ``b"HSC1"``, a little-endian uint32 header length, a JSON
header with sorted keys, then float32 little-endian values stored band-major
and row-major within each band.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

CUBE_MAGIC = b"HSC1"
N_BANDS = 61
WAVELENGTHS = 400.0 + 10.0 * np.arange(N_BANDS)
SRF_CENTERS = (620.0, 540.0, 460.0, 850.0)  # R, G, B, NIR
SRF_SIGMA = 40.0


class CubeFormatError(ValueError):
    pass


class BadMagicError(CubeFormatError):
    pass


class TruncatedPayloadError(CubeFormatError):
    pass


class HeaderMismatchError(CubeFormatError):
    pass


@dataclass
class SpectralCube:
    """H x W x B values with one wavelength (or label) per band."""

    values: np.ndarray
    wavelengths: np.ndarray = field(default_factory=lambda: WAVELENGTHS.copy())
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"cube values must be H x W x B, got shape {self.values.shape}")
        if self.wavelengths.shape != (self.values.shape[2],):
            raise ValueError(
                f"{self.wavelengths.size} wavelengths for {self.values.shape[2]} bands"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def bands_first(self) -> np.ndarray:
        return np.ascontiguousarray(self.values.transpose(2, 0, 1))

    @classmethod
    def from_bands_first(cls, stack: np.ndarray, wavelengths=None, metadata=None) -> "SpectralCube":
        wl = WAVELENGTHS if wavelengths is None else wavelengths
        return cls(np.asarray(stack).transpose(1, 2, 0), wl, dict(metadata or {}))


@dataclass
class MsiImage:
    """H x W x 4 stack ordered R, G, B, NIR."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != 4:
            raise ValueError(f"MSI must be H x W x 4, got shape {self.values.shape}")

    def bands_first(self) -> np.ndarray:
        return np.ascontiguousarray(self.values.transpose(2, 0, 1))


def write_cube(cube: SpectralCube, path) -> None:
    """Write ``cube``; values are stored as float32."""
    h, w, b = cube.values.shape
    payload = np.ascontiguousarray(cube.values.transpose(2, 0, 1), dtype="<f4")
    header = {
        "height": h,
        "width": w,
        "bands": b,
        "wavelengths": [float(x) for x in cube.wavelengths],
        "value_range": [float(payload.min()), float(payload.max())] if payload.size else [0.0, 0.0],
        "metadata": cube.metadata,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())


def read_cube(path, clamp: bool = True) -> SpectralCube:
    """Read a cube file; reflectance values are clamped to [0, 1] unless ``clamp`` is False."""
    raw = Path(path).read_bytes()
    if raw[:4] != CUBE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{path}: file ends inside the header length field")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + n:
        raise TruncatedPayloadError(f"{path}: file ends inside the header")
    try:
        header = json.loads(raw[8:8 + n])
        h, w, b = int(header["height"]), int(header["width"]), int(header["bands"])
        wavelengths = header["wavelengths"]
    except (ValueError, KeyError, TypeError) as exc:
        raise HeaderMismatchError(f"{path}: malformed header ({exc})") from exc
    if len(wavelengths) != b:
        raise HeaderMismatchError(f"{path}: {len(wavelengths)} wavelengths for {b} bands")
    expected = h * w * b * 4
    got = len(raw) - 8 - n
    if got < expected:
        raise TruncatedPayloadError(f"{path}: payload has {got} bytes, expected {expected}")
    if got > expected:
        raise HeaderMismatchError(f"{path}: payload has {got} bytes, header implies {expected}")
    values = np.frombuffer(raw[8 + n:], dtype="<f4").astype(np.float64).reshape(b, h, w)
    if not np.all(np.isfinite(values)):
        raise CubeFormatError(f"{path}: non-finite values in payload")
    if clamp:
        values = np.clip(values, 0.0, 1.0)
    return SpectralCube(values.transpose(1, 2, 0), np.asarray(wavelengths), header.get("metadata", {}))


def write_mask(mask: np.ndarray, path, metadata: Optional[dict] = None) -> None:
    mask = np.asarray(mask, dtype=bool)
    write_cube(SpectralCube(mask[:, :, None].astype(np.float64), [0.0],
                            {"kind": "mask", **(metadata or {})}), path)


def read_mask(path) -> np.ndarray:
    cube = read_cube(path)
    if cube.values.shape[2] != 1:
        raise HeaderMismatchError(f"{path}: mask file must have 1 band, found {cube.values.shape[2]}")
    return cube.values[:, :, 0] > 0.5


def write_msi(msi: MsiImage, path, metadata: Optional[dict] = None) -> None:
    write_cube(SpectralCube(msi.values, SRF_CENTERS, {"kind": "msi", **(metadata or {})}), path)


def read_msi(path) -> MsiImage:
    cube = read_cube(path)
    if cube.values.shape[2] != 4:
        raise HeaderMismatchError(f"{path}: MSI file must have 4 bands, found {cube.values.shape[2]}")
    return MsiImage(cube.values)


def spectral_response(centers=SRF_CENTERS, sigma: float = SRF_SIGMA,
                      wavelengths=WAVELENGTHS) -> np.ndarray:
    """(4, B) Gaussian response weights, each row summing to one."""
    wl = np.asarray(wavelengths, dtype=np.float64)
    resp = np.exp(-0.5 * ((wl[None, :] - np.asarray(centers)[:, None]) / sigma) ** 2)
    return resp / resp.sum(axis=1, keepdims=True)


def msi_from_cube(cube: SpectralCube, centers=SRF_CENTERS, sigma: float = SRF_SIGMA) -> MsiImage:
    if cube.values.shape[2] != N_BANDS:
        raise ValueError(f"expected a {N_BANDS}-band cube, got {cube.values.shape[2]} bands")
    return MsiImage(cube.values @ spectral_response(centers, sigma, cube.wavelengths).T)


@dataclass(frozen=True)
class SyntheticParams:
    family_seed: int = 1234
    n_basis: int = 3
    skin_range: tuple[float, float] = (0.12, 0.75)
    background_range: tuple[float, float] = (0.03, 0.9)
    axis_range: tuple[float, float] = (0.28, 0.42)
    center_jitter: float = 0.08
    brightness_noise: float = 0.02
    band_noise: float = 0.003


@dataclass
class SyntheticScene:
    cube: SpectralCube
    msi: MsiImage
    mask: np.ndarray
    seed: int
    params: SyntheticParams


def _basis_spectra(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    """n smooth spectra, each a constant plus at most five wavelength Gaussians, scaled into [lo, hi]."""
    out = np.empty((n, N_BANDS))
    for i in range(n):
        k = rng.integers(2, 6)
        s = np.full(N_BANDS, rng.uniform(0.2, 1.0))
        for _ in range(k):
            mu = rng.uniform(380.0, 1020.0)
            width = rng.uniform(40.0, 160.0)
            s += rng.uniform(-0.6, 1.0) * np.exp(-0.5 * ((WAVELENGTHS - mu) / width) ** 2)
        s = (s - s.min()) / max(np.ptp(s), 1e-12)
        top = rng.uniform(lo + 0.6 * (hi - lo), hi)
        bottom = rng.uniform(lo, lo + 0.25 * (hi - lo))
        out[i] = bottom + (top - bottom) * s
    return out


def spectral_families(params: SyntheticParams = SyntheticParams()) -> tuple[np.ndarray, np.ndarray]:
    """(skin basis, background basis), each (n_basis, 61); fixed by ``params.family_seed``."""
    rng = np.random.default_rng(params.family_seed)
    skin = _basis_spectra(rng, params.n_basis, *params.skin_range)
    background = _basis_spectra(rng, params.n_basis, *params.background_range)
    return skin, background


def _smooth_weights(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    """(size, size, n) convex weights varying smoothly in space."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    logits = np.zeros((size, size, n))
    for i in range(n):
        for _ in range(3):
            fy, fx = rng.uniform(-2.5, 2.5, size=2)
            logits[:, :, i] += rng.uniform(0.5, 1.5) * np.cos(
                2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi)
            )
    w = np.exp(logits - logits.max(axis=2, keepdims=True))
    return w / w.sum(axis=2, keepdims=True)


def _ellipse_mask(rng: np.random.Generator, size: int, params: SyntheticParams) -> np.ndarray:
    cy, cx = (0.5 + rng.uniform(-params.center_jitter, params.center_jitter, size=2)) * size
    a, b = rng.uniform(*params.axis_range, size=2) * size
    angle = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    u = np.cos(angle) * dy + np.sin(angle) * dx
    v = -np.sin(angle) * dy + np.cos(angle) * dx
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def make_scene(seed: int, size: int, params: SyntheticParams = SyntheticParams()) -> SyntheticScene:
    if size <= 0 or size % 4:
        raise ValueError(f"scene size must be a positive multiple of 4, got {size}")
    skin_basis, bg_basis = spectral_families(params)
    rng = np.random.default_rng(seed)
    mask = _ellipse_mask(rng, size, params)
    skin = _smooth_weights(rng, params.n_basis, size) @ skin_basis
    background = _smooth_weights(rng, params.n_basis, size) @ bg_basis
    values = np.where(mask[:, :, None], skin, background)
    values = values * (1.0 + params.brightness_noise * rng.standard_normal((size, size, 1)))
    values = values + params.band_noise * rng.standard_normal(values.shape)
    values = np.clip(values, 0.0, 1.0)
    cube = SpectralCube(values, WAVELENGTHS.copy(), {"generator": "synthetic", "seed": int(seed)})
    return SyntheticScene(cube, msi_from_cube(cube), mask, int(seed), params)


def gen_synthetic(count: int, size: int, seed: int,
                  params: SyntheticParams = SyntheticParams()) -> list[SyntheticScene]:
    """``count`` scenes; scene i is generated from seed ``seed + i``."""
    if size <= 0 or size % 4:
        raise ValueError(f"scene size must be a positive multiple of 4, got {size}")
    return [make_scene(seed + i, size, params) for i in range(count)]
