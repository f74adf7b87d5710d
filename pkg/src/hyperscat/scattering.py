"""Two-layer windowed scattering transform with a Morlet/Gaussian filter bank.

Filters are built directly in the Fourier domain on the periodic DFT grid, so
every convolution is a pointwise product between FFTs.  Nothing here is part
of the gradient graph: scattering coefficients are fixed features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import scipy.fft as sfft


@dataclass(frozen=True)
class MorletParams:
    """Shape parameters of the mother wavelet and low-pass.

    ``slant`` defaults to 4/L and ``phi_sigma`` to 0.8 * 2**(J-1), the usual
    Kymatio conventions.
    """

    xi: float = 3 * np.pi / 4
    sigma: float = 0.8
    slant: Optional[float] = None
    phi_sigma: Optional[float] = None
    n_aliases: int = 2


class Path(NamedTuple):
    order: int
    j1: Optional[int] = None
    q1: Optional[int] = None
    j2: Optional[int] = None
    q2: Optional[int] = None


def scattering_paths(J: int, L: int) -> list[Path]:
    """Path descriptors in output order: order 0, then (j, q), then (j, q, j', q') with j < j'."""
    paths = [Path(0)]
    paths += [Path(1, j, q) for j in range(J) for q in range(L)]
    paths += [
        Path(2, j1, q1, j2, q2)
        for j1 in range(J)
        for q1 in range(L)
        for j2 in range(j1 + 1, J)
        for q2 in range(L)
    ]
    return paths


def path_count(J: int, L: int) -> int:
    return 1 + J * L + L * L * J * (J - 1) // 2


@dataclass
class FilterBank:
    J: int
    L: int
    size: tuple[int, int]
    psi_hat: np.ndarray  # (J, L, H, W), real-valued Fourier multipliers
    phi_hat: np.ndarray  # (H, W)
    params: MorletParams = field(default_factory=MorletParams)

    @property
    def n_filters(self) -> int:
        return self.J * self.L + 1

    def scaled(self, factor: float) -> "FilterBank":
        return FilterBank(self.J, self.L, self.size, self.psi_hat * factor,
                          self.phi_hat * factor, self.params)


def _frequency_grid(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    wy = 2 * np.pi * np.fft.fftfreq(H)
    wx = 2 * np.pi * np.fft.fftfreq(W)
    return np.meshgrid(wy, wx, indexing="ij")


def _gaussian_hat(wy, wx, sigma: float, theta: float, slant: float, center=(0.0, 0.0)):
    """Fourier transform of a unit-integral anisotropic Gaussian shifted to ``center``."""
    dy, dx = wy - center[0], wx - center[1]
    # rotate frequencies into the filter frame
    u = np.cos(theta) * dy + np.sin(theta) * dx
    v = -np.sin(theta) * dy + np.cos(theta) * dx
    return np.exp(-0.5 * sigma**2 * (u * u + v * v / slant**2))


def _periodized(fn, wy, wx, n_aliases: int) -> np.ndarray:
    total = np.zeros_like(wy)
    for ky in range(-n_aliases, n_aliases + 1):
        for kx in range(-n_aliases, n_aliases + 1):
            total += fn(wy + 2 * np.pi * ky, wx + 2 * np.pi * kx)
    return total


def morlet_hat(H: int, W: int, sigma: float, theta: float, xi: float, slant: float,
               n_aliases: int = 2) -> np.ndarray:
    """Periodized Fourier-domain Morlet: Gabor minus a Gaussian that cancels the DC term."""
    wy, wx = _frequency_grid(H, W)
    center = (xi * np.cos(theta), xi * np.sin(theta))
    gabor = _periodized(lambda a, b: _gaussian_hat(a, b, sigma, theta, slant, center),
                        wy, wx, n_aliases)
    envelope = _periodized(lambda a, b: _gaussian_hat(a, b, sigma, theta, slant),
                           wy, wx, n_aliases)
    beta = gabor[0, 0] / envelope[0, 0]
    psi = gabor - beta * envelope
    psi[0, 0] = 0.0  # removes the ~1e-17 rounding residue
    return psi


def _mirror(arr: np.ndarray) -> np.ndarray:
    """arr evaluated at -omega on the DFT grid."""
    return np.roll(arr[..., ::-1, ::-1], 1, axis=(-2, -1))


def _lp_sum(psi_hat: np.ndarray, phi_hat: np.ndarray) -> np.ndarray:
    psi2 = np.abs(psi_hat) ** 2
    return np.abs(phi_hat) ** 2 + 0.5 * (psi2 + _mirror(psi2)).sum(axis=(0, 1))


def build_filter_bank(J: int, L: int, size: tuple[int, int],
                      params: MorletParams = MorletParams()) -> FilterBank:
    """Morlet bank dilated by 2**j and rotated by q*pi/L, rescaled so the
    Littlewood-Paley sum never exceeds one."""
    if J < 1 or L < 1:
        raise ValueError(f"J and L must be >= 1, got J={J}, L={L}")
    H, W = size
    step = 2**J
    if H % step or W % step:
        raise ValueError(f"size {size} is not divisible by 2**J = {step}")

    slant = params.slant if params.slant is not None else 4.0 / L
    phi_sigma = params.phi_sigma if params.phi_sigma is not None else params.sigma * 2 ** (J - 1)
    psi_hat = np.empty((J, L, H, W))
    for j in range(J):
        for q in range(L):
            psi_hat[j, q] = morlet_hat(H, W, params.sigma * 2**j, q * np.pi / L,
                                       params.xi / 2**j, slant, params.n_aliases)
    wy, wx = _frequency_grid(H, W)
    phi_hat = _periodized(lambda a, b: _gaussian_hat(a, b, phi_sigma, 0.0, 1.0),
                          wy, wx, params.n_aliases)

    norm = np.sqrt(_lp_sum(psi_hat, phi_hat).max())
    return FilterBank(J, L, (H, W), psi_hat / norm, phi_hat / norm, params)


def littlewood_paley(bank: FilterBank) -> dict[str, float]:
    lp = _lp_sum(bank.psi_hat, bank.phi_hat)
    return {"min": float(lp.min()), "max": float(lp.max())}


@dataclass
class ScatteringCoeffs:
    """Coefficient maps, channel-major: rows c*P .. (c+1)*P-1 belong to input channel c."""

    maps: np.ndarray  # (source_channels * n_paths, H / 2**J, W / 2**J)
    paths: list[Path]
    source_channels: int

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    def per_channel(self) -> np.ndarray:
        return self.maps.reshape(self.source_channels, self.n_paths, *self.maps.shape[1:])


def _lowpass_decimate(fourier: np.ndarray, phi: np.ndarray, s: int) -> np.ndarray:
    """Real part of ifft2(fourier * phi) sampled every s pixels.

    Decimating a signal is the same as the small inverse DFT of its spectrum
    folded onto the coarse grid, so only an (H/s, W/s) transform is needed.
    """
    H, W = phi.shape
    prod = fourier * phi
    folded = prod.reshape(*prod.shape[:-2], s, H // s, s, W // s).sum(axis=(-4, -2))
    return sfft.ifft2(folded, overwrite_x=True).real / (s * s)


def _scatter_stack(X: np.ndarray, bank: FilterBank) -> np.ndarray:
    """(C, H, W) -> (C, n_paths, H/2**J, W/2**J)."""
    J, L = bank.J, bank.L
    s = 2**J
    psi, phi = bank.psi_hat, bank.phi_hat
    C, H, W = X.shape
    hs, ws = H // s, W // s

    Xf = sfft.fft2(X)
    out = [_lowpass_decimate(Xf, phi, s)[:, None]]
    U1 = np.abs(sfft.ifft2(Xf[:, None, None] * psi[None], overwrite_x=True))  # (C, J, L, H, W)
    U1f = sfft.fft2(U1)
    out.append(_lowpass_decimate(U1f, phi, s).reshape(C, J * L, hs, ws))
    for j1 in range(J - 1):
        for q1 in range(L):
            U2 = np.abs(sfft.ifft2(U1f[:, j1, q1][:, None, None] * psi[None, j1 + 1:], overwrite_x=True))
            out.append(_lowpass_decimate(sfft.fft2(U2), phi, s).reshape(C, -1, hs, ws))
    return np.concatenate(out, axis=1)


def scatter2d(x: np.ndarray, bank: FilterBank) -> ScatteringCoeffs:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"scatter2d expects a single-channel image, got shape {x.shape}")
    return scatter_multichannel(x[None], bank)


def scatter_multichannel(x: np.ndarray, bank: FilterBank) -> ScatteringCoeffs:
    """Scatter each channel of a (C, H, W) stack independently and concatenate."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"scatter_multichannel expects (C, H, W), got shape {x.shape}")
    if tuple(x.shape[1:]) != tuple(bank.size):
        raise ValueError(f"image size {x.shape[1:]} does not match filter bank size {bank.size}")
    maps = _scatter_stack(x, bank)
    C, P = maps.shape[:2]
    return ScatteringCoeffs(maps.reshape(C * P, *maps.shape[2:]),
                            scattering_paths(bank.J, bank.L), C)


def filter_images(bank: FilterBank) -> dict[str, np.ndarray]:
    """Spatial and frequency magnitudes of each filter, zero frequency/offset centred."""
    images = {}
    for j in range(bank.J):
        for q in range(bank.L):
            f = bank.psi_hat[j, q]
            images[f"psi_j{j}_q{q}"] = np.stack([
                np.fft.fftshift(np.abs(np.fft.ifft2(f))),
                np.fft.fftshift(np.abs(f)),
            ])
    images["phi"] = np.stack([
        np.fft.fftshift(np.abs(np.fft.ifft2(bank.phi_hat))),
        np.fft.fftshift(np.abs(bank.phi_hat)),
    ])
    return images
