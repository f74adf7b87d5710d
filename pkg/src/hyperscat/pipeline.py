"""End-to-end MSI -> HSI reconstruction: band parity split, normalization,
the three training stages, inference and SAM evaluation."""

from __future__ import annotations

import csv
import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .data_io import N_BANDS, SRF_CENTERS, WAVELENGTHS, MsiImage, SpectralCube, SyntheticScene
from .networks import (
    InverseNet,
    MatchingNet,
    MisrNet,
    inverse_forward,
    load_checkpoint,
    matching_forward,
    misr_forward,
    save_checkpoint,
)
from .optim import MISR_EPOCH_CHOICES, TrainConfig, train, write_loss_csv
from .scattering import (
    FilterBank,
    MorletParams,
    ScatteringCoeffs,
    build_filter_bank,
    path_count,
    scatter_multichannel,
)

logger = logging.getLogger(__name__)

# 62 labels over 61 bands: labels 30 and 31 both name the 700 nm band.
N_LABELS = 62
SHARED_BAND = 30


def label_to_band(label: int) -> int:
    if not 0 <= label < N_LABELS:
        raise ValueError(f"label {label} outside 0..{N_LABELS - 1}")
    return label if label <= SHARED_BAND else label - 1


EVEN_BANDS = tuple(label_to_band(k) for k in range(0, N_LABELS, 2))
ODD_BANDS = tuple(label_to_band(k) for k in range(1, N_LABELS, 2))
PARITIES = ("even", "odd")
PARITY_BANDS = {"even": EVEN_BANDS, "odd": ODD_BANDS}


def _as_band_stack(cube) -> np.ndarray:
    if isinstance(cube, SpectralCube):
        return cube.bands_first()
    return np.asarray(cube, dtype=np.float64)


def parity_split(cube) -> tuple[np.ndarray, np.ndarray]:
    """61-band cube (or 61 x H x W stack) -> (even 31 x H x W, odd 31 x H x W)."""
    stack = _as_band_stack(cube)
    if stack.ndim != 3 or stack.shape[0] != N_BANDS:
        raise ValueError(f"parity_split needs {N_BANDS} bands, got stack of shape {stack.shape}")
    return stack[list(EVEN_BANDS)].copy(), stack[list(ODD_BANDS)].copy()


def parity_merge(even: np.ndarray, odd: np.ndarray) -> SpectralCube:
    """Inverse of :func:`parity_split`; the shared 700 nm band is the mean of both copies."""
    even, odd = np.asarray(even, dtype=np.float64), np.asarray(odd, dtype=np.float64)
    n = len(EVEN_BANDS)
    if even.shape != odd.shape or even.ndim != 3 or even.shape[0] != n:
        raise ValueError(f"parity_merge needs two {n} x H x W stacks, got {even.shape} and {odd.shape}")
    out = np.empty((N_BANDS, *even.shape[1:]))
    out[list(EVEN_BANDS)] = even
    out[list(ODD_BANDS)] = odd
    out[SHARED_BAND] = 0.5 * (even[EVEN_BANDS.index(SHARED_BAND)] + odd[ODD_BANDS.index(SHARED_BAND)])
    return SpectralCube.from_bands_first(out)


@dataclass
class NormStats:
    """Per-path coefficient statistics plus the fixed reflectance map [0, 1] -> [-1, 1].

    ``coeff_scale`` divides standardized coefficients before they reach a
    network so that most of them fall inside the tanh output range.
    """

    coeff_mean: dict[str, np.ndarray] = field(default_factory=dict)
    coeff_std: dict[str, np.ndarray] = field(default_factory=dict)
    coeff_scale: float = 3.0
    std_floor: float = 1e-8

    def fitted(self, kind: str) -> bool:
        return kind in self.coeff_mean

    def to_json(self) -> dict:
        return {
            "coeff_mean": {k: v.tolist() for k, v in self.coeff_mean.items()},
            "coeff_std": {k: v.tolist() for k, v in self.coeff_std.items()},
            "coeff_scale": self.coeff_scale,
            "std_floor": self.std_floor,
        }

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(
            {k: np.asarray(v) for k, v in d["coeff_mean"].items()},
            {k: np.asarray(v) for k, v in d["coeff_std"].items()},
            d["coeff_scale"],
            d["std_floor"],
        )


def fit_coeff_stats(stats: NormStats, kind: str, maps: np.ndarray) -> NormStats:
    """Record per-path mean/std of ``maps`` shaped (n_images, n_paths, h, w)."""
    maps = np.asarray(maps)
    stats.coeff_mean[kind] = maps.mean(axis=(0, 2, 3))
    stats.coeff_std[kind] = np.maximum(maps.std(axis=(0, 2, 3)), stats.std_floor)
    return stats


def normalize(data, stats: Optional[NormStats], direction: str = "forward",
              kind: str = "reflectance") -> np.ndarray:
    """Reflectance: x -> 2x - 1.  Coefficients (kind = msi/even/odd): per-path standardization.

    Coefficient arrays are (n_paths, h, w) or (n_images, n_paths, h, w).
    """
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    x = np.asarray(data.values if isinstance(data, SpectralCube) else data, dtype=np.float64)
    if kind == "reflectance":
        return x * 2.0 - 1.0 if direction == "forward" else (x + 1.0) * 0.5
    if stats is None or not stats.fitted(kind):
        raise ValueError(f"normalization statistics for {kind!r} have not been fitted")
    mean, std = stats.coeff_mean[kind], stats.coeff_std[kind]
    shape = (-1, 1, 1)
    if direction == "forward":
        return (x - mean.reshape(shape)) / std.reshape(shape)
    return x * std.reshape(shape) + mean.reshape(shape)


@dataclass
class PipelineConfig:
    J: int = 2
    L: int = 4
    lr: float = 1e-3
    matching_epochs: int = 100
    inverse_epochs: int = 150
    misr_epochs: int = 60
    batch_size: int = 4
    misr_batch_size: int = 256
    seed: int = 0
    matching_hidden: int = 512
    misr_hidden: int = 256
    inverse_widths: tuple[int, int] = (256, 128)
    kernel: int = 3
    coeff_scale: float = 3.0
    threads: int = 1

    def __post_init__(self):
        self.inverse_widths = tuple(self.inverse_widths)
        if self.J != 2:
            # the inverse network undoes exactly two factor-2 decimations
            raise ValueError(f"the reconstruction pipeline needs J=2, got J={self.J}")
        if self.misr_epochs not in MISR_EPOCH_CHOICES + (0,):
            logger.warning("MISR epochs %s differ from the 30/60 recipe", self.misr_epochs)

    def to_json(self) -> dict:
        d = asdict(self)
        d["inverse_widths"] = list(self.inverse_widths)
        return d


@lru_cache(maxsize=8)
def _cached_bank(J: int, L: int, H: int, W: int) -> FilterBank:
    return build_filter_bank(J, L, (H, W), MorletParams())


def bank_for(J: int, L: int, size) -> FilterBank:
    return _cached_bank(J, L, int(size[0]), int(size[1]))


@dataclass
class ModelBundle:
    config: PipelineConfig
    stats: NormStats
    matching: dict[str, MatchingNet]
    inverse: dict[str, InverseNet]
    misr: Optional[MisrNet] = None
    logs: dict[str, list] = field(default_factory=dict)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        seed = self.config.seed
        for p in PARITIES:
            save_checkpoint(self.matching[p], out / f"matching_{p}.ckpt", seed, self.config.matching_epochs)
            save_checkpoint(self.inverse[p], out / f"inverse_{p}.ckpt", seed, self.config.inverse_epochs)
        if self.misr is not None:
            save_checkpoint(self.misr, out / "misr.ckpt", seed, self.config.misr_epochs)
        meta = {"config": self.config.to_json(), "norm_stats": self.stats.to_json()}
        (out / "pipeline.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
        for name, log in self.logs.items():
            write_loss_csv(log, out / f"loss_{name}.csv")

    @classmethod
    def load(cls, model_dir, require_misr: bool = True) -> "ModelBundle":
        d = Path(model_dir)
        meta_path = d / "pipeline.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"{meta_path} not found")
        meta = json.loads(meta_path.read_text())
        config = PipelineConfig(**meta["config"])
        stats = NormStats.from_json(meta["norm_stats"])
        matching, inverse = {}, {}
        for p in PARITIES:
            for kind, store in (("matching", matching), ("inverse", inverse)):
                path = d / f"{kind}_{p}.ckpt"
                if not path.exists():
                    raise FileNotFoundError(f"missing checkpoint {path}")
                store[p] = load_checkpoint(path)[0]
        misr = None
        misr_path = d / "misr.ckpt"
        if misr_path.exists():
            misr = load_checkpoint(misr_path)[0]
        elif require_misr:
            raise FileNotFoundError(f"missing MISR checkpoint {misr_path}")
        return cls(config, stats, matching, inverse, misr)


def _net_space(maps: np.ndarray, stats: NormStats, kind: str) -> np.ndarray:
    return normalize(maps, stats, "forward", kind) / stats.coeff_scale


def _check_size(shape) -> None:
    if shape[0] % 4 or shape[1] % 4:
        raise ValueError(f"image size {tuple(shape[:2])} is not divisible by 4")


def _predict_parities(msi: MsiImage, models: ModelBundle) -> SpectralCube:
    _check_size(msi.values.shape)
    cfg = models.config
    bank = bank_for(cfg.J, cfg.L, msi.values.shape[:2])
    coeffs = scatter_multichannel(msi.bands_first(), bank)
    z = ScatteringCoeffs(_net_space(coeffs.maps, models.stats, "msi"), coeffs.paths, coeffs.source_channels)
    stacks = {}
    for p in PARITIES:
        matched = matching_forward(models.matching[p], z)
        stacks[p] = normalize(inverse_forward(models.inverse[p], matched), None, "inverse")
    return parity_merge(stacks["even"], stacks["odd"])


def _refine(cube: SpectralCube, mask: np.ndarray, misr: MisrNet) -> SpectralCube:
    values = cube.values.copy()
    spectra = normalize(values[mask], None, "forward")
    values[mask] = normalize(misr_forward(misr, spectra), None, "inverse")
    return SpectralCube(values, cube.wavelengths, cube.metadata)


def infer(msi: MsiImage, models: ModelBundle, mask: Optional[np.ndarray] = None,
          use_misr: bool = True) -> SpectralCube:
    """Reconstruct a 61-band cube from an MSI image; MISR touches masked pixels only."""
    cube = _predict_parities(msi, models)
    if use_misr:
        if models.misr is None:
            raise ValueError("use_misr=True but the model bundle has no MISR network")
        if mask is None:
            mask = otsu_mask(msi)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != cube.values.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match image {cube.values.shape[:2]}")
        cube = _refine(cube, mask, models.misr)
    return SpectralCube(np.clip(cube.values, 0.0, 1.0), cube.wavelengths, {"generator": "hyperscat"})


def otsu_mask(msi: MsiImage) -> np.ndarray:
    """Fallback skin mask: NIR channel above its Otsu threshold."""
    from skimage.filters import threshold_otsu

    nir = msi.values[:, :, 3]
    if np.ptp(nir) == 0:
        return np.zeros(nir.shape, dtype=bool)
    return nir > threshold_otsu(nir)


def cubic_baseline(msi: MsiImage) -> SpectralCube:
    """Non-learned reference: cubic interpolation of the four MSI bands over wavelength."""
    order = np.argsort(SRF_CENTERS)
    centers = np.asarray(SRF_CENTERS)[order]
    spline = CubicSpline(centers, msi.values[:, :, order], axis=2, extrapolate=True)
    return SpectralCube(np.clip(spline(WAVELENGTHS), 0.0, 1.0))


# --- SAM evaluation -------------------------------------------------------

def sam(u, v) -> float:
    """Spectral angle in radians between two nonzero spectra."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("SAM is undefined for a zero-norm spectrum")
    return float(np.arccos(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)))


def sam_pixels(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, int]:
    """Row-wise SAM of (N, B) spectra, dropping rows where either norm is zero."""
    npred = np.linalg.norm(pred, axis=1)
    ntruth = np.linalg.norm(truth, axis=1)
    ok = (npred > 0) & (ntruth > 0)
    cos = (pred[ok] * truth[ok]).sum(axis=1) / (npred[ok] * ntruth[ok])
    return np.arccos(np.clip(cos, -1.0, 1.0)), int((~ok).sum())


@dataclass
class ImageScore:
    name: str
    sam: float
    skin_pixels: int
    skipped_zero_norm: int


@dataclass
class EvalReport:
    images: list[ImageScore]
    skipped_images: list[str]

    @property
    def mean(self) -> float:
        return float(np.mean([s.sam for s in self.images])) if self.images else float("nan")

    @property
    def std(self) -> float:
        return float(np.std([s.sam for s in self.images])) if self.images else float("nan")

    def summary(self) -> str:
        return f"{self.mean:.4f} ± {self.std:.4f}"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["image", "sam", "skin_pixels", "skipped_zero_norm"])
            for s in self.images:
                writer.writerow([s.name, repr(s.sam), s.skin_pixels, s.skipped_zero_norm])
            writer.writerow(["mean ± std", self.summary(), "", ""])


def evaluate(preds: Sequence, truths: Sequence, masks: Sequence,
             names: Optional[Sequence[str]] = None) -> EvalReport:
    """Per-image mean skin SAM, then mean and (population) std across images."""
    if not len(preds) == len(truths) == len(masks):
        raise ValueError("evaluate needs equally many predictions, truths and masks")
    names = list(names) if names is not None else [f"image_{i:04d}" for i in range(len(preds))]
    scores, skipped = [], []
    for name, pred, truth, mask in zip(names, preds, truths, masks):
        p = pred.values if isinstance(pred, SpectralCube) else np.asarray(pred)
        t = truth.values if isinstance(truth, SpectralCube) else np.asarray(truth)
        mask = np.asarray(mask, dtype=bool)
        if p.shape != t.shape or mask.shape != p.shape[:2]:
            raise ValueError(f"{name}: shapes disagree (pred {p.shape}, truth {t.shape}, mask {mask.shape})")
        if not mask.any():
            logger.warning("%s: empty mask, image skipped", name)
            skipped.append(name)
            continue
        angles, zero = sam_pixels(p[mask], t[mask])
        if zero:
            logger.warning("%s: %d zero-norm spectra skipped", name, zero)
        if angles.size == 0:
            logger.warning("%s: no valid skin spectra, image skipped", name)
            skipped.append(name)
            continue
        scores.append(ImageScore(name, float(angles.mean()), int(angles.size), zero))
    return EvalReport(scores, skipped)


# --- training ---------------------------------------------------------------

class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _map_parallel(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def scatter_dataset(scenes: Sequence[SyntheticScene], config: PipelineConfig):
    """Scattering maps for MSI and both band sets: three (n, paths, h, w) arrays."""
    size = scenes[0].cube.values.shape[:2]
    _check_size(size)
    bank = bank_for(config.J, config.L, size)

    def one(scene):
        even, odd = parity_split(scene.cube)
        return (scatter_multichannel(scene.msi.bands_first(), bank).maps,
                scatter_multichannel(even, bank).maps,
                scatter_multichannel(odd, bank).maps)

    parts = _map_parallel(one, scenes, config.threads)
    return tuple(np.stack([p[i] for p in parts]) for i in range(3))


def train_all(scenes: Sequence[SyntheticScene], config: PipelineConfig = PipelineConfig(),
              out_dir=None) -> ModelBundle:
    """Train matching (stage 1), inverse (stage 2) and MISR (stage 3) networks."""
    if not scenes:
        raise ValueError("train_all needs at least one training scene")
    n_paths = path_count(config.J, config.L)
    n_par = len(EVEN_BANDS)
    stats = NormStats(coeff_scale=config.coeff_scale)
    logs: dict[str, list] = {}

    try:
        msi_maps, even_maps, odd_maps = scatter_dataset(scenes, config)
        for kind, maps in (("msi", msi_maps), ("even", even_maps), ("odd", odd_maps)):
            fit_coeff_stats(stats, kind, maps)
        z_msi = _net_space(msi_maps, stats, "msi")
        z_par = {"even": _net_space(even_maps, stats, "even"), "odd": _net_space(odd_maps, stats, "odd")}
    except Exception as exc:
        raise StageError("scattering", exc) from exc
    del msi_maps, even_maps, odd_maps

    def run_stage(stage, fn):
        try:
            return dict(zip(PARITIES, _map_parallel(fn, PARITIES, config.threads)))
        except Exception as exc:
            raise StageError(stage, exc) from exc

    def fit_matching(p):
        net = MatchingNet(z_msi.shape[1], n_par * n_paths, config.matching_hidden,
                          seed=derive_seed(config.seed, f"matching_{p}"))
        tc = TrainConfig.for_stage("matching", p, epochs=config.matching_epochs,
                                   batch_size=config.batch_size, lr=config.lr,
                                   seed=derive_seed(config.seed, f"shuffle_matching_{p}"))
        return train(net, (z_msi, z_par[p]), tc)

    def fit_inverse(p):
        targets = np.stack([normalize(parity_split(s.cube)[PARITIES.index(p)], None) for s in scenes])
        net = InverseNet(n_par * n_paths, n_par, config.inverse_widths, config.kernel,
                         seed=derive_seed(config.seed, f"inverse_{p}"),
                         input_size=z_par[p].shape[2:])
        tc = TrainConfig.for_stage("inverse", p, epochs=config.inverse_epochs,
                                   batch_size=config.batch_size, lr=config.lr,
                                   seed=derive_seed(config.seed, f"shuffle_inverse_{p}"))
        return train(net, (z_par[p], targets), tc)

    matched = run_stage("matching", fit_matching)
    inverted = run_stage("inverse", fit_inverse)
    for p in PARITIES:
        logs[f"matching_{p}"] = matched[p][1]
        logs[f"inverse_{p}"] = inverted[p][1]
    bundle = ModelBundle(config, stats, {p: matched[p][0] for p in PARITIES},
                         {p: inverted[p][0] for p in PARITIES}, None, logs)

    if config.misr_epochs > 0:
        try:
            preds = _map_parallel(lambda s: _predict_parities(s.msi, bundle), scenes, config.threads)
            inputs = np.concatenate([normalize(c.values[s.mask], None) for c, s in zip(preds, scenes)])
            targets = np.concatenate([normalize(s.cube.values[s.mask], None) for s in scenes])
            net = MisrNet(N_BANDS, config.misr_hidden, seed=derive_seed(config.seed, "misr"))
            tc = TrainConfig.for_stage("misr", epochs=config.misr_epochs,
                                       batch_size=config.misr_batch_size, lr=config.lr,
                                       seed=derive_seed(config.seed, "shuffle_misr"))
            bundle.misr, logs["misr"] = train(net, (inputs, targets), tc)
        except Exception as exc:
            raise StageError("misr", exc) from exc

    if out_dir is not None:
        bundle.save(out_dir)
    return bundle


def load_scenes(data_dir) -> list[SyntheticScene]:
    """Scenes written by ``gen-synthetic`` (``*_cube.hsc``, ``*_msi.hsc``, ``*_mask.hsc``)."""
    from .data_io import SyntheticParams, read_cube, read_mask, read_msi

    d = Path(data_dir)
    cubes = sorted(d.glob("*_cube.hsc"))
    if not cubes:
        raise FileNotFoundError(f"no *_cube.hsc files in {d}")
    scenes = []
    for cube_path in cubes:
        key = cube_path.name[: -len("_cube.hsc")]
        msi_path, mask_path = d / f"{key}_msi.hsc", d / f"{key}_mask.hsc"
        for p in (msi_path, mask_path):
            if not p.exists():
                raise FileNotFoundError(f"{p} missing for scene {key}")
        cube = read_cube(cube_path)
        scenes.append(SyntheticScene(cube, read_msi(msi_path), read_mask(mask_path),
                                     int(cube.metadata.get("seed", -1)), SyntheticParams()))
    return scenes

