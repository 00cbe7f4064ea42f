"""Analytic common corruptions, mCE / relative mCE, and Fourier spectra of residuals."""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .data import Dataset
from .network import Network
from .trainer import evaluate

SEVERITIES = (1, 2, 3, 4, 5)


class CorruptionKind(str, enum.Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    GAUSSIAN_BLUR = "gaussian_blur"
    DEFOCUS_BLUR = "defocus_blur"
    MOTION_BLUR = "motion_blur"
    CONTRAST = "contrast"
    BRIGHTNESS = "brightness"
    PIXELATE = "pixelate"
    SATURATE = "saturate"


# Severity parameters for 16x16 inputs. Noise levels follow the CIFAR-scale
# tables; blur/pixelate extents are shrunk to the smaller canvas.
SEVERITY_TABLE: dict[CorruptionKind, tuple] = {
    CorruptionKind.GAUSSIAN_NOISE: (0.04, 0.06, 0.08, 0.09, 0.10),        # noise std
    CorruptionKind.SHOT_NOISE: (500.0, 250.0, 100.0, 75.0, 50.0),         # photons per unit intensity
    CorruptionKind.IMPULSE_NOISE: (0.01, 0.02, 0.03, 0.05, 0.07),         # salt-and-pepper fraction
    CorruptionKind.GAUSSIAN_BLUR: (0.4, 0.6, 0.7, 0.8, 1.0),              # kernel std (pixels)
    CorruptionKind.DEFOCUS_BLUR: (0.6, 0.9, 1.2, 1.6, 2.0),               # disc radius (pixels)
    CorruptionKind.MOTION_BLUR: (2, 3, 4, 5, 6),                          # horizontal streak length
    CorruptionKind.CONTRAST: (0.75, 0.5, 0.4, 0.3, 0.15),                 # contrast factor
    CorruptionKind.BRIGHTNESS: (0.05, 0.1, 0.15, 0.2, 0.3),               # additive offset
    CorruptionKind.PIXELATE: ((2, 0.5), (2, 1.0), (3, 1.0), (4, 0.92), (4, 1.0)),  # (block, blend)
    CorruptionKind.SATURATE: (1.5, 2.0, 3.0, 5.0, 8.0),                   # chroma gain
}

NOISE_KINDS = (CorruptionKind.GAUSSIAN_NOISE, CorruptionKind.SHOT_NOISE, CorruptionKind.IMPULSE_NOISE)
BLUR_KINDS = (CorruptionKind.GAUSSIAN_BLUR, CorruptionKind.DEFOCUS_BLUR, CorruptionKind.MOTION_BLUR)


def severity_param(kind, severity: int):
    kind = CorruptionKind(kind)
    if severity not in SEVERITIES:
        raise ValueError(f"severity must be in 1..5, got {severity}")
    return SEVERITY_TABLE[kind][severity - 1]


def _spatial_filter(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k = kernel.reshape((1,) * (x.ndim - 2) + kernel.shape)
    return ndimage.correlate(x, k, mode="reflect")


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    r = int(np.ceil(3.0 * sigma))
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def disc_kernel(radius: float, supersample: int = 8) -> np.ndarray:
    r = int(np.ceil(radius))
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    grid = np.arange(-r, r + 1, dtype=np.float64)
    yy = grid[:, None, None, None] + offs[None, None, :, None]
    xx = grid[None, :, None, None] + offs[None, None, None, :]
    k = ((yy ** 2 + xx ** 2) <= radius ** 2).mean(axis=(2, 3))
    return k / k.sum()


def motion_kernel(length: int) -> np.ndarray:
    k = np.zeros((1, 2 * length - 1))
    k[0, length - 1:] = 1.0
    return k / k.sum()


def _pixelate(x: np.ndarray, block: int) -> np.ndarray:
    h, w = x.shape[-2:]
    out = np.empty_like(x)
    for i in range(0, h, block):
        for j in range(0, w, block):
            blk = x[..., i:i + block, j:j + block]
            out[..., i:i + block, j:j + block] = blk.mean(axis=(-2, -1), keepdims=True)
    return out


def corrupt(x, kind, severity: int, seed: int = 0, param=None) -> np.ndarray:
    """Corrupt an image batch (N, C, H, W) in [0, 1]; ``param`` overrides the severity table."""
    kind = CorruptionKind(kind)
    p = severity_param(kind, severity) if param is None else param
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError("corrupt expects an (N, C, H, W) batch")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(list(CorruptionKind).index(kind), severity)))
    if kind is CorruptionKind.GAUSSIAN_NOISE:
        out = x + p * rng.standard_normal(x.shape)
    elif kind is CorruptionKind.SHOT_NOISE:
        out = rng.poisson(x * p) / p
    elif kind is CorruptionKind.IMPULSE_NOISE:
        u = rng.uniform(size=x.shape)
        out = np.where(u < p / 2, 0.0, np.where(u > 1 - p / 2, 1.0, x))
    elif kind is CorruptionKind.GAUSSIAN_BLUR:
        if p == 0:
            out = x.copy()
        else:
            k = gaussian_kernel1d(p)
            out = _spatial_filter(_spatial_filter(x, k[:, None]), k[None, :])
    elif kind is CorruptionKind.DEFOCUS_BLUR:
        out = _spatial_filter(x, disc_kernel(p)) if p > 0 else x.copy()
    elif kind is CorruptionKind.MOTION_BLUR:
        out = _spatial_filter(x, motion_kernel(int(p)))
    elif kind is CorruptionKind.CONTRAST:
        m = x.mean(axis=(1, 2, 3), keepdims=True)
        out = (x - m) * p + m
    elif kind is CorruptionKind.BRIGHTNESS:
        out = x + p
    elif kind is CorruptionKind.PIXELATE:
        block, blend = p
        out = blend * _pixelate(x, int(block)) + (1.0 - blend) * x
    elif kind is CorruptionKind.SATURATE:
        gray = x.mean(axis=1, keepdims=True)
        out = gray + p * (x - gray)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- metrics


def _check_coverage(errors: Mapping, reference: Mapping) -> list:
    if set(errors) != set(reference):
        raise ValueError(f"corruption sets differ: {sorted(map(str, set(errors) ^ set(reference)))}")
    for k in errors:
        if len(errors[k]) != len(reference[k]):
            raise ValueError(f"{k}: severity counts differ")
    return sorted(errors, key=str)


def mce(errors: Mapping[str, Sequence[float]], reference: "ReferenceErrorTable | Mapping") -> float:
    """Mean over corruptions of summed errors normalised by the reference model, in percent."""
    ref = reference.errors if isinstance(reference, ReferenceErrorTable) else reference
    kinds = _check_coverage(errors, ref)
    if not kinds:
        raise ValueError("no corruptions given")
    total = 0.0
    for k in kinds:
        denom = float(np.sum(ref[k]))
        if denom == 0:
            raise ZeroDivisionError(f"reference error sum is zero for {k}")
        total += float(np.sum(errors[k])) / denom
    return 100.0 * total / len(kinds)


def rmce(errors: Mapping[str, Sequence[float]], clean_error: float, reference: "ReferenceErrorTable",
         reference_clean: float | None = None) -> float:
    """Relative mCE: excess over each model's own clean error, per severity, in percent."""
    if isinstance(reference, ReferenceErrorTable):
        ref, ref_clean = reference.errors, reference.clean_error
    else:
        ref, ref_clean = reference, reference_clean
    if ref_clean is None:
        raise ValueError("reference clean error required")
    kinds = _check_coverage(errors, ref)
    if not kinds:
        raise ValueError("no corruptions given")
    total = 0.0
    for k in kinds:
        denom = float(np.sum(np.asarray(ref[k]) - ref_clean))
        if denom == 0:
            raise ZeroDivisionError(f"reference shows no corruption gap for {k}")
        total += float(np.sum(np.asarray(errors[k]) - clean_error)) / denom
    return 100.0 * total / len(kinds)


@dataclass
class ReferenceErrorTable:
    errors: dict[str, list[float]]
    clean_error: float
    source: str = ""

    def __post_init__(self):
        for k, v in self.errors.items():
            if any(not 0.0 <= e <= 1.0 for e in v):
                raise ValueError(f"{k}: errors must lie in [0, 1]")
        if not 0.0 <= self.clean_error <= 1.0:
            raise ValueError("clean error must lie in [0, 1]")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "ReferenceErrorTable":
        d = json.loads(Path(path).read_text())
        return cls({k: list(v) for k, v in d["errors"].items()}, d["clean_error"], d.get("source", ""))


@dataclass
class CorruptionReport:
    errors: dict[str, list[float]]
    clean_error: float
    mce: float | None = None
    rmce: float | None = None
    adaptation: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def corruption_errors(net: Network, dataset: Dataset, kinds=tuple(CorruptionKind), rho: float | None = None,
                      batch_size: int = 128, seed: int = 0, blend: str = "std") -> tuple[dict, float]:
    """Top-1 error per (kind, severity) plus clean error, optionally with per-batch BN adaptation."""
    clean = 1.0 - evaluate(net, dataset, 0.0, rho, batch_size, seed, blend)
    errors = {}
    for kind in kinds:
        kind = CorruptionKind(kind)
        row = []
        for s in SEVERITIES:
            xc = corrupt(dataset.images, kind, s, seed)
            ds = Dataset(xc, dataset.labels, dataset.num_classes, dataset.splits, dataset.seed)
            row.append(1.0 - evaluate(net, ds, 0.0, rho, batch_size, seed, blend))
        errors[kind.value] = row
    return errors, clean


def reference_table(net: Network, dataset: Dataset, kinds=tuple(CorruptionKind), seed: int = 0,
                    source: str = "") -> ReferenceErrorTable:
    errors, clean = corruption_errors(net, dataset, kinds, None, seed=seed)
    return ReferenceErrorTable(errors, clean, source)


def corruption_report(net: Network, dataset: Dataset, reference: ReferenceErrorTable | None,
                      kinds=tuple(CorruptionKind), rho: float | None = None, batch_size: int = 128,
                      seed: int = 0, blend: str = "std") -> CorruptionReport:
    errors, clean = corruption_errors(net, dataset, kinds, rho, batch_size, seed, blend)
    rep = CorruptionReport(errors, clean, adaptation={"rho": rho, "batch_size": batch_size, "blend": blend})
    if reference is not None:
        ref = ReferenceErrorTable({k: reference.errors[k] for k in errors}, reference.clean_error, reference.source)
        rep.mce = mce(errors, ref)
        try:
            rep.rmce = rmce(errors, clean, ref)
        except ZeroDivisionError:
            rep.rmce = None
    return rep


# ---------------------------------------------------------------- Fourier view


def fourier_spectrum(delta) -> np.ndarray:
    """Centred DFT magnitude of a residual image, (H, W) or per channel for (C, H, W)."""
    d = np.asarray(delta, dtype=np.float64)
    if d.ndim not in (2, 3):
        raise ValueError("expected (H, W) or (C, H, W)")
    return np.abs(np.fft.fftshift(np.fft.fft2(d), axes=(-2, -1)))


def radial_profile(spectrum: np.ndarray) -> np.ndarray:
    """Mean magnitude on integer-radius annuli around the centre (DC)."""
    s = spectrum if spectrum.ndim == 2 else spectrum.mean(axis=0)
    h, w = s.shape
    yy, xx = np.indices((h, w))
    r = np.rint(np.hypot(yy - h // 2, xx - w // 2)).astype(int)
    sums = np.bincount(r.ravel(), s.ravel())
    counts = np.bincount(r.ravel())
    return sums / np.maximum(counts, 1)


def low_frequency_fraction(spectrum: np.ndarray, cutoff: float = 0.25) -> float:
    """Share of squared magnitude within ``cutoff`` x (image size) of DC."""
    s = spectrum if spectrum.ndim == 2 else spectrum.mean(axis=0)
    h, w = s.shape
    yy, xx = np.indices((h, w))
    r = np.hypot((yy - h // 2) / h, (xx - w // 2) / w)
    e = s ** 2
    tot = e.sum()
    return float(e[r <= cutoff].sum() / tot) if tot > 0 else 0.0
