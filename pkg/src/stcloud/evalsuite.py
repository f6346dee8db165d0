"""PSNR/SSIM, temporal filter baselines and manifest-level evaluation reports."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stcloud import cloudsense
from stcloud.errors import ContractError, CorruptionError, FormatError
from stcloud.imagecore import U8, MultispectralImage, load_image, to_u8
from stcloud.pairforge import Manifest, TemporalGroup

log = logging.getLogger(__name__)

MAX_I = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

BASELINES = ("raw-cloudy", "mean", "median", "composite")


def _pair(x: MultispectralImage, y: MultispectralImage) -> tuple[np.ndarray, np.ndarray]:
    if x.shape != y.shape:
        raise ContractError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.dtype != U8 or y.dtype != U8:
        raise ContractError("metrics are defined on u8 images")
    return x.samples.astype(np.float64), y.samples.astype(np.float64)


def mse(x: MultispectralImage, y: MultispectralImage) -> float:
    a, b = _pair(x, y)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float) -> float:
    # MSE floored at 1: identical 8-bit images score 10*log10(255^2) ~ 48.13 dB
    return 10.0 * math.log10(MAX_I**2 / max(err, 1.0))


def psnr(x: MultispectralImage, y: MultispectralImage) -> float:
    return psnr_from_mse(mse(x, y))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D array with the 1-D kernel ``g``."""
    k = len(g)
    rows = sum(g[i] * img[i : img.shape[0] - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j : rows.shape[1] - k + 1 + j] for j in range(k))


def ssim(x: MultispectralImage, y: MultispectralImage) -> float:
    """Single-scale SSIM, Gaussian 11x11 window (sigma 1.5), mean over valid windows and channels."""
    a, b = _pair(x, y)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ContractError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    c1 = (SSIM_K1 * MAX_I) ** 2
    c2 = (SSIM_K2 * MAX_I) ** 2
    g = gaussian_window()
    scores = []
    for ch in range(a.shape[2]):
        u, v = a[:, :, ch], b[:, :, ch]
        mu_u, mu_v = _filter_valid(u, g), _filter_valid(v, g)
        var_u = _filter_valid(u * u, g) - mu_u**2
        var_v = _filter_valid(v * v, g) - mu_v**2
        cov = _filter_valid(u * v, g) - mu_u * mu_v
        num = (2 * mu_u * mu_v + c1) * (2 * cov + c2)
        den = (mu_u**2 + mu_v**2 + c1) * (var_u + var_v + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


# -- baselines ---------------------------------------------------------------


def _stack(images: list[MultispectralImage]) -> np.ndarray:
    if not images:
        raise ContractError("need at least one image")
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ContractError(f"images differ in shape: {sorted(shapes)}")
    if any(img.dtype != U8 for img in images):
        raise ContractError("filters operate on u8 images")
    return np.stack([img.samples.astype(np.float64) for img in images])


def mean_filter(cloudy: list[MultispectralImage]) -> MultispectralImage:
    return MultispectralImage(to_u8(_stack(cloudy).mean(axis=0)), U8)


def median_filter(cloudy: list[MultispectralImage]) -> MultispectralImage:
    """Per-pixel median; even counts average the two middle values."""
    return MultispectralImage(to_u8(np.median(_stack(cloudy), axis=0)), U8)


def composite_filter(
    cloudy: list[MultispectralImage], masks: list[cloudsense.CloudMask]
) -> tuple[MultispectralImage, np.ndarray]:
    """Average each pixel over the inputs whose mask marks it clear.

    Pixels cloudy in every input are set to 0 and flagged in the returned
    boolean ``missing`` array.
    """
    stack = _stack(cloudy)
    if len(masks) != len(cloudy):
        raise ContractError("need exactly one mask per image")
    clear = np.stack([~m.binary for m in masks]).astype(np.float64)
    if clear.shape[1:] != stack.shape[1:3]:
        raise ContractError("mask shape does not match image shape")
    counts = clear.sum(axis=0)
    total = (stack * clear[..., None]).sum(axis=0)
    missing = counts == 0
    out = np.where(missing[..., None], 0.0, total / np.maximum(counts, 1.0)[..., None])
    return MultispectralImage(to_u8(out), U8), missing


def run_baseline(name: str, cloudy: list[MultispectralImage]) -> MultispectralImage:
    if name == "raw-cloudy":
        return cloudy[0]
    if name == "mean":
        return mean_filter(cloudy)
    if name == "median":
        return median_filter(cloudy)
    if name == "composite":
        return composite_filter(cloudy, [cloudsense.cloud_score(img) for img in cloudy])[0]
    raise ContractError(f"unknown baseline {name!r}; choose from {BASELINES}")


# -- reports -----------------------------------------------------------------


@dataclass
class SampleResult:
    group_id: str
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    model_name: str
    split: str
    samples: list[SampleResult] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([s.psnr for s in self.samples])) if self.samples else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s.ssim for s in self.samples])) if self.samples else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("group_id", "psnr", "ssim"))
        for s in self.samples:
            w.writerow((s.group_id, f"{s.psnr:.6f}", f"{s.ssim:.6f}"))
        buf.write(f"mean_psnr={self.mean_psnr:.6f}\n")
        buf.write(f"mean_ssim={self.mean_ssim:.6f}\n")
        if self.mean_ssim < 0:
            buf.write("note=mean SSIM is negative\n")
        return buf.getvalue()

    def to_text(self) -> str:
        return format_table([self])


def format_table(reports: list[EvalReport]) -> str:
    """Aligned text table, one row per source, in the shape of the comparison tables."""
    name_w = max([len("Model")] + [len(r.model_name) for r in reports])
    lines = [f"{'Model':<{name_w}}  {'Split':<5}  {'PSNR':>8}  {'SSIM':>6}  {'N':>5}  {'Errors':>6}"]
    for r in reports:
        lines.append(
            f"{r.model_name:<{name_w}}  {r.split:<5}  {r.mean_psnr:>8.3f}  {r.mean_ssim:>6.3f}  {r.n_samples:>5}  {len(r.errors):>6}"
        )
    return "\n".join(lines) + "\n"


def evaluate(source, manifest: Manifest, split: str = "val", name: str | None = None) -> EvalReport:
    """Score a prediction source against the clear targets of one split.

    ``source`` is ``"clear"`` (identity), a baseline name, a checkpoint
    path, a loaded generator, or any callable ``(cloudy_images) -> u8 image``.
    Unreadable samples are recorded in ``report.errors`` and skipped.
    """
    predict, default_name = _resolve_source(source)
    report = EvalReport(name or default_name, split)
    for group in manifest.split(split):
        try:
            clear = load_image(manifest.resolve(group.clear.path))
            cloudy = [load_image(manifest.resolve(z.path)) for z in group.cloudy]
        except (OSError, FormatError, CorruptionError) as exc:
            report.errors.append((group.group_id, str(exc)))
            log.warning("skipping %s: %s", group.group_id, exc)
            continue
        pred = clear.rgb() if predict is None else predict(cloudy).rgb()
        target = clear.rgb()
        report.samples.append(SampleResult(group.group_id, psnr(pred, target), ssim(pred, target)))
    return report


def _resolve_source(source):
    import torch.nn as nn

    from stcloud.trainer import generate

    if isinstance(source, nn.Module):
        return (lambda cloudy: generate(source, cloudy)), source.spec.kind
    if callable(source):
        return source, getattr(source, "__name__", "custom")
    if source == "clear":
        return None, "clear"
    if source in BASELINES:
        return (lambda cloudy: run_baseline(source, cloudy)), source
    path = Path(source)
    if path.exists():
        from stcloud.models import load_checkpoint

        G = load_checkpoint(path)
        return (lambda cloudy: generate(G, cloudy)), path.parent.name or path.stem
    raise ContractError(f"unknown evaluation source {source!r}")


def evaluate_generator(G, manifest: Manifest, split: str = "val") -> EvalReport:
    return evaluate(G, manifest, split)


def write_report(report: EvalReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = report.model_name.replace("/", "_")
    csv_path = out / f"{stem}_{report.split}.csv"
    txt_path = out / f"{stem}_{report.split}.txt"
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    txt_path.write_text(report.to_text(), encoding="utf-8")
    return csv_path, txt_path
