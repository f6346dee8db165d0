"""Procedural terrain, Perlin cloud fields and synthetic temporal datasets."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stcloud import cloudsense
from stcloud.errors import ContractError
from stcloud.imagecore import U8, MultispectralImage, save_image, to_u8
from stcloud.pairforge import (
    Manifest,
    CropRecord,
    SINGLE,
    TEMPORAL,
    TemporalGroup,
    as_single,
    split_manifest,
    write_manifest,
)

CLOUD_RGB = 250.0
CLOUD_IR = 230.0
PERSISTENCE = 0.5
LACUNARITY = 2.0

CLASS_NAMES = (
    "AnnualCrop",
    "Forest",
    "HerbaceousVegetation",
    "Highway",
    "Industrial",
    "Pasture",
    "PermanentCrop",
    "Residential",
    "River",
    "SeaLake",
)

# (low, high) terrain colours per class; every value keeps the cloud score
# of the clear ground below the default threshold.
PALETTES = {
    0: ((150, 135, 80), (105, 135, 60)),
    1: ((18, 52, 22), (42, 90, 38)),
    2: ((88, 118, 55), (128, 140, 78)),
    3: ((96, 110, 78), (122, 126, 100)),
    4: ((118, 104, 96), (140, 128, 118)),
    5: ((100, 150, 72), (135, 172, 92)),
    6: ((122, 110, 64), (78, 110, 50)),
    7: ((132, 118, 110), (96, 86, 80)),
    8: ((72, 102, 54), (96, 124, 70)),
    9: ((12, 40, 88), (24, 66, 124)),
}
HIGHWAY_COLOR = (128, 128, 126)
RIVER_COLOR = (36, 64, 118)


@dataclass(frozen=True, eq=False)
class CloudField:
    width: int
    height: int
    alpha: np.ndarray
    seed: int
    octaves: int


@dataclass(frozen=True)
class SynthSceneSpec:
    seed: int
    size: int = 64
    class_id: int = 0
    n_cloudy: int = 3
    opacity_scale: float = 1.0

    def __post_init__(self):
        if not 0 <= self.class_id < 10:
            raise ContractError(f"class_id must be in [0, 10), got {self.class_id}")
        if self.size < 32:
            raise ContractError(f"scene size must be at least 32, got {self.size}")
        if not 0.0 <= self.opacity_scale <= 1.0:
            raise ContractError("opacity_scale must lie in [0, 1]")


def _smootherstep(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _gradient_noise(width: int, height: int, res_x: int, res_y: int, rng: np.random.Generator) -> np.ndarray:
    """One octave of 2-D gradient noise, zero at lattice points, range [-sqrt(.5), sqrt(.5)]."""
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(res_y + 1, res_x + 1))
    gx, gy = np.cos(angles), np.sin(angles)

    u = np.arange(width) * (res_x / width)
    v = np.arange(height) * (res_y / height)
    i0 = np.floor(u).astype(int)
    j0 = np.floor(v).astype(int)
    fx = (u - i0)[None, :]
    fy = (v - j0)[:, None]
    J, I = np.meshgrid(j0, i0, indexing="ij")

    def corner(dj, di):
        return gx[J + dj, I + di] * (fx - di) + gy[J + dj, I + di] * (fy - dj)

    sx, sy = _smootherstep(fx), _smootherstep(fy)
    top = corner(0, 0) + sx * (corner(0, 1) - corner(0, 0))
    bottom = corner(1, 0) + sx * (corner(1, 1) - corner(1, 0))
    return top + sy * (bottom - top)


def perlin(
    width: int,
    height: int,
    octaves: int = 4,
    seed: int = 0,
    cells: int = 4,
    persistence: float = PERSISTENCE,
    lacunarity: float = LACUNARITY,
) -> CloudField:
    """Fractal Perlin noise normalised affinely onto [0, 1].

    ``cells`` is the lattice resolution of the first octave across the
    longer side. The mapping ``0.5 + 0.5 * n / (A * sqrt(.5))`` (``A`` the
    summed amplitudes) sends the theoretical range exactly onto [0, 1], so
    lattice points of a single octave land on 0.5.
    """
    if width < 1 or height < 1:
        raise ContractError(f"noise field must be non-empty, got {width}x{height}")
    if octaves < 1:
        raise ContractError("octaves must be >= 1")
    rng = np.random.default_rng(seed)
    total = np.zeros((height, width))
    amplitude, amp_sum = 1.0, 0.0
    side = max(width, height)
    for k in range(octaves):
        res = max(1, int(round(cells * lacunarity**k)))
        res_x = max(1, int(round(res * width / side)))
        res_y = max(1, int(round(res * height / side)))
        total += amplitude * _gradient_noise(width, height, res_x, res_y, rng)
        amp_sum += amplitude
        amplitude *= persistence
    alpha = np.clip(0.5 + 0.5 * total / (amp_sum * math.sqrt(0.5)), 0.0, 1.0)
    return CloudField(width, height, alpha, seed, octaves)


def _mix(lo, hi, t):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return lo + (hi - lo) * t[..., None]


def synth_clear(spec: SynthSceneSpec) -> MultispectralImage:
    """Deterministic 4-channel terrain for one land-cover class."""
    n = spec.size
    rng = np.random.default_rng([spec.seed, spec.class_id, 7])
    base = perlin(n, n, octaves=3, seed=int(rng.integers(2**31)), cells=2).alpha
    detail = perlin(n, n, octaves=2, seed=int(rng.integers(2**31)), cells=8).alpha
    t = np.clip((base - 0.5) * 2.5 + 0.5, 0.0, 1.0)
    lo, hi = PALETTES[spec.class_id]

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    along = xx * np.cos(theta) + yy * np.sin(theta)
    across = -xx * np.sin(theta) + yy * np.cos(theta)
    cid = spec.class_id
    if cid in (0, 6):
        period = n / (6 if cid == 0 else 12)
        t = 0.5 * t + 0.5 * (np.sin(2 * np.pi * along / period) > 0)
    elif cid in (4, 7):
        block = n / (4 if cid == 4 else 8)
        t = 0.5 * t + 0.5 * ((np.floor(xx / block) + np.floor(yy / block)) % 2)
    rgb = _mix(lo, hi, t)
    if cid in (3, 8):
        offset = rng.uniform(-0.25, 0.25) * n
        wobble = (base - 0.5) * (0 if cid == 3 else n * 0.4)
        half = (2.0 if cid == 3 else 5.0) * n / 64
        band = np.abs(across - offset - wobble) < half
        rgb[band] = HIGHWAY_COLOR if cid == 3 else RIVER_COLOR
    rgb = rgb * (0.92 + 0.16 * detail[..., None])
    rgb = np.clip(rgb, 0, 140)
    green, red = rgb[..., 1], rgb[..., 0]
    ir = np.clip(30.0 + 1.1 * green + 0.9 * np.maximum(green - red, 0.0), 0, 255)
    return MultispectralImage(to_u8(np.dstack([rgb, ir])), U8)


def apply_clouds(clear: MultispectralImage, field: CloudField, opacity_scale: float = 1.0) -> MultispectralImage:
    if clear.dtype != U8:
        raise ContractError("apply_clouds expects a u8 image")
    if field.alpha.shape != (clear.height, clear.width):
        raise ContractError(f"cloud field {field.alpha.shape} does not match image {clear.shape[:2]}")
    a = (opacity_scale * np.asarray(field.alpha, dtype=np.float64))[..., None]
    values = clear.samples.astype(np.float64)
    target = np.full(clear.channels, CLOUD_RGB)
    if clear.channels == 4:
        target[3] = CLOUD_IR
    if clear.channels == 1:
        target[0] = CLOUD_IR
    return MultispectralImage(to_u8(a * target + (1.0 - a) * values), U8)


# -- cloudy views ------------------------------------------------------------


def _cloud_layers(shape: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    thick = perlin(shape, shape, octaves=4, seed=seed, cells=3).alpha
    z = (thick - thick.mean()) / (thick.std() + 1e-12)
    haze_field = perlin(shape, shape, octaves=2, seed=seed + 1, cells=1).alpha
    return z, haze_field


def cloudy_view(
    clear: MultispectralImage,
    seed: int,
    target_cover: float,
    opacity_scale: float = 1.0,
    haze: float = 0.3,
) -> tuple[MultispectralImage, CloudField, float]:
    """Cloud ``clear`` so its detected cover lands near ``target_cover``.

    Bisects the threshold offset of a standardised Perlin field; if a
    bright scene plus haze overshoots the cloudy band, the haze is
    reduced and the search repeated. Returns (image, field, cover).
    """
    n = clear.width
    z, haze_field = _cloud_layers(n, seed)
    best = None
    for _ in range(6):
        lo, hi = -4.0, 6.0
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            alpha = np.clip(np.maximum((z - mid) / 0.6, haze * haze_field), 0.0, 1.0)
            field = CloudField(n, n, alpha, seed, 4)
            img = apply_clouds(clear, field, opacity_scale)
            cover = cloudsense.cover_fraction(cloudsense.cloud_score(img))
            if best is None or abs(cover - target_cover) < abs(best[2] - target_cover):
                best = (img, field, cover)
            if cover > target_cover:
                lo = mid
            else:
                hi = mid
        if cloudsense.label_for_cover(best[2]) == cloudsense.Label.CLOUDY:
            break
        haze *= 0.5
        best = None
    return best


@dataclass(frozen=True)
class SynthGroup:
    clear: MultispectralImage
    cloudy: tuple[MultispectralImage, ...]
    fields: tuple[CloudField, ...]
    covers: tuple[float, ...]
    class_id: int


def synth_group(index: int, T: int, size: int, seed: int, opacity_scale: float = 1.0, class_id: int | None = None) -> SynthGroup:
    rng = np.random.default_rng([seed, index])
    if class_id is None:
        class_id = index % 10
    clear = synth_clear(SynthSceneSpec(int(rng.integers(2**31)), size, class_id, T, opacity_scale))
    views, fields, covers = [], [], []
    for k in range(T):
        target = float(rng.uniform(0.12, 0.28))
        haze = float(rng.uniform(0.1, 0.45))
        img, field, cover = cloudy_view(clear, int(rng.integers(2**31)), target, opacity_scale, haze)
        views.append(img)
        fields.append(field)
        covers.append(cover)
    return SynthGroup(clear, tuple(views), tuple(fields), tuple(covers), class_id)


def _group_task(args):
    return synth_group(*args)


def synth_dataset(
    n_groups: int,
    T: int = 3,
    size: int = 64,
    seed: int = 0,
    out_dir=".",
    opacity_scale: float = 1.0,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    jobs: int = 1,
) -> Manifest:
    """Write ``n_groups`` synthetic temporal groups under ``out_dir``.

    Produces ``images/*.msi``, ``manifest.tsv`` (temporal),
    ``manifest_single.tsv`` (most recent cloudy view only) and
    ``labels.tsv`` (group_id, class_id).
    """
    if n_groups < 1 or T < 1:
        raise ContractError("n_groups and T must be positive")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 1 << 20])
    coords = rng.uniform([-60.0, -180.0], [70.0, 180.0], size=(n_groups, 2))

    tasks = [(g, T, size, seed, opacity_scale) for g in range(n_groups)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_group_task, tasks, chunksize=8))
    else:
        results = [_group_task(t) for t in tasks]

    groups, labels = [], []
    for g, res in enumerate(results):
        tile = f"synth{g:05d}"
        t_clear = 1000.0 + 40.0 * g
        lat, lon = (float(v) for v in coords[g])
        clear_rel = f"images/g{g:05d}_clear.msi"
        save_image(res.clear, out / clear_rel)
        clear = CropRecord(tile, 0, lat, lon, t_clear, cloudsense.Label.CLEAR, clear_rel)
        members = []
        for k, (img, cover) in enumerate(zip(res.cloudy, res.covers), start=1):
            rel = f"images/g{g:05d}_cloudy{k}.msi"
            save_image(img, out / rel)
            members.append(CropRecord(tile, 0, lat, lon, t_clear - k, cloudsense.Label.CLOUDY, rel, cover))
        group = TemporalGroup(clear, tuple(members))
        groups.append(group)
        labels.append((group.group_id, res.class_id))

    kind = TEMPORAL if T > 1 else SINGLE
    manifest = split_manifest(Manifest(kind, groups, out.resolve()), fractions, seed)
    write_manifest(manifest, out / "manifest.tsv")
    write_manifest(as_single(manifest), out / "manifest_single.tsv")
    write_labels(labels, out / "labels.tsv")
    return manifest


def write_labels(labels, path) -> None:
    Path(path).write_text("".join(f"{gid}\t{cid}\n" for gid, cid in labels), encoding="utf-8")


def read_labels(path) -> dict[str, int]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            gid, cid = line.split("\t")
            out[gid] = int(cid)
        except ValueError as exc:
            raise ContractError(f"{path}:{lineno}: malformed label line") from exc
    return out
