"""Crop extraction, clear/cloudy pairing, ocean capping, splits and manifests."""

from __future__ import annotations

import hashlib
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

from stcloud.cloudsense import Label
from stcloud.errors import CapacityError, ContractError, ManifestParseError
from stcloud.imagecore import MultispectralImage

WINDOW_DAYS = 35.0
SINGLE = "single"
TEMPORAL = "temporal"
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = "# stcloud-manifest"


@dataclass(frozen=True)
class CropRecord:
    tile_id: str
    crop_index: int
    lat: float
    lon: float
    timestamp: float
    label: Label
    path: str
    cover_fraction: float = 0.0

    @property
    def location(self) -> tuple[str, int]:
        return (self.tile_id, self.crop_index)


@dataclass(frozen=True)
class TemporalGroup:
    clear: CropRecord
    cloudy: tuple[CropRecord, ...]
    split: str = "train"

    @property
    def T(self) -> int:
        return len(self.cloudy)

    @property
    def tile_id(self) -> str:
        return self.clear.tile_id

    @property
    def group_id(self) -> str:
        return f"{self.clear.tile_id}:{self.clear.crop_index}:{self.clear.timestamp:g}"


@dataclass
class Manifest:
    kind: str
    groups: list[TemporalGroup] = field(default_factory=list)
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in (SINGLE, TEMPORAL):
            raise ContractError(f"unknown manifest kind {self.kind!r}")

    def resolve(self, path: str) -> Path:
        """Image paths are stored relative to the manifest's directory."""
        p = Path(path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def split(self, name: str) -> list[TemporalGroup]:
        return [g for g in self.groups if g.split == name]

    def __len__(self):
        return len(self.groups)


def check_group(group: TemporalGroup, window: float = WINDOW_DAYS) -> None:
    """Raise ContractError if ``group`` breaks co-location, window or ordering rules."""
    c = group.clear
    if c.label != Label.CLEAR:
        raise ContractError(f"{group.group_id}: target is not labelled Clear")
    prev = math.inf
    for z in group.cloudy:
        if z.location != c.location:
            raise ContractError(f"{group.group_id}: cloudy member from {z.location}")
        if not (c.timestamp - window <= z.timestamp < c.timestamp):
            raise ContractError(f"{group.group_id}: cloudy timestamp {z.timestamp} outside window")
        if not z.timestamp < prev:
            raise ContractError(f"{group.group_id}: cloudy list not strictly most-recent-first")
        prev = z.timestamp


# -- crops -------------------------------------------------------------------


def _tile_rng(tile_id: str, seed: int) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{tile_id}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


def crop_offsets(
    width: int, height: int, tile_id: str, n: int = 100, size: int = 256, seed: int = 0
) -> list[tuple[int, int]]:
    """Pixel offsets ``(x, y)`` of ``n`` non-overlapping crops.

    Crops occupy cells of a ``size``-pitch grid, so the same (tile_id, seed)
    yields the same locations on every acquisition date of that tile.
    """
    cols, rows = width // size, height // size
    capacity = cols * rows
    if n > capacity:
        raise CapacityError(f"{n} crops of {size}px requested but tile holds {capacity}")
    cells = _tile_rng(tile_id, seed).sample(range(capacity), n)
    return [((c % cols) * size, (c // cols) * size) for c in cells]


def extract_crops(
    tile_image: MultispectralImage, tile_id: str, n: int = 100, size: int = 256, seed: int = 0
) -> list[tuple[MultispectralImage, int, tuple[int, int]]]:
    offsets = crop_offsets(tile_image.width, tile_image.height, tile_id, n, size, seed)
    out = []
    for index, (x, y) in enumerate(offsets):
        crop = tile_image.samples[y : y + size, x : x + size]
        out.append((MultispectralImage(crop, tile_image.dtype), index, (x, y)))
    return out


# -- pairing -----------------------------------------------------------------


def _cloudy_candidates(catalog: Iterable[CropRecord]) -> dict[tuple[str, int], list[CropRecord]]:
    by_loc = defaultdict(list)
    for rec in catalog:
        if rec.label == Label.CLOUDY:
            by_loc[rec.location].append(rec)
    for recs in by_loc.values():
        # most recent first; equal timestamps resolved by path
        recs.sort(key=lambda r: (-r.timestamp, r.path))
    return by_loc


def _recent_cloudy(
    clear: CropRecord, candidates: list[CropRecord], window: float
) -> list[CropRecord]:
    out = []
    for z in candidates:
        if not (clear.timestamp - window <= z.timestamp < clear.timestamp):
            continue
        if out and out[-1].timestamp == z.timestamp:
            continue
        out.append(z)
    return out


def _clears(catalog: Iterable[CropRecord]) -> list[CropRecord]:
    clears = [r for r in catalog if r.label == Label.CLEAR]
    clears.sort(key=lambda r: (r.tile_id, r.crop_index, r.timestamp, r.path))
    return clears


def pair_temporal(catalog: list[CropRecord], T: int = 3, window: float = WINDOW_DAYS) -> Manifest:
    if T < 1:
        raise ContractError("T must be at least 1")
    candidates = _cloudy_candidates(catalog)
    groups = []
    for clear in _clears(catalog):
        recent = _recent_cloudy(clear, candidates.get(clear.location, []), window)
        if len(recent) < T:
            continue
        groups.append(TemporalGroup(clear, tuple(recent[:T])))
    return Manifest(SINGLE if T == 1 else TEMPORAL, groups)


def pair_single(catalog: list[CropRecord], window: float = WINDOW_DAYS) -> Manifest:
    return pair_temporal(catalog, T=1, window=window)


def enforce_ocean_cap(
    manifest: Manifest,
    cap: float = 0.10,
    is_ocean: Callable[[TemporalGroup], bool] | None = None,
) -> Manifest:
    """Drop the oldest ocean groups so they make up at most ``floor(cap * total)``.

    By default a group is an ocean group when more than half of its clear
    image's visible pixels are water.
    """
    if is_ocean is None:
        is_ocean = lambda g: _clear_image_is_ocean(manifest, g)  # noqa: E731
    total = len(manifest.groups)
    allowed = math.floor(cap * total)
    ocean = [i for i, g in enumerate(manifest.groups) if is_ocean(g)]
    if len(ocean) <= allowed:
        return Manifest(manifest.kind, list(manifest.groups), manifest.root)
    ocean.sort(key=lambda i: (manifest.groups[i].clear.timestamp, manifest.groups[i].group_id))
    dropped = set(ocean[: len(ocean) - allowed])
    kept = [g for i, g in enumerate(manifest.groups) if i not in dropped]
    return Manifest(manifest.kind, kept, manifest.root)


def _clear_image_is_ocean(manifest: Manifest, group: TemporalGroup) -> bool:
    from stcloud.cloudsense import ocean_fraction
    from stcloud.imagecore import load_image

    return ocean_fraction(load_image(manifest.resolve(group.clear.path))) > 0.5


def split_manifest(
    manifest: Manifest, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> Manifest:
    """Assign train/val/test per tile so no location leaks across splits.

    val and test receive ``floor(fraction * n_tiles)`` tiles each; train gets
    the remainder.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ContractError(f"split fractions must be three non-negative values summing to 1: {fractions}")
    tiles = sorted({g.tile_id for g in manifest.groups})
    random.Random(seed).shuffle(tiles)
    n = len(tiles)
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    assignment = {}
    for i, tile in enumerate(tiles):
        if i < n_val:
            assignment[tile] = "val"
        elif i < n_val + n_test:
            assignment[tile] = "test"
        else:
            assignment[tile] = "train"
    return Manifest(manifest.kind, [replace(g, split=assignment[g.tile_id]) for g in manifest.groups], manifest.root)


# -- manifest file -----------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def format_group(kind: str, g: TemporalGroup) -> str:
    c = g.clear
    fields = [kind, c.tile_id, str(c.crop_index), _fmt(c.lat), _fmt(c.lon), g.split, _fmt(c.timestamp), c.path]
    for z in g.cloudy:
        fields += [_fmt(z.timestamp), z.path, _fmt(z.cover_fraction)]
    return "\t".join(fields)


def write_manifest(manifest: Manifest, path) -> None:
    lines = [f"{MANIFEST_HEADER} kind={manifest.kind}"]
    lines += [format_group(manifest.kind, g) for g in manifest.groups]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_group(line: str, lineno: int = 0) -> tuple[str, TemporalGroup]:
    parts = line.split("\t")
    if len(parts) < 11 or (len(parts) - 8) % 3:
        raise ManifestParseError(lineno, f"expected 8 + 3*T tab-separated fields, got {len(parts)}")
    kind, tile_id, crop_index, lat, lon, split, clear_ts, clear_path = parts[:8]
    if kind not in (SINGLE, TEMPORAL):
        raise ManifestParseError(lineno, f"unknown kind {kind!r}")
    if split not in SPLITS:
        raise ManifestParseError(lineno, f"unknown split {split!r}")
    try:
        idx, lat_f, lon_f, ts = int(crop_index), float(lat), float(lon), float(clear_ts)
        clear = CropRecord(tile_id, idx, lat_f, lon_f, ts, Label.CLEAR, clear_path)
        cloudy = []
        for k in range(8, len(parts), 3):
            cloudy.append(
                CropRecord(tile_id, idx, lat_f, lon_f, float(parts[k]), Label.CLOUDY, parts[k + 1], float(parts[k + 2]))
            )
    except ValueError as exc:
        raise ManifestParseError(lineno, str(exc)) from exc
    return kind, TemporalGroup(clear, tuple(cloudy), split)


def read_manifest(path) -> Manifest:
    kind = None
    groups = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith(MANIFEST_HEADER) and "kind=" in line:
                kind = line.split("kind=", 1)[1].split()[0]
            continue
        line_kind, group = parse_group(line, lineno)
        if kind is None:
            kind = line_kind
        elif line_kind != kind:
            raise ManifestParseError(lineno, f"kind {line_kind!r} in a {kind!r} manifest")
        if groups and group.T != groups[0].T:
            raise ManifestParseError(lineno, f"group has T={group.T}, expected {groups[0].T}")
        groups.append(group)
    return Manifest(kind or SINGLE, groups, Path(path).resolve().parent)


def as_single(manifest: Manifest) -> Manifest:
    """Keep only the most recent cloudy member of every group."""
    return Manifest(SINGLE, [replace(g, cloudy=g.cloudy[:1]) for g in manifest.groups], manifest.root)


def label_counts(records: Iterable[CropRecord]) -> dict[str, int]:
    counts = {lab.value: 0 for lab in Label}
    for r in records:
        counts[Label(r.label).value] += 1
    return counts


def split_counts(manifest: Manifest) -> dict[str, int]:
    return {s: len(manifest.split(s)) for s in SPLITS}

