"""Datasets: synthetic graded textures, manifest ingestion, patches, folds, augmentation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .autodiff import ContractError

LOCATIONS = (1, 2, 3, 4, 5, 6)
PROPERTIES = ("fiber_length", "smoothness", "toweling")
CAMERA_MODES = ("normal", "edof", "edr")
PRESSING = ("with", "against")
ZOOMS = (50, 200)
MANIFEST_HEADER = (
    "path",
    "sample_id",
    "location",
    "zoom",
    "rotation_deg",
    "lighting_id",
    "camera_mode",
    "pressing_direction",
    *PROPERTIES,
)


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    sample_id: str
    location: int
    zoom: int = 50
    rotation_deg: float = 0.0
    lighting_id: int = 1
    camera_mode: str = "normal"
    pressing_direction: str = "with"
    ratings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.location not in LOCATIONS:
            raise ContractError(f"{self.path}: location {self.location} outside 1..6")
        if self.zoom not in ZOOMS:
            raise ContractError(f"{self.path}: zoom {self.zoom} not in {ZOOMS}")
        if self.camera_mode not in CAMERA_MODES:
            raise ContractError(f"{self.path}: camera mode {self.camera_mode!r} not in {CAMERA_MODES}")
        if self.pressing_direction not in PRESSING:
            raise ContractError(f"{self.path}: pressing direction {self.pressing_direction!r} not in {PRESSING}")
        for prop, level in self.ratings.items():
            if prop not in PROPERTIES:
                raise ContractError(f"{self.path}: unknown property {prop!r}")
            if level not in (1, 2, 3, 4):
                raise ContractError(f"{self.path}: {prop} rating {level} outside 1..4")


@dataclass
class SampleManifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            dupes = sorted({p for p in paths if paths.count(p) > 1})
            raise ContractError(f"duplicate manifest paths: {dupes}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def locations(self) -> set[int]:
        return {e.location for e in self.entries}

    def select(
        self,
        zoom: int | None = None,
        rotation_deg: float | None = None,
        lighting_id: int | None = None,
        camera_mode: str | None = None,
        pressing_direction: str | None = None,
        rated: str | None = None,
    ) -> "SampleManifest":
        """Filter entries; ``None`` pools every value of that factor."""

        def keep(e: ManifestEntry) -> bool:
            return (
                (zoom is None or e.zoom == zoom)
                and (rotation_deg is None or e.rotation_deg == rotation_deg)
                and (lighting_id is None or e.lighting_id == lighting_id)
                and (camera_mode is None or e.camera_mode == camera_mode)
                and (pressing_direction is None or e.pressing_direction == pressing_direction)
                and (rated is None or rated in e.ratings)
            )

        return SampleManifest([e for e in self.entries if keep(e)], self.root)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p


def _entry_from_row(row: dict) -> ManifestEntry:
    ratings = {p: int(row[p]) for p in PROPERTIES if row.get(p) not in (None, "")}
    return ManifestEntry(
        path=row["path"],
        sample_id=str(row["sample_id"]),
        location=int(row["location"]),
        zoom=int(row.get("zoom") or 50),
        rotation_deg=float(row.get("rotation_deg") or 0.0),
        lighting_id=int(row.get("lighting_id") or 1),
        camera_mode=row.get("camera_mode") or "normal",
        pressing_direction=row.get("pressing_direction") or "with",
        ratings=ratings,
    )


def read_manifest(path: str | Path) -> SampleManifest:
    """Load a CSV (header per ``MANIFEST_HEADER``) or JSON list-of-rows manifest."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        rows = json.loads(path.read_text())
        if isinstance(rows, dict):
            rows = rows["entries"]
        entries = []
        for row in rows:
            row = dict(row)
            for prop, level in row.pop("ratings", {}).items():
                row[prop] = level
            entries.append(_entry_from_row({k: ("" if v is None else v) for k, v in row.items()}))
    else:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"path", "sample_id", "location"} - set(reader.fieldnames or ())
            if missing:
                raise ContractError(f"{path}: manifest missing columns {sorted(missing)}")
            entries = [_entry_from_row(row) for row in reader]
    return SampleManifest(entries, path.parent)


def write_manifest(manifest: SampleManifest, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            w.writerow(
                [
                    e.path,
                    e.sample_id,
                    e.location,
                    e.zoom,
                    f"{e.rotation_deg:g}",
                    e.lighting_id,
                    e.camera_mode,
                    e.pressing_direction,
                    *[e.ratings.get(p, "") for p in PROPERTIES],
                ]
            )


# ---------------------------------------------------------------------------
# patches


@dataclass(frozen=True)
class PatchRecord:
    pixels: np.ndarray  # C x S x S
    label: int  # level 1..4
    sample_id: str = ""
    location: int = 0
    grid: tuple[int, int] = (0, 0)

    @property
    def size(self) -> int:
        return self.pixels.shape[-1]


def extract_patches(
    image: np.ndarray,
    size: int,
    stride: int | None = None,
    label: int = 0,
    sample_id: str = "",
    location: int = 0,
) -> list[PatchRecord]:
    """Grid of ``size``-square patches at offsets 0, stride, ... fully inside ``image``.

    ``image`` is ``H x W`` or ``C x H x W``; patches are always ``C x S x S``.
    """
    stride = size if stride is None else stride
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ContractError(f"image must be H x W or C x H x W, got shape {img.shape}")
    H, W = img.shape[1:]
    if size < 1 or stride < 1:
        raise ContractError(f"patch size and stride must be positive, got {size}, {stride}")
    if size > min(H, W):
        raise ContractError(f"patch size {size} exceeds image extent {H}x{W}")
    out = []
    for r, y in enumerate(range(0, H - size + 1, stride)):
        for c, x in enumerate(range(0, W - size + 1, stride)):
            out.append(PatchRecord(img[:, y : y + size, x : x + size].copy(), label, sample_id, location, (r, c)))
    return out


def patch_count(H: int, W: int, size: int, stride: int) -> int:
    return ((H - size) // stride + 1) * ((W - size) // stride + 1)


# ---------------------------------------------------------------------------
# patch sets


class PatchSet:
    """Arrays of patches with labels and provenance.

    ``pixels`` is ``N x S x S`` (single channel) and ``labels`` hold levels
    1..4.  Reads through :meth:`batch` are appended to ``access_log`` so the
    training loop can be audited for test-set leakage.
    """

    def __init__(self, pixels, labels, sample_ids, locations, stats=None, name: str = "patches"):
        self.pixels = np.asarray(pixels, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.sample_ids = np.asarray(sample_ids, dtype=object)
        self.locations = np.asarray(locations, dtype=np.int64)
        self.stats = None if stats is None else np.asarray(stats, dtype=np.float64)
        self.name = name
        self.access_log: list[tuple[str, int]] = []
        n = len(self.pixels)
        if not (len(self.labels) == len(self.sample_ids) == len(self.locations) == n):
            raise ContractError("patch set arrays have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx, purpose: str = "read") -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        self.access_log.append((purpose, len(idx)))
        return self.pixels[idx], self.labels[idx]

    def subset(self, mask_or_idx, name: str | None = None) -> "PatchSet":
        idx = np.flatnonzero(mask_or_idx) if np.asarray(mask_or_idx).dtype == bool else np.asarray(mask_or_idx)
        return PatchSet(
            self.pixels[idx],
            self.labels[idx],
            self.sample_ids[idx],
            self.locations[idx],
            None if self.stats is None else self.stats[idx],
            name or self.name,
        )

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def provenance(self) -> set[tuple[str, int]]:
        return set(zip(self.sample_ids.tolist(), self.locations.tolist()))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.pixels.astype("<f8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()


def patchset_from_manifest(
    manifest: SampleManifest, prop: str, size: int, stride: int | None = None
) -> PatchSet:
    """Load every rated image, extract patches, label by the chosen property."""
    from PIL import Image

    pixels, labels, samples, locs = [], [], [], []
    for e in manifest.entries:
        if prop not in e.ratings:
            continue
        with Image.open(manifest.resolve(e)) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        for p in extract_patches(arr, size, stride, e.ratings[prop], e.sample_id, e.location):
            pixels.append(p.pixels[0])
            labels.append(p.label)
            samples.append(p.sample_id)
            locs.append(p.location)
    if not pixels:
        raise ContractError(f"manifest has no images rated for {prop!r}")
    return PatchSet(np.stack(pixels), labels, samples, locs, name=prop)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class Fold:
    index: int
    test_locations: frozenset[int]
    train_locations: frozenset[int]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]

    def __iter__(self):
        return iter(self.folds)

    def __len__(self) -> int:
        return len(self.folds)

    def split(self, patches: PatchSet, fold: Fold) -> tuple[PatchSet, PatchSet]:
        test = np.isin(patches.locations, sorted(fold.test_locations))
        train = np.isin(patches.locations, sorted(fold.train_locations))
        return patches.subset(train, "train"), patches.subset(test, "test")


def plan_folds(source) -> FoldPlan:
    """Location-based six-fold plan: fold f tests location f and trains on the other five.

    ``source`` may be a manifest, a patch set, or an iterable of locations.
    """
    if isinstance(source, SampleManifest):
        present = source.locations
    elif isinstance(source, PatchSet):
        present = set(source.locations.tolist())
    else:
        present = set(int(v) for v in source)
    missing = [loc for loc in LOCATIONS if loc not in present]
    if missing:
        raise ContractError(f"fold planning needs all six locations; missing location(s) {missing}")
    everything = frozenset(LOCATIONS)
    return FoldPlan(tuple(Fold(loc, frozenset({loc}), everything - {loc}) for loc in LOCATIONS))


# ---------------------------------------------------------------------------
# augmentation and public-dataset style preparation


def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[..., ::-1].copy()


def augment(patch: PatchRecord, rng: np.random.Generator) -> PatchRecord:
    """Horizontal mirror with probability 0.5; label and provenance untouched."""
    if rng.random() < 0.5:
        return replace(patch, pixels=hflip(patch.pixels))
    return patch


def flip_batch(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Batch version of :func:`augment` on ``N x ... x W`` arrays."""
    mask = rng.random(len(pixels)) < 0.5
    out = pixels.copy()
    out[mask] = out[mask][..., ::-1]
    return out


PUBLIC_RESIZE = 256
PUBLIC_CROP = 224


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[-2:]
    if (H, W) == (size, size):
        return img.copy()
    factors = (1.0,) * (img.ndim - 2) + (size / H, size / W)
    return ndimage.zoom(img, factors, order=1, mode="nearest", grid_mode=True)


def prepare_public_style(
    image: np.ndarray, rng: np.random.Generator, return_offset: bool = False
):
    """Bilinear resize to 256x256 then a uniformly random 224x224 crop."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim < 2 or min(img.shape[-2:]) < 1:
        raise ContractError(f"image must be at least 1x1, got {img.shape}")
    big = resize_bilinear(img, PUBLIC_RESIZE)
    span = PUBLIC_RESIZE - PUBLIC_CROP + 1
    y, x = int(rng.integers(span)), int(rng.integers(span))
    crop = big[..., y : y + PUBLIC_CROP, x : x + PUBLIC_CROP]
    return (crop, (y, x)) if return_offset else crop


# ---------------------------------------------------------------------------
# synthetic graded textures


@dataclass(frozen=True)
class SynthSpec:
    """Four-level synthetic stand-in for a rated fabric property.

    ``fiber_length`` draws anti-aliased strokes whose length grows with the
    level; ``smoothness`` draws 1/f^beta noise whose exponent falls with the
    level (level 1 smoothest).  Nuisances are drawn independently of class.
    """

    property: str = "fiber_length"
    patch_size: int = 64
    per_class: int = 120  # patches per class per location
    samples_per_class: int = 2
    locations: tuple[int, ...] = LOCATIONS
    rotation_range: tuple[float, float] = (-90.0, 90.0)
    brightness_range: tuple[float, float] = (-0.1, 0.1)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    scale_range: tuple[float, float] = (1.0, 1.0)
    stroke_lengths: tuple[float, ...] = (4.0, 8.0, 14.0, 22.0)
    spectral_exponents: tuple[float, ...] = (3.0, 2.5, 2.0, 1.5)
    seed: int = 0

    def __post_init__(self):
        if self.property not in ("fiber_length", "smoothness"):
            raise ContractError(f"synthetic property must be fiber_length or smoothness, got {self.property!r}")
        object.__setattr__(self, "locations", tuple(int(v) for v in self.locations))
        for name in ("rotation_range", "brightness_range", "contrast_range", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ContractError(f"{name} must be (low, high), got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        object.__setattr__(self, "stroke_lengths", tuple(float(v) for v in self.stroke_lengths))
        object.__setattr__(self, "spectral_exponents", tuple(float(v) for v in self.spectral_exponents))
        if len(self.stroke_lengths) != 4 or any(np.diff(self.stroke_lengths) <= 0):
            raise ContractError("stroke_lengths must be 4 strictly increasing values")
        if len(self.spectral_exponents) != 4 or any(np.diff(self.spectral_exponents) >= 0):
            raise ContractError("spectral_exponents must be 4 strictly decreasing values")
        if self.patch_size < 8 or self.per_class < 1 or self.samples_per_class < 1:
            raise ContractError(f"invalid synthetic sizes in {self}")
        if self.scale_range[0] <= 0:
            raise ContractError("scale_range must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class Nuisance:
    rotation_deg: float
    brightness: float
    contrast: float
    scale: float


def _draw_nuisance(spec: SynthSpec, rng: np.random.Generator) -> Nuisance:
    return Nuisance(
        rotation_deg=float(rng.uniform(*spec.rotation_range)),
        brightness=float(rng.uniform(*spec.brightness_range)),
        contrast=float(rng.uniform(*spec.contrast_range)),
        scale=float(rng.uniform(*spec.scale_range)),
    )


_STROKE_WIDTH = 1.2
_INK_DENSITY = 0.22  # expected stroke area per pixel, level independent
_ORIENTATION_SPREAD = 25.0


def _draw_strokes(S: int, mean_length: float, scale: float, rotation_deg: float, rng) -> tuple[np.ndarray, float]:
    """Render anti-aliased segments; returns the image and the mean drawn length."""
    width = _STROKE_WIDTH * scale
    length_mu = mean_length * scale
    n = max(1, int(round(_INK_DENSITY * S * S / (length_mu * width))))
    lengths = length_mu * np.exp(rng.normal(0.0, 0.2, size=n) - 0.02)
    angles = np.deg2rad(rotation_deg + rng.normal(0.0, _ORIENTATION_SPREAD, size=n))
    centers = rng.uniform(-0.5 * length_mu, S + 0.5 * length_mu, size=(n, 2))
    canvas = np.zeros((S, S))
    half_w = 0.5 * width
    grid = np.arange(S, dtype=np.float64)
    for (cy, cx), L, th in zip(centers, lengths, angles):
        dy, dx = 0.5 * L * math.sin(th), 0.5 * L * math.cos(th)
        y0, y1 = cy - dy, cy + dy
        x0, x1 = cx - dx, cx + dx
        pad = half_w + 1.0
        r0 = max(0, int(math.floor(min(y0, y1) - pad)))
        r1 = min(S, int(math.ceil(max(y0, y1) + pad)) + 1)
        c0 = max(0, int(math.floor(min(x0, x1) - pad)))
        c1 = min(S, int(math.ceil(max(x0, x1) + pad)) + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        yy = grid[r0:r1, None] - y0
        xx = grid[None, c0:c1] - x0
        vy, vx = y1 - y0, x1 - x0
        inv = 1.0 / max(vy * vy + vx * vx, 1e-12)
        t = yy * (vy * inv) + xx * (vx * inv)
        np.minimum(np.maximum(t, 0.0, out=t), 1.0, out=t)
        dist = np.hypot(yy - t * vy, xx - t * vx)
        cover = np.minimum(np.maximum(half_w + 0.5 - dist, 0.0), 1.0)
        np.maximum(canvas[r0:r1, c0:c1], cover, out=canvas[r0:r1, c0:c1])
    return canvas, float(lengths.mean())


def _power_law_noise(S: int, beta: float, scale: float, rng) -> np.ndarray:
    m = max(8, int(round(S * scale)))
    white = rng.normal(size=(m, m))
    fy = np.fft.fftfreq(m)[:, None]
    fx = np.fft.rfftfreq(m)[None, :]
    f = np.hypot(fy, fx)
    f[0, 0] = 1.0
    amp = f ** (-beta / 2.0)
    amp[0, 0] = 0.0
    field_ = np.fft.irfft2(np.fft.rfft2(white) * amp, s=(m, m))
    if m != S:
        field_ = ndimage.zoom(field_, S / m, order=1, mode="grid-wrap", grid_mode=True)[:S, :S]
    field_ = field_ - field_.mean()
    return field_ / max(field_.std(), 1e-12)


def render_patch(spec: SynthSpec, level: int, nuisance: Nuisance, sample_gain: float, rng) -> tuple[np.ndarray, float]:
    """One synthetic patch in [0, 1] and its generator statistic."""
    S = spec.patch_size
    if spec.property == "fiber_length":
        length = spec.stroke_lengths[level - 1] * sample_gain * S / 64.0
        ink, stat = _draw_strokes(S, length, nuisance.scale, nuisance.rotation_deg, rng)
        ink = ndimage.gaussian_filter(ink, 0.6)
        img = 0.25 + 0.5 * ink + rng.normal(0.0, 0.03, size=(S, S))
    else:
        beta = spec.spectral_exponents[level - 1] * sample_gain
        img = 0.5 + 0.15 * _power_law_noise(S, beta, nuisance.scale, rng)
        if nuisance.rotation_deg:
            img = ndimage.rotate(img, nuisance.rotation_deg, reshape=False, order=1, mode="reflect")
        stat = beta
    img = 0.5 + nuisance.contrast * (img - 0.5) + nuisance.brightness
    return np.clip(img, 0.0, 1.0), stat


@dataclass
class SynthDataset:
    spec: SynthSpec
    patches: PatchSet
    nuisances: list[Nuisance]
    grid: list[tuple[int, int]]


def synth_generate(spec: SynthSpec) -> SynthDataset:
    """Deterministic graded-texture dataset.

    Every patch draws from its own stream keyed by (seed, level, location,
    index), so output depends only on the spec, never on generation order.
    """
    pixels, labels, samples, locs, stats, nuis, grid = [], [], [], [], [], [], []
    per_sample = math.ceil(spec.per_class / spec.samples_per_class)
    cols = math.ceil(math.sqrt(per_sample))
    for level in (1, 2, 3, 4):
        gains = np.random.default_rng([spec.seed, level, 0, 0, 1]).lognormal(0.0, 0.04, size=spec.samples_per_class)
        for loc in spec.locations:
            for i in range(spec.per_class):
                s = i % spec.samples_per_class
                k = i // spec.samples_per_class
                nuisance = _draw_nuisance(spec, np.random.default_rng([spec.seed, 0, loc, i, 2, level]))
                rng = np.random.default_rng([spec.seed, level, loc, i, 3])
                img, stat = render_patch(spec, level, nuisance, float(gains[s]), rng)
                pixels.append(img)
                labels.append(level)
                samples.append(f"L{level}S{s + 1}")
                locs.append(loc)
                stats.append(stat)
                nuis.append(nuisance)
                grid.append((k // cols, k % cols))
    ps = PatchSet(np.stack(pixels), labels, samples, locs, stats, name=spec.property)
    return SynthDataset(spec, ps, nuis, grid)


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    """Binary 8-bit portable graymap."""
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    H, W = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_synth_dataset(ds: SynthDataset, out: Path) -> SampleManifest:
    """Persist patches as PGM files plus manifest.csv and an index CSV with nuisances."""
    out = Path(out)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    ps = ds.patches
    with (out / "index.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "sample_id", "location", "level", "grid_row", "grid_col", "statistic",
                    "rotation_deg", "brightness", "contrast", "scale"])
        for i in range(len(ps)):
            rel = f"images/{ps.sample_ids[i]}_loc{ps.locations[i]}_{i:05d}.pgm"
            write_pgm(out / rel, ps.pixels[i])
            n = ds.nuisances[i]
            w.writerow([rel, ps.sample_ids[i], ps.locations[i], ps.labels[i], *ds.grid[i],
                        f"{ps.stats[i]:.6f}", f"{n.rotation_deg:.6f}", f"{n.brightness:.6f}",
                        f"{n.contrast:.6f}", f"{n.scale:.6f}"])
            entries.append(
                ManifestEntry(rel, str(ps.sample_ids[i]), int(ps.locations[i]), ratings={ds.spec.property: int(ps.labels[i])})
            )
    manifest = SampleManifest(entries, out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterable[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def standardize(pixels: np.ndarray) -> np.ndarray:
    """Per-patch zero mean, unit variance (constant patches map to zeros)."""
    x = np.asarray(pixels, dtype=np.float64)
    axes = tuple(range(x.ndim - 2, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    sd = x.std(axis=axes, keepdims=True)
    return (x - mu) / np.maximum(sd, 1e-6)


def summarize_counts(ps: PatchSet) -> dict[int, int]:
    levels, counts = np.unique(ps.labels, return_counts=True)
    return dict(zip(levels.tolist(), counts.tolist()))


def manifest_locations(entries: Sequence[ManifestEntry]) -> list[int]:
    return sorted({e.location for e in entries})
