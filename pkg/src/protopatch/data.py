"""Patch dataset pipeline: ingestion, extraction, standardization, splits, views.

Full-resolution images are cut into fixed-size patches that carry provenance
back to their source image. Splits are assigned at image granularity so that
patches from one image never straddle the train/test boundary. Patch pixels
are served through PatchSource accessors, which lets large corpora stay lazy
(crops are taken on demand) instead of being materialized up front.
"""

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ._util import rng_from, stable_u64

logger = logging.getLogger(__name__)

CLASS_KEYS = ("WW", "WD", "UA", "STR", "BRU", "CYS")
VIEWS = ("SUR", "SEC")
MANIFEST_VIEWS = ("SUR", "SEC", "MIX")
PATCH_SIZE = 256

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

PACKED_MAGIC = b"PSC1"
_PACKED_HEADER = struct.Struct("<4sIIII")


@dataclass
class SourceImage:
    """One full-resolution RGB image with its class and view labels."""

    image_id: str
    class_key: str
    view: str
    pixels: np.ndarray  # H x W x 3 uint8

    def __post_init__(self):
        if self.class_key not in CLASS_KEYS:
            raise ValueError(f"unknown class key {self.class_key!r}")
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}")
        h, w = self.pixels.shape[:2]
        if h < PATCH_SIZE or w < PATCH_SIZE:
            raise ValueError(
                f"image {self.image_id} is {h}x{w}; both sides must be >= {PATCH_SIZE}"
            )


@dataclass
class PatchRecord:
    """One square patch cut from a source image.

    pixels may be None for metadata-only records; the actual array is then
    recovered through a PatchSource using origin + source_image_id.
    """

    patch_id: str
    source_image_id: str
    class_key: str
    view: str
    origin: tuple  # (row, col) of the top-left crop corner
    standardized: bool = False
    pixels: np.ndarray | None = None


@dataclass
class ChannelStats:
    """Per-channel mean and population standard deviation of raw patch pixels."""

    mean: np.ndarray  # (3,)
    std: np.ndarray  # (3,), all > 0
    scope: str = ""
    n_pixels: int = 0  # pixels per channel that produced the stats

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (3,) or self.std.shape != (3,):
            raise ValueError("channel stats must have 3 components")
        if not np.all(self.std > 0):
            raise ValueError("channel std must be positive")


@dataclass
class SplitAssignment:
    """Train/test assignment at image granularity, echoed per patch."""

    by_image: dict  # image_id -> "train" | "test"
    by_patch: dict  # patch_id -> "train" | "test"


@dataclass
class DatasetManifest:
    """Records of one view plus their split assignment and channel stats."""

    records: list
    view: str
    split: dict  # patch_id -> "train" | "test"
    channel_stats: ChannelStats | None = None
    seed: int = 0

    def __post_init__(self):
        if self.view not in MANIFEST_VIEWS:
            raise ValueError(f"unknown manifest view {self.view!r}")
        record_ids = {r.patch_id for r in self.records}
        if len(record_ids) != len(self.records):
            raise ValueError("duplicate patch ids in manifest")
        if set(self.split) != record_ids:
            raise ValueError("split must cover every patch id exactly once")
        bad = set(self.split.values()) - {"train", "test"}
        if bad:
            raise ValueError(f"invalid split labels: {sorted(bad)}")

    def record(self, patch_id: str) -> PatchRecord:
        return self._by_id[patch_id]

    @property
    def _by_id(self) -> dict:
        if not hasattr(self, "_by_id_cache"):
            self._by_id_cache = {r.patch_id: r for r in self.records}
        return self._by_id_cache

    def ids(self, split: str | None = None) -> list:
        """Patch ids in record order, optionally restricted to one split."""
        if split is None:
            return [r.patch_id for r in self.records]
        return [r.patch_id for r in self.records if self.split[r.patch_id] == split]

    def ids_by_class(self, split: str | None = None) -> dict:
        out: dict = {}
        for r in self.records:
            if split is None or self.split[r.patch_id] == split:
                out.setdefault(r.class_key, []).append(r.patch_id)
        return {k: sorted(v) for k, v in sorted(out.items())}

    def class_counts(self, split: str | None = None) -> dict:
        return {k: len(v) for k, v in self.ids_by_class(split).items()}

    def train_scope(self) -> str:
        return f"{self.view}:train:seed={self.seed}"


# ---------------------------------------------------------------------------
# ingestion


def ingest_images(root_path, view: str) -> list:
    """Load every decodable image under <root>/<view>/<class_key>/.

    Files are visited in lexicographic path order. Unknown class directories
    are a hard error; unreadable files are logged and skipped.
    """
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    view_dir = Path(root_path) / view
    if not view_dir.is_dir():
        logger.warning("view directory %s does not exist", view_dir)
        return []

    images = []
    class_dirs = sorted(p for p in view_dir.iterdir() if p.is_dir())
    for class_dir in class_dirs:
        class_key = class_dir.name
        if class_key not in CLASS_KEYS:
            raise ValueError(f"unknown class directory {class_dir}")
        for path in sorted(class_dir.iterdir()):
            if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(path) as im:
                    pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
            except (UnidentifiedImageError, OSError) as exc:
                logger.warning("skipping unreadable image %s: %s", path, exc)
                continue
            if min(pixels.shape[:2]) < PATCH_SIZE:
                logger.warning("skipping undersized image %s: %s", path, pixels.shape)
                continue
            image_id = f"{view}/{class_key}/{path.name}"
            images.append(SourceImage(image_id, class_key, view, pixels))
    if not images:
        logger.warning("no images ingested from %s", view_dir)
    return images


# ---------------------------------------------------------------------------
# patch extraction


def extract_patches(
    images,
    per_class_quota: int,
    patch_size: int = PATCH_SIZE,
    seed: int = 0,
    materialize: bool = True,
) -> list:
    """Cut per_class_quota random patches per class from the given images.

    The quota is spread across a class's images as evenly as integer division
    allows, with the remainder going to the lexicographically first image ids.
    Crop origins come from a per-image RNG derived from (seed, image_id), so
    the result does not depend on iteration or scheduling order.
    """
    if per_class_quota < 1:
        raise ValueError("per_class_quota must be >= 1")
    by_class: dict = {}
    for img in images:
        by_class.setdefault(img.class_key, []).append(img)
    if not by_class:
        raise ValueError("no images supplied, no class has any image")
    for class_key, imgs in sorted(by_class.items()):
        if not imgs:
            raise ValueError(f"class {class_key} has zero images")

    records = []
    for class_key, imgs in sorted(by_class.items()):
        imgs = sorted(imgs, key=lambda im: im.image_id)
        base, rem = divmod(per_class_quota, len(imgs))
        for i, img in enumerate(imgs):
            count = base + (1 if i < rem else 0)
            if count == 0:
                continue
            h, w = img.pixels.shape[:2]
            if h < patch_size or w < patch_size:
                raise ValueError(
                    f"image {img.image_id} is {h}x{w}, smaller than patch size {patch_size}"
                )
            rng = rng_from(seed, "crop", img.image_id)
            ys = rng.integers(0, h - patch_size + 1, size=count)
            xs = rng.integers(0, w - patch_size + 1, size=count)
            for k in range(count):
                y, x = int(ys[k]), int(xs[k])
                pixels = None
                if materialize:
                    pixels = img.pixels[y : y + patch_size, x : x + patch_size].copy()
                records.append(
                    PatchRecord(
                        patch_id=f"{img.image_id}#p{k:04d}",
                        source_image_id=img.image_id,
                        class_key=class_key,
                        view=img.view,
                        origin=(y, x),
                        pixels=pixels,
                    )
                )
    return records


# ---------------------------------------------------------------------------
# channel statistics and standardization


def compute_channel_stats(patches, raw_lookup=None, scope: str = "") -> ChannelStats:
    """Per-channel mean and population std over all pixels of all patches.

    Accepts metadata-only records when raw_lookup maps patch_id to its raw
    array. Integer pixel sums are accumulated exactly in int64.
    """
    patches = list(patches)
    if not patches:
        raise ValueError("cannot compute channel stats of an empty patch set")
    total = np.zeros(3, dtype=np.int64)
    total_sq = np.zeros(3, dtype=np.int64)
    n = 0
    for rec in patches:
        if rec.standardized:
            raise ValueError(f"patch {rec.patch_id} is already standardized")
        px = rec.pixels if rec.pixels is not None else raw_lookup(rec.patch_id)
        flat = px.reshape(-1, px.shape[-1]).astype(np.int64)
        total += flat.sum(axis=0)
        total_sq += (flat * flat).sum(axis=0)
        n += flat.shape[0]
    mean = total / n
    var = total_sq / n - mean**2
    if np.any(var <= 0):
        raise ValueError("zero-variance channel: degenerate corpus")
    return ChannelStats(mean=mean, std=np.sqrt(var), scope=scope, n_pixels=n)


def standardize(patch: PatchRecord, stats: ChannelStats) -> PatchRecord:
    """Return a copy of the patch with pixels mapped to (x - mean) / std."""
    if patch.standardized:
        raise ValueError(f"patch {patch.patch_id} is already standardized")
    if patch.pixels is None:
        raise ValueError(f"patch {patch.patch_id} has no materialized pixels")
    scaled = (patch.pixels.astype(np.float64) - stats.mean) / stats.std
    return dataclasses.replace(patch, pixels=scaled, standardized=True)


# ---------------------------------------------------------------------------
# splitting


def split_by_image(patches, train_fraction: float, seed: int = 0) -> SplitAssignment:
    """Assign whole images to train or test, targeting a patch fraction.

    Per class, images are shuffled with a seeded RNG and the prefix whose
    cumulative patch mass lands closest to train_fraction of the class total
    becomes the train side. Both sides stay nonempty, so a class needs at
    least two source images.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    patches = list(patches)
    if not patches:
        raise ValueError("cannot split an empty patch set")

    class_images: dict = {}
    for rec in patches:
        counts = class_images.setdefault(rec.class_key, {})
        counts[rec.source_image_id] = counts.get(rec.source_image_id, 0) + 1

    by_image = {}
    for class_key, counts in sorted(class_images.items()):
        image_ids = sorted(counts)
        if len(image_ids) < 2:
            raise ValueError(
                f"class {class_key} has a single source image; "
                "cannot keep train and test image-exclusive and nonempty"
            )
        rng = rng_from(seed, "split", class_key)
        order = [image_ids[i] for i in rng.permutation(len(image_ids))]
        masses = np.array([counts[i] for i in order], dtype=np.int64)
        cumulative = np.cumsum(masses)
        target = train_fraction * cumulative[-1]
        # prefix lengths 1..n-1 keep both sides nonempty
        k = 1 + int(np.argmin(np.abs(cumulative[:-1] - target)))
        for i, image_id in enumerate(order):
            by_image[image_id] = "train" if i < k else "test"

    by_patch = {rec.patch_id: by_image[rec.source_image_id] for rec in patches}
    return SplitAssignment(by_image=by_image, by_patch=by_patch)


# ---------------------------------------------------------------------------
# view composition


def build_view(sur: DatasetManifest, sec: DatasetManifest) -> DatasetManifest:
    """Combine a SUR and a SEC manifest into the MIX manifest.

    Record sets are unioned, split labels are preserved, and the MIX channel
    stats are pooled exactly from the two input stats.
    """
    if not sur.records or not sec.records:
        raise ValueError("both views must be nonempty to build MIX")
    collision = {r.patch_id for r in sur.records} & {r.patch_id for r in sec.records}
    if collision:
        raise ValueError(f"patch id collision between views: {sorted(collision)[:3]}")

    stats = None
    if sur.channel_stats is not None and sec.channel_stats is not None:
        stats = _pool_stats(sur.channel_stats, sec.channel_stats)
    seed = stable_u64(f"MIX:{sur.seed}:{sec.seed}") % (2**31)
    mix = DatasetManifest(
        records=[dataclasses.replace(r) for r in sur.records + sec.records],
        view="MIX",
        split={**sur.split, **sec.split},
        channel_stats=stats,
        seed=seed,
    )
    if stats is not None:
        stats.scope = mix.train_scope()
    return mix


def _pool_stats(a: ChannelStats, b: ChannelStats) -> ChannelStats:
    """Exact mean/std of the union from per-part (mean, std, pixel count)."""
    if a.n_pixels <= 0 or b.n_pixels <= 0:
        raise ValueError("pooling requires pixel counts in both stats")
    n = a.n_pixels + b.n_pixels
    mean = (a.n_pixels * a.mean + b.n_pixels * b.mean) / n
    second = (
        a.n_pixels * (a.std**2 + a.mean**2) + b.n_pixels * (b.std**2 + b.mean**2)
    ) / n
    var = second - mean**2
    return ChannelStats(mean=mean, std=np.sqrt(var), n_pixels=n)


# ---------------------------------------------------------------------------
# synthetic corpus


def gen_synthetic_dataset(
    n_classes: int,
    images_per_class: int,
    image_size: int = 288,
    separability: float = 1.0,
    seed: int = 0,
    view: str = "SUR",
) -> list:
    """Render a textured-noise corpus with class-specific color signatures.

    Every class gets a color offset and a sinusoidal texture whose strength
    scales with separability; at separability 0 all classes share the same
    pixel distribution. Per-image RNGs are derived from the seed, the view,
    the class and the image index, so output is byte-identical per seed.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_classes > len(CLASS_KEYS):
        raise ValueError(f"at most {len(CLASS_KEYS)} classes are supported")
    if images_per_class < 1:
        raise ValueError("need at least 1 image per class")
    if separability < 0:
        raise ValueError("separability must be >= 0")
    if image_size < PATCH_SIZE:
        raise ValueError(f"image_size must be >= {PATCH_SIZE}")

    sig_rng = rng_from(seed, "signatures")
    directions = sig_rng.normal(size=(n_classes, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    frequencies = sig_rng.integers(1, 5, size=(n_classes, 2))

    images = []
    grid = np.arange(image_size, dtype=np.float64) / image_size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    for c in range(n_classes):
        class_key = CLASS_KEYS[c]
        color = 128.0 + separability * 28.0 * directions[c]
        fy, fx = frequencies[c]
        for i in range(images_per_class):
            rng = rng_from(seed, view, class_key, i)
            phase = rng.uniform(0, 2 * np.pi)
            texture = separability * 18.0 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
            noise = rng.normal(0.0, 12.0, size=(image_size, image_size, 3))
            raw = color[None, None, :] + texture[:, :, None] + noise
            pixels = np.clip(np.rint(raw), 0, 255).astype(np.uint8)
            image_id = f"{view}/{class_key}/synth{i:03d}.png"
            images.append(SourceImage(image_id, class_key, view, pixels))
    return images


def write_synthetic_corpus(root_path, images) -> int:
    """Write SourceImages as PNG files in the ingestible directory layout."""
    root = Path(root_path)
    written = 0
    for img in images:
        path = root / img.image_id
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img.pixels).save(path)
        written += 1
    return written


# ---------------------------------------------------------------------------
# patch sources


class PatchSource:
    """Serves patch pixel arrays by patch id."""

    def raw(self, patch_id: str) -> np.ndarray:
        raise NotImplementedError

    def standardized(self, patch_id: str) -> np.ndarray:
        raise NotImplementedError

    def batch(self, patch_ids) -> np.ndarray:
        """Stack standardized patches into a float32 (B, H, W, 3) array."""
        return np.stack(
            [self.standardized(pid).astype(np.float32) for pid in patch_ids]
        )


class CropPatchSource(PatchSource):
    """Crops patches on demand from retained source images."""

    def __init__(self, records, images, stats: ChannelStats | None = None,
                 patch_size: int = PATCH_SIZE):
        self.records = {r.patch_id: r for r in records}
        if hasattr(images, "__getitem__") and not isinstance(images, (list, tuple)):
            self.images = images  # dict or any id-keyed lazy mapping
        else:
            self.images = {im.image_id: im for im in images}
        self.stats = stats
        self.patch_size = patch_size

    @classmethod
    def for_manifest(cls, manifest: DatasetManifest, images,
                     patch_size: int = PATCH_SIZE) -> "CropPatchSource":
        stats = manifest.channel_stats
        if stats is not None and stats.scope != manifest.train_scope():
            raise ValueError(
                f"channel stats scope {stats.scope!r} does not match "
                f"the manifest train split {manifest.train_scope()!r}"
            )
        return cls(manifest.records, images, stats, patch_size)

    def raw(self, patch_id: str) -> np.ndarray:
        rec = self.records[patch_id]
        img = self.images[rec.source_image_id]
        y, x = rec.origin
        return img.pixels[y : y + self.patch_size, x : x + self.patch_size]

    def standardized(self, patch_id: str) -> np.ndarray:
        if self.stats is None:
            raise ValueError("source has no channel stats to standardize with")
        raw = self.raw(patch_id).astype(np.float64)
        return (raw - self.stats.mean) / self.stats.std


class ArrayPatchSource(PatchSource):
    """Serves patches whose pixels were materialized in the records."""

    def __init__(self, records, stats: ChannelStats | None = None):
        self.records = {r.patch_id: r for r in records}
        self.stats = stats

    def raw(self, patch_id: str) -> np.ndarray:
        rec = self.records[patch_id]
        if rec.pixels is None:
            raise ValueError(f"patch {patch_id} has no materialized pixels")
        if rec.standardized:
            raise ValueError(f"patch {patch_id} holds standardized pixels")
        return rec.pixels

    def standardized(self, patch_id: str) -> np.ndarray:
        rec = self.records[patch_id]
        if rec.pixels is None:
            raise ValueError(f"patch {patch_id} has no materialized pixels")
        if rec.standardized:
            return rec.pixels
        if self.stats is None:
            raise ValueError("source has no channel stats to standardize with")
        return (rec.pixels.astype(np.float64) - self.stats.mean) / self.stats.std


class ImageFolder:
    """Dict-like lazy loader mapping image ids back to corpus files.

    image ids are relative paths under the corpus root, so a manifest can be
    re-cropped in a later process without holding every image in memory.
    """

    def __init__(self, root_path):
        self.root = Path(root_path)
        self._cache: dict = {}

    def __getitem__(self, image_id: str) -> SourceImage:
        if image_id not in self._cache:
            path = self.root / image_id
            view, class_key = image_id.split("/")[:2]
            with Image.open(path) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
            self._cache[image_id] = SourceImage(image_id, class_key, view, pixels)
        return self._cache[image_id]


class PackedPatchSource(PatchSource):
    """Memory-mapped reader for the packed standardized patch file."""

    def __init__(self, manifest: DatasetManifest, path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            header = fh.read(_PACKED_HEADER.size)
        magic, n, h, w, c = _PACKED_HEADER.unpack(header)
        if magic != PACKED_MAGIC:
            raise ValueError(f"{self.path} is not a packed patch file")
        if n != len(manifest.records):
            raise ValueError(
                f"packed file holds {n} records, manifest has {len(manifest.records)}"
            )
        self._index = {r.patch_id: i for i, r in enumerate(manifest.records)}
        self._data = np.memmap(
            self.path, dtype="<f4", mode="r", offset=_PACKED_HEADER.size,
            shape=(n, h, w, c),
        )

    def raw(self, patch_id: str) -> np.ndarray:
        raise ValueError("packed files store standardized pixels only")

    def standardized(self, patch_id: str) -> np.ndarray:
        return np.asarray(self._data[self._index[patch_id]])


# ---------------------------------------------------------------------------
# pipeline helper


def build_manifest(
    images,
    per_class_quota: int,
    train_fraction: float = 0.8,
    seed: int = 0,
    patch_size: int = PATCH_SIZE,
) -> tuple:
    """Run extraction, splitting and train-split stats; return (manifest, source).

    Patches stay lazy: the returned CropPatchSource crops and standardizes on
    demand using stats computed from train-split patches only.
    """
    images = list(images)
    if not images:
        raise ValueError("no images to build a manifest from")
    views = {im.view for im in images}
    if len(views) != 1:
        raise ValueError(f"images span multiple views: {sorted(views)}")
    view = views.pop()

    records = extract_patches(images, per_class_quota, patch_size, seed, materialize=False)
    assignment = split_by_image(records, train_fraction, seed)
    manifest = DatasetManifest(
        records=records, view=view, split=assignment.by_patch, seed=seed
    )
    bare = CropPatchSource(records, images, stats=None, patch_size=patch_size)
    train_records = [r for r in records if assignment.by_patch[r.patch_id] == "train"]
    manifest.channel_stats = compute_channel_stats(
        train_records, raw_lookup=bare.raw, scope=manifest.train_scope()
    )
    return manifest, CropPatchSource.for_manifest(manifest, images, patch_size)


# ---------------------------------------------------------------------------
# persistence


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write the manifest as JSON: records, splits, channel stats, seed."""
    stats = manifest.channel_stats
    doc = {
        "format": "manifest-v1",
        "view": manifest.view,
        "seed": manifest.seed,
        "channel_stats": None
        if stats is None
        else {
            "mean": stats.mean.tolist(),
            "std": stats.std.tolist(),
            "scope": stats.scope,
            "n_pixels": stats.n_pixels,
        },
        "records": [
            {
                "patch_id": r.patch_id,
                "source_image_id": r.source_image_id,
                "class_key": r.class_key,
                "view": r.view,
                "origin": list(r.origin),
                "standardized": r.standardized,
                "split": manifest.split[r.patch_id],
            }
            for r in manifest.records
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_manifest(path) -> DatasetManifest:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "manifest-v1":
        raise ValueError(f"{path} is not a manifest file")
    records, split = [], {}
    for entry in doc["records"]:
        records.append(
            PatchRecord(
                patch_id=entry["patch_id"],
                source_image_id=entry["source_image_id"],
                class_key=entry["class_key"],
                view=entry["view"],
                origin=tuple(entry["origin"]),
                standardized=entry["standardized"],
            )
        )
        split[entry["patch_id"]] = entry["split"]
    stats = None
    if doc["channel_stats"] is not None:
        s = doc["channel_stats"]
        stats = ChannelStats(
            mean=np.array(s["mean"]), std=np.array(s["std"]),
            scope=s["scope"], n_pixels=s["n_pixels"],
        )
    return DatasetManifest(
        records=records, view=doc["view"], split=split,
        channel_stats=stats, seed=doc["seed"],
    )


def write_patches_packed(manifest: DatasetManifest, source: PatchSource, path) -> None:
    """Write all patches as standardized little-endian float32, record order."""
    if not manifest.records:
        raise ValueError("manifest has no records to pack")
    first = source.standardized(manifest.records[0].patch_id)
    h, w, c = first.shape
    with open(path, "wb") as fh:
        fh.write(_PACKED_HEADER.pack(PACKED_MAGIC, len(manifest.records), h, w, c))
        for rec in manifest.records:
            arr = source.standardized(rec.patch_id).astype("<f4")
            fh.write(arr.tobytes())


def save_patches_png(manifest: DatasetManifest, source: PatchSource, out_dir) -> int:
    """Write raw patches as lossless PNG files, one per record."""
    out = Path(out_dir)
    written = 0
    for rec in manifest.records:
        raw = np.asarray(source.raw(rec.patch_id), dtype=np.uint8)
        name = rec.patch_id.replace("/", "_").replace("#", "_") + ".png"
        path = out / rec.class_key
        path.mkdir(parents=True, exist_ok=True)
        Image.fromarray(raw).save(path / name)
        written += 1
    return written
