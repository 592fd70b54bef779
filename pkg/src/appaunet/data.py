"""Chest X-ray dataset ingestion, preprocessing, splits and a synthetic lung dataset.

On-disk layout, one directory per dataset under a common root::

    <root>/MCX/images/MCUCXR_0001_0.png
    <root>/MCX/masks/left/MCUCXR_0001_0.png     # left/right masks are unioned
    <root>/MCX/masks/right/MCUCXR_0001_0.png
    <root>/SCX/images/CHNCXR_0001_0.png
    <root>/SCX/masks/CHNCXR_0001_0_mask.png     # "<stem>.ext" or "<stem>_mask.ext"
    <root>/SCX/manifest.txt                     # curated subset, required
    <root>/JCX/images/JPCLN001.IMG              # raw 12-bit big-endian, or any PIL format
    <root>/JCX/masks/left/JPCLN001.gif

CCX is assembled from the three sources above. ``manifest.txt`` lists one
``source_id`` per line, optionally followed by a tab and a split tag
(``train``/``val``/``test``).
"""
from __future__ import annotations

import hashlib
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F


DATA_ROOT_ENV = "APPAUNET_DATA"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".gif", ".bmp", ".tif", ".tiff", ".img")
SPLITS = ("train", "val", "test")


class DatasetError(RuntimeError):
    pass


class ManifestError(DatasetError):
    pass


@dataclass
class Sample:
    image: np.ndarray                    # (m, m) float32 in [0, 1]
    mask: Optional[np.ndarray] = None    # (m, m) uint8 in {0, 1}
    class_label: Optional[int] = None
    source_id: str = ""

    def __post_init__(self):
        if self.image.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {self.image.shape}")
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise ValueError(f"mask shape {self.mask.shape} != image shape {self.image.shape}")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    classes: tuple
    split_sizes: Optional[tuple] = None   # (train, val, test)
    root: Optional[str] = None

    @property
    def total(self) -> Optional[int]:
        return sum(self.split_sizes) if self.split_sizes else None


DATASETS = {
    "MCX": DatasetSpec("MCX", ("normal", "TB"), (93, 10, 35)),
    "SCX": DatasetSpec("SCX", ("normal", "TB"), (355, 40, 132)),
    "JCX": DatasetSpec("JCX", ("normal", "nodule"), (166, 19, 62)),
    "CCX": DatasetSpec("CCX", ("normal", "TB", "nodule"), (615, 69, 228)),
    "SYNTH": DatasetSpec("SYNTH", ("normal", "abnormal")),
}

# per-class sizes after curation, used to cross-check what was found on disk
CLASS_COUNTS = {
    "MCX": {"normal": 80, "TB": 58},
    "SCX": {"normal": 248, "TB": 279},
    "JCX": {"normal": 93, "nodule": 154},
    "CCX": {"normal": 421, "TB": 337, "nodule": 154},
}


def get_spec(name: str, root: Union[str, Path, None] = None) -> DatasetSpec:
    try:
        spec = DATASETS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; expected one of {', '.join(DATASETS)}") from None
    if root is None:
        root = os.environ.get(DATA_ROOT_ENV)
    return DatasetSpec(spec.name, spec.classes, spec.split_sizes, None if root is None else str(root))


# --------------------------------------------------------------------------
# preprocessing


def preprocess(image, mask=None, size: int = 128, source_id: str = "", class_label=None) -> Sample:
    """Min-max normalize and bilinear-resize an image; nearest-resize and re-binarize a mask."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0:
        warnings.warn(f"constant image {source_id or ''} normalized to zeros", stacklevel=2)
        img = np.zeros_like(img)
    else:
        img = (img - lo) / (hi - lo)
    t = torch.from_numpy(img)[None, None]
    if t.shape[-2:] != (size, size):
        antialias = t.shape[-1] > size or t.shape[-2] > size
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=antialias)
    out_img = t[0, 0].clamp(0, 1).numpy().astype(np.float32)

    out_mask = None
    if mask is not None:
        mk = np.asarray(mask, dtype=np.float64)
        if mk.ndim == 3:
            mk = mk.max(axis=-1)
        if mk.max() > 1:
            mk = mk / mk.max()
        mt = torch.from_numpy(mk)[None, None]
        if mt.shape[-2:] != (size, size):
            mt = F.interpolate(mt, size=(size, size), mode="nearest")
        out_mask = (mt[0, 0] >= 0.5).numpy().astype(np.uint8)
    return Sample(out_img, out_mask, class_label, source_id)


def downsample_mask(mask, factor: int):
    """Average-pool by ``factor`` and threshold at 0.5 (a half-covered cell counts as ROI).

    Accepts a tensor of shape (..., H, W) or a numpy array and returns the same kind.
    """
    if factor not in (1, 2, 4, 8):
        raise ValueError(f"factor must be one of 1, 2, 4, 8, got {factor}")
    is_numpy = isinstance(mask, np.ndarray)
    t = torch.as_tensor(mask)
    h, w = t.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide mask size {h}x{w}")
    if factor == 1:
        return mask
    dtype = t.dtype if t.is_floating_point() else torch.float32
    lead = t.shape[:-2]
    pooled = F.avg_pool2d(t.reshape(-1, 1, h, w).to(dtype), factor)
    out = (pooled >= 0.5).to(dtype).reshape(*lead, h // factor, w // factor)
    if is_numpy:
        return out.numpy().astype(mask.dtype)
    return out


# --------------------------------------------------------------------------
# splits


def split_counts(n: int) -> tuple:
    """75:25 train+val/test, then 10% of the train portion for validation (halves round up)."""
    test = int(math.floor(0.25 * n + 0.5))
    val = int(math.floor(0.1 * (n - test) + 0.5))
    return n - val - test, val, test


def _largest_remainder(total: int, weights: Sequence[int]) -> list:
    s = sum(weights)
    if s == 0:
        return [0] * len(weights)
    quotas = [total * w / s for w in weights]
    alloc = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def _strata(samples: Sequence[Sample]) -> dict:
    groups: dict = {}
    for i, s in enumerate(samples):
        key = -1 if s.class_label is None else int(s.class_label)
        groups.setdefault(key, []).append(i)
    return dict(sorted(groups.items()))


def stratified_split(samples: Sequence[Sample], sizes: Sequence[int], seed: int = 0):
    """Seeded, class-stratified partition into groups of exactly ``sizes``."""
    if sum(sizes) != len(samples):
        raise DatasetError(f"split sizes {tuple(sizes)} do not cover {len(samples)} samples")
    rng = np.random.default_rng(seed)
    groups = _strata(samples)
    keys = list(groups)
    remaining = {k: list(rng.permutation(groups[k])) for k in keys}
    parts = []
    # allocate the smaller splits first; train takes what is left
    for size in reversed(sizes[1:]):
        alloc = _largest_remainder(size, [len(remaining[k]) for k in keys])
        chosen = []
        for k, n in zip(keys, alloc):
            chosen.extend(remaining[k][:n])
            remaining[k] = remaining[k][n:]
        parts.append(sorted(int(i) for i in chosen))
    train = sorted(int(i) for k in keys for i in remaining[k])
    idx_parts = [train] + parts[::-1]
    return tuple([samples[i] for i in part] for part in idx_parts)


# --------------------------------------------------------------------------
# file reading


def read_image(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".img":
        return read_jsrt_raw(path)
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P", "LA"):
            im = im.convert("L")
        return np.asarray(im).astype(np.float64)


def read_jsrt_raw(path: Union[str, Path]) -> np.ndarray:
    """JSRT raw image: square, 16-bit big-endian container holding 12-bit values."""
    data = np.fromfile(path, dtype=">u2")
    side = int(round(math.sqrt(data.size)))
    if side * side != data.size:
        raise DatasetError(f"{path}: raw image is not square ({data.size} pixels)")
    return data.reshape(side, side).astype(np.float64)


def _index_files(directory: Path) -> dict:
    if not directory.is_dir():
        return {}
    return {
        p.stem: p for p in sorted(directory.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    }


def _mask_index(dataset_dir: Path) -> dict:
    masks_dir = dataset_dir / "masks"
    return {sub: _index_files(masks_dir / sub) for sub in ("left", "right", "")}


def _find_mask(dataset_dir: Path, stem: str, index: Optional[dict] = None) -> Optional[np.ndarray]:
    """Mask for ``stem``: the union of masks/left and masks/right, else masks/ itself."""
    index = index if index is not None else _mask_index(dataset_dir)
    parts = []
    for subs in (("left", "right"), ("",)):
        for sub in subs:
            files = index[sub]
            for key in (stem, f"{stem}_mask"):
                if key in files:
                    parts.append(read_image(files[key]))
                    break
        if parts:
            break
    if not parts:
        return None
    out = np.zeros_like(parts[0], dtype=np.uint8)
    for p in parts:
        if p.shape != out.shape:
            raise DatasetError(f"{stem}: left/right masks differ in shape")
        out |= (p > 0).astype(np.uint8)
    return out


def class_from_name(dataset: str, stem: str) -> int:
    """Class index from the source file naming convention of each dataset."""
    dataset = dataset.upper()
    if dataset == "JCX":
        if stem.upper().startswith("JPCLN"):
            return 1
        if stem.upper().startswith("JPCNN"):
            return 0
        raise DatasetError(f"JCX file {stem!r} is neither JPCLN* nor JPCNN*")
    tail = stem.rsplit("_", 1)[-1]
    if tail not in ("0", "1"):
        raise DatasetError(f"{dataset} file {stem!r} lacks a _0/_1 class suffix")
    return int(tail)


def read_manifest(path: Union[str, Path]) -> dict:
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t") if "\t" in line else line.split()
        sid = fields[0]
        tag = fields[1] if len(fields) > 1 else None
        if tag is not None and tag not in SPLITS and tag != "-":
            raise ManifestError(f"{path}:{lineno}: unknown split tag {tag!r}")
        entries[sid] = None if tag == "-" else tag
    return entries


def write_manifest(path: Union[str, Path], entries: dict) -> None:
    lines = [f"{sid}\t{entries[sid] or '-'}" for sid in sorted(entries)]
    Path(path).write_text("\n".join(lines) + "\n")


def _load_dir(name: str, dataset_dir: Path, size: int, manifest: Optional[dict]) -> list:
    images = _index_files(dataset_dir / "images")
    if not images:
        raise DatasetError(f"no images found under {dataset_dir / 'images'}")
    stems = sorted(images)
    if manifest is not None:
        missing = sorted(set(manifest) - set(images))
        if missing:
            raise ManifestError(f"{name}: manifest lists {len(missing)} ids without images, e.g. {missing[:3]}")
        stems = [s for s in stems if s in manifest]
    index = _mask_index(dataset_dir)
    samples = []
    for stem in stems:
        try:
            raw = read_image(images[stem])
        except DatasetError:
            raise
        except Exception as exc:
            raise DatasetError(f"cannot read {images[stem]}: {exc}") from exc
        mask = _find_mask(dataset_dir, stem, index)
        if mask is None:
            raise DatasetError(f"{name}: no mask found for {stem}")
        if mask.shape != raw.shape[:2]:
            mk = torch.from_numpy(mask.astype(np.float64))[None, None]
            mask = F.interpolate(mk, size=raw.shape[:2], mode="nearest")[0, 0].numpy()
        samples.append(preprocess(raw, mask, size, f"{name}/{stem}", class_from_name(name, stem)))
    return samples


def _check_class_counts(name: str, samples: Sequence[Sample], classes: Sequence[str]) -> None:
    expected = CLASS_COUNTS.get(name)
    if expected is None:
        return
    got = {c: 0 for c in classes}
    for s in samples:
        got[classes[s.class_label]] += 1
    if got != expected:
        raise ManifestError(f"{name}: class counts {got} do not match expected {expected}")


def _partition(name, samples, sizes, seed, manifest):
    tags = {s.source_id.split("/", 1)[1]: None for s in samples}
    if manifest:
        tags.update({k: v for k, v in manifest.items() if k in tags})
    if all(tags.values()):
        parts = {t: [] for t in SPLITS}
        for s in samples:
            parts[tags[s.source_id.split("/", 1)[1]]].append(s)
        got = tuple(len(parts[t]) for t in SPLITS)
        if sizes and got != tuple(sizes):
            raise ManifestError(f"{name}: manifest split sizes {got} != expected {tuple(sizes)}")
        return tuple(parts[t] for t in SPLITS)
    return stratified_split(samples, sizes or split_counts(len(samples)), seed)


def load_dataset(spec: Union[DatasetSpec, str], seed: int = 0, size: int = 128):
    """Load a dataset from disk and return ``(train, val, test)`` lists of samples."""
    if isinstance(spec, str):
        spec = get_spec(spec)
    if spec.root is None:
        raise DatasetError(f"no dataset root given; set {DATA_ROOT_ENV} or pass a root")
    root = Path(spec.root)
    name = spec.name

    if name == "CCX":
        # normal stays 0; TB -> 1; JCX nodule -> 2
        pooled = []
        for part in ("MCX", "SCX", "JCX"):
            sub = DatasetSpec(part, DATASETS[part].classes, DATASETS[part].split_sizes, str(root))
            for s in _load_all(sub, size):
                if part == "JCX" and s.class_label == 1:
                    s.class_label = 2
                pooled.append(s)
        _check_class_counts(name, pooled, spec.classes)
        if len(pooled) != spec.total:
            raise ManifestError(f"CCX: {len(pooled)} samples, expected {spec.total}")
        return stratified_split(pooled, spec.split_sizes, seed)

    dataset_dir = root / name if (root / name).is_dir() else root
    manifest_path = dataset_dir / "manifest.txt"
    manifest = read_manifest(manifest_path) if manifest_path.exists() else None
    samples = _load_all(spec, size, dataset_dir, manifest)
    return _partition(name, samples, spec.split_sizes, seed, manifest)


def _load_all(spec: DatasetSpec, size: int, dataset_dir: Optional[Path] = None, manifest=None) -> list:
    name = spec.name
    if dataset_dir is None:
        root = Path(spec.root)
        dataset_dir = root / name
        mp = dataset_dir / "manifest.txt"
        manifest = read_manifest(mp) if mp.exists() else None
    if name == "SCX" and manifest is None:
        raise ManifestError(
            f"SCX requires a curated manifest at {dataset_dir / 'manifest.txt'}; "
            "build one with `appaunet manifest SCX`"
        )
    samples = _load_dir(name, dataset_dir, size, manifest)
    if spec.total is not None and len(samples) != spec.total:
        raise ManifestError(f"{name}: found {len(samples)} samples, expected {spec.total}")
    _check_class_counts(name, samples, spec.classes)
    return samples


def audit_manifest(name: str, root: Union[str, Path], size: int = 64) -> dict:
    """Build a curated manifest for a dataset directory.

    Keeps image/mask pairs with matching base filenames and a nonempty mask,
    then ranks them by how much darker the masked lung field is than the
    rest of the image and keeps the best-agreeing pairs per class until the
    curated class counts are met.
    """
    name = name.upper()
    root = Path(root)
    dataset_dir = root / name if (root / name).is_dir() else root
    images = _index_files(dataset_dir / "images")
    index = _mask_index(dataset_dir)
    scored: dict = {}
    for stem in sorted(images):
        mask = _find_mask(dataset_dir, stem, index)
        if mask is None or not mask.any():
            continue
        raw = read_image(images[stem])
        if mask.shape != raw.shape[:2]:
            continue
        s = preprocess(raw, mask, size)
        inside = s.image[s.mask == 1].mean()
        outside = s.image[s.mask == 0].mean() if (s.mask == 0).any() else inside
        scored.setdefault(class_from_name(name, stem), []).append((float(outside - inside), stem))
    targets = CLASS_COUNTS.get(name)
    classes = DATASETS[name].classes
    keep = {}
    for cls, items in sorted(scored.items()):
        items.sort(key=lambda t: (-t[0], t[1]))
        limit = targets[classes[cls]] if targets else len(items)
        if len(items) < limit:
            raise ManifestError(f"{name}: only {len(items)} usable {classes[cls]} pairs, need {limit}")
        for _, stem in items[:limit]:
            keep[stem] = None
    return keep


# --------------------------------------------------------------------------
# synthetic data


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def synth_dataset(count: int, seed: int = 0, size: int = 64) -> list:
    """Lung-like synthetic images with exact masks.

    Two dark ellipses sit on a brighter, noisy body. Exactly half the samples
    (class 1, "abnormal") carry a bright disc inside one of the lungs.
    """
    if size not in (32, 64, 128):
        raise ValueError(f"size must be 32, 64 or 128, got {size}")
    rng = np.random.default_rng(seed)
    labels = np.zeros(count, dtype=int)
    labels[: count // 2] = 1
    labels = rng.permutation(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    samples = []
    for k in range(count):
        body = 0.55 + 0.08 * rng.uniform(-1, 1) * (yy / size - 0.5) + 0.05 * rng.uniform(-1, 1)
        image = body.copy()
        mask = np.zeros((size, size), dtype=bool)
        lungs = []
        for side in (-1, 1):
            cy = size * (0.5 + rng.uniform(-0.04, 0.04))
            cx = size * (0.5 + side * rng.uniform(0.17, 0.22))
            ry = size * rng.uniform(0.27, 0.35)
            rx = size * rng.uniform(0.11, 0.15)
            theta = side * rng.uniform(0.0, 0.15)
            region = _ellipse(yy, xx, cy, cx, ry, rx, theta)
            mask |= region
            lungs.append((cy, cx, ry, rx, theta))
            image[region] = 0.2 + 0.05 * rng.uniform(-1, 1)
        if labels[k] == 1:
            cy, cx, ry, rx, theta = lungs[rng.integers(2)]
            r = size * rng.uniform(0.08, 0.1)
            # disc center within the inner half of the ellipse, so the disc stays inside
            rho, phi = 0.5 * math.sqrt(rng.uniform()), rng.uniform(0, 2 * math.pi)
            u, v = rho * rx * math.cos(phi), rho * ry * math.sin(phi)
            c, s = math.cos(theta), math.sin(theta)
            dy, dx = u * s + v * c, u * c - v * s
            disc = (yy - (cy + dy)) ** 2 + (xx - (cx + dx)) ** 2 <= r * r
            image[disc] = 0.85
        image = image + rng.normal(0.0, 0.04, size=image.shape)
        samples.append(
            Sample(
                np.clip(image, 0, 1).astype(np.float32),
                mask.astype(np.uint8),
                int(labels[k]),
                f"SYNTH/synth_{k:05d}_{labels[k]}",
            )
        )
    return samples


def synth_splits(count: int, seed: int = 0, size: int = 64):
    samples = synth_dataset(count, seed, size)
    return stratified_split(samples, split_counts(count), seed)


def dataset_hash(samples: Iterable[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.source_id.encode())
        h.update(np.ascontiguousarray(s.image, dtype=np.float32).tobytes())
        if s.mask is not None:
            h.update(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
        h.update(str(s.class_label).encode())
    return h.hexdigest()


def save_dataset(splits: dict, directory: Union[str, Path]) -> Path:
    """Write samples in the on-disk layout (16-bit PNG images, 8-bit masks, manifest)."""
    from PIL import Image

    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    entries = {}
    for tag, samples in splits.items():
        for s in samples:
            stem = s.source_id.split("/", 1)[-1]
            img16 = np.round(s.image.astype(np.float64) * 65535).astype(np.uint16)
            Image.fromarray(img16).save(directory / "images" / f"{stem}.png")
            if s.mask is not None:
                Image.fromarray((s.mask * 255).astype(np.uint8)).save(directory / "masks" / f"{stem}.png")
            entries[stem] = tag
    write_manifest(directory / "manifest.txt", entries)
    return directory


def to_tensors(samples: Sequence[Sample]):
    """Stack samples into ``(images, masks, labels)`` tensors.

    Missing masks become all-zero maps and missing labels become -1; callers
    track which samples are annotated.
    """
    if not samples:
        raise ValueError("no samples")
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))[:, None]
    zeros = np.zeros_like(samples[0].image, dtype=np.float32)
    masks = torch.from_numpy(
        np.stack([zeros if s.mask is None else s.mask.astype(np.float32) for s in samples])
    )[:, None]
    labels = torch.tensor([-1 if s.class_label is None else int(s.class_label) for s in samples])
    return images, masks, labels
