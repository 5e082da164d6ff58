"""Partially labeled datasets, instance normalization, tuple sampling, disk format.

Images are channel-first float64 arrays ``(C, H, W)``, always stored already
instance-normalized. Masks are ``uint8`` ``(H, W)``.

On disk a dataset is a directory with ``manifest.json`` plus binary PGM files.
Image pixels map to intensities as ``v / 255`` and are normalized on load;
mask pixel values are class ids.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vluu.errors import DataError

SIGMA_FLOOR = 1e-6
MANIFEST = "manifest.json"


def instance_normalize(image):
    """Zero-mean, unit-std rescale using statistics over all pixels and channels."""
    x = np.asarray(image, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty image")
    mu = x.mean()
    sigma = x.std()
    return (x - mu) / max(sigma, SIGMA_FLOOR)


@dataclass(frozen=True)
class PartialLabel:
    class_index: int
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise DataError("mask is not binary")
        if self.class_index < 1:
            raise DataError(f"class index {self.class_index} must be >= 1")
        object.__setattr__(self, "mask", m.astype(np.uint8, copy=False))


class PartialDataset:
    """Images annotated for class ``class_index`` only, drawn from one source."""

    def __init__(self, class_index, images, masks, source="", num_classes=None):
        self.class_index = int(class_index)
        self.images = np.asarray(images, dtype=np.float64)
        self.masks = np.asarray(masks).astype(np.uint8)
        self.source = str(source)
        self.num_classes = num_classes
        if len(self.images) < 1:
            raise DataError(f"dataset for class {class_index} is empty")
        if self.images.ndim != 4:
            raise DataError(f"images must be (n, C, H, W), got {self.images.shape}")
        if self.masks.shape != (len(self.images),) + self.images.shape[2:]:
            raise DataError(f"mask shape {self.masks.shape} does not match images {self.images.shape}")
        if not np.isin(self.masks, (0, 1)).all():
            raise DataError("partial masks must be binary")
        if num_classes is not None and not 1 <= self.class_index <= num_classes:
            raise DataError(f"class index {class_index} outside 1..{num_classes}")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i], PartialLabel(self.class_index, self.masks[i])

    @property
    def shape(self):
        return self.images.shape[1:]


class FullDataset:
    """Fully labeled images: ``labels`` hold class ids in 0..K per pixel."""

    def __init__(self, images, labels, num_classes, source=""):
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels).astype(np.uint8)
        self.num_classes = int(num_classes)
        self.source = str(source)
        if len(self.images) < 1:
            raise DataError("fully labeled dataset is empty")
        if self.labels.shape != (len(self.images),) + self.images.shape[2:]:
            raise DataError(f"label shape {self.labels.shape} does not match images {self.images.shape}")
        if self.labels.max() > self.num_classes:
            raise DataError(f"class id {self.labels.max()} outside 0..{self.num_classes}")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]


def check_ordered(datasets):
    ids = [d.class_index for d in datasets]
    if ids != list(range(1, len(datasets) + 1)):
        raise DataError(f"datasets must be ordered by class 1..K, got {ids}")
    shapes = {d.shape for d in datasets}
    if len(shapes) != 1:
        raise DataError(f"datasets disagree on image shape: {sorted(shapes)}")


def sample_indices(datasets, rng):
    """One index per dataset, uniform with replacement."""
    return [int(rng.integers(len(d))) for d in datasets]


def sample_tuple(datasets, rng):
    """Draw ``(image, PartialLabel)`` from each of the K datasets, class order."""
    check_ordered(datasets)
    return [d[i] for d, i in zip(datasets, sample_indices(datasets, rng))]


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path, pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("PGM data must be a 2-D uint8 array")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"{path}: bad PGM header") from exc
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval}, expected 255")
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# directories


def _quantize(image):
    """Affine map to 0..255; instance normalization undoes the affine part on load."""
    lo, hi = image.min(), image.max()
    if hi - lo <= 0:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.rint((image - lo) / (hi - lo) * 255).astype(np.uint8)


def save_dataset(dataset, directory, config=None):
    """Write a PartialDataset or FullDataset in the manifest + PGM format."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    full = isinstance(dataset, FullDataset)
    c, h, w = dataset.shape
    items = []
    for i in range(len(dataset)):
        img = dataset.images[i]
        if c == 1:
            names = f"img_{i:04d}.pgm"
            write_pgm(out / names, _quantize(img[0]))
        else:
            # joint quantization keeps relative channel contrast
            q = _quantize(img)
            names = [f"img_{i:04d}_c{ch}.pgm" for ch in range(c)]
            for ch, name in enumerate(names):
                write_pgm(out / name, q[ch])
        mask_name = f"mask_{i:04d}.pgm"
        if full:
            write_pgm(out / mask_name, dataset.labels[i])
        else:
            write_pgm(out / mask_name, dataset.masks[i] * np.uint8(dataset.class_index))
        items.append({"image": names, "mask": mask_name})
    k = dataset.num_classes
    manifest = {
        "k": k,
        "class_index": "full" if full else dataset.class_index,
        "source": dataset.source,
        "height": h,
        "width": w,
        "items": items,
    }
    if config is not None:
        manifest["config"] = config
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_manifest(directory):
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no {MANIFEST} in {directory}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    missing = {"k", "class_index", "source", "height", "width", "items"} - set(manifest)
    if missing:
        raise DataError(f"manifest {path} is missing keys {sorted(missing)}")
    if not isinstance(manifest["items"], list) or not manifest["items"]:
        raise DataError(f"manifest {path} has no items")
    return manifest


def load_dataset(directory):
    """Load a dataset directory; images are normalized, masks validated."""
    directory = Path(directory)
    m = read_manifest(directory)
    try:
        k = int(m["k"])
        h, w = int(m["height"]), int(m["width"])
    except (TypeError, ValueError) as exc:
        raise DataError(f"malformed manifest in {directory}: {exc}") from exc
    full = m["class_index"] == "full"
    if not full:
        try:
            j = int(m["class_index"])
        except (TypeError, ValueError) as exc:
            raise DataError(f"bad class_index {m['class_index']!r}") from exc
        if not 1 <= j <= k:
            raise DataError(f"class_index {j} outside 1..{k}")
    images, masks = [], []
    for item in m["items"]:
        try:
            names = item["image"]
            mask_name = item["mask"]
        except (TypeError, KeyError) as exc:
            raise DataError(f"malformed manifest item {item!r}") from exc
        names = [names] if isinstance(names, str) else list(names)
        chans = [read_pgm(directory / n) for n in names]
        mask = read_pgm(directory / mask_name)
        for arr, name in zip(chans + [mask], names + [mask_name]):
            if arr.shape != (h, w):
                raise DataError(f"{name}: size {arr.shape} does not match manifest {(h, w)}")
        if mask.max() > k:
            raise DataError(f"{mask_name}: class id {mask.max()} outside 0..{k}")
        if not full and not np.isin(mask, (0, j)).all():
            raise DataError(f"{mask_name}: partial mask for class {j} holds other ids")
        images.append(instance_normalize(np.stack(chans).astype(np.float64) / 255.0))
        masks.append(mask)
    if full:
        return FullDataset(images, masks, k, source=m["source"])
    return PartialDataset(j, images, (np.stack(masks) == j), source=m["source"], num_classes=k)
