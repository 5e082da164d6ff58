"""Synthetic multi-structure scenes with per-source dataset shift.

Each scene holds K jittered ellipses drawn in class order, so later classes
occlude earlier ones and every pixel has exactly one class id. Sources differ
by a brightness offset, a contrast gain and additive noise. Training source
``j`` feeds the class-``j`` dataset; source ``K`` is reserved for the test set.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from vluu.data import FullDataset, PartialDataset, instance_normalize
from vluu.errors import ConfigError

MAX_ATTEMPTS = 100

# (center_y, center_x, radius_y, radius_x, angle) in normalized coordinates.
# Two lateral structures and one central structure overlapping both.
DEFAULT_ELLIPSES = [
    [0.48, 0.28, 0.30, 0.15, 0.0],
    [0.48, 0.72, 0.30, 0.15, 0.0],
    [0.60, 0.50, 0.16, 0.20, 0.0],
]
DISJOINT_ELLIPSES = [
    [0.40, 0.24, 0.26, 0.12, 0.0],
    [0.40, 0.76, 0.26, 0.12, 0.0],
    [0.78, 0.50, 0.12, 0.16, 0.0],
]
# (brightness offset, contrast gain, noise std); the last row is the test source,
# outside the range spanned by the training rows on every axis
DEFAULT_SOURCES = [
    [0.00, 1.00, 0.03],
    [0.08, 0.80, 0.06],
    [-0.08, 1.15, 0.09],
    [0.15, 0.65, 0.12],
]


@dataclass
class SynthConfig:
    k: int = 3
    size: int = 64
    ellipses: list | None = None
    background_intensity: float = 0.25
    class_intensities: list = field(default_factory=lambda: [0.65, 0.65, 0.85])
    texture_std: float = 0.04
    jitter_center: float = 0.04
    jitter_radius: float = 0.03
    jitter_angle: float = 0.15
    overlap: bool = True
    sources: list = field(default_factory=lambda: [list(s) for s in DEFAULT_SOURCES])
    n_per_class: list = field(default_factory=lambda: [10, 10, 10])
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.ellipses is None:
            if self.k != 3:
                raise ConfigError("default ellipse layout is defined for k=3 only")
            self.ellipses = [list(e) for e in (DEFAULT_ELLIPSES if self.overlap
                                               else DISJOINT_ELLIPSES)]
        self.validate()

    def validate(self):
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if self.size < 4 or self.size % 4:
            raise ConfigError("size must be a positive multiple of 4")
        if len(self.ellipses) != self.k or any(len(e) != 5 for e in self.ellipses):
            raise ConfigError("ellipses must hold k entries of [cy, cx, ry, rx, angle]")
        if len(self.class_intensities) != self.k:
            raise ConfigError("class_intensities must hold k values")
        if len(self.sources) < self.k + 1 or any(len(s) != 3 for s in self.sources):
            raise ConfigError("sources must hold k + 1 rows of [brightness, contrast, noise]")
        if len(self.n_per_class) != self.k or min(self.n_per_class) < 1:
            raise ConfigError("n_per_class must hold k counts >= 1")
        if self.n_test < 1:
            raise ConfigError("n_test must be >= 1")
        for e in self.ellipses:
            if not _inside_frame(e, self.jitter_center, self.jitter_radius):
                raise ConfigError(f"ellipse {e} can leave the frame under the configured jitter")
        if self.overlap != _any_overlap(self.ellipses, self.size):
            raise ConfigError(f"overlap={self.overlap} contradicts the canonical ellipses")

    @property
    def test_source(self):
        return self.k

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read synth config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("synth config must be a JSON object")
        return cls.from_dict(d)


@dataclass
class Scene:
    image: np.ndarray  # (1, H, W) raw intensities in [0, 1], quantized to 1/255
    label: np.ndarray  # (H, W) class ids 0..K


def _extent(e):
    cy, cx, ry, rx, th = e
    hx = np.hypot(rx * np.cos(th), ry * np.sin(th))
    hy = np.hypot(rx * np.sin(th), ry * np.cos(th))
    return cy, cx, hy, hx


def _inside_frame(e, jc=0.0, jr=0.0):
    cy, cx, hy, hx = _extent(e)
    m = jc + jr
    return cy - hy - m >= 0 and cy + hy + m <= 1 and cx - hx - m >= 0 and cx + hx + m <= 1


def ellipse_mask(e, size):
    cy, cx, ry, rx, th = e
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _any_overlap(ellipses, size):
    masks = [ellipse_mask(e, size) for e in ellipses]
    return any((masks[i] & masks[j]).any()
               for i in range(len(masks)) for j in range(i + 1, len(masks)))


def jittered_ellipses(config, rng):
    out = []
    for cy, cx, ry, rx, th in config.ellipses:
        j = rng.uniform(-1, 1, 5)
        out.append([cy + config.jitter_center * j[0], cx + config.jitter_center * j[1],
                    ry + config.jitter_radius * j[2], rx + config.jitter_radius * j[3],
                    th + config.jitter_angle * j[4]])
    return out


def scene_rng(config, source, index):
    return np.random.default_rng([config.seed, source, index])


def generate_scene(config, source, rng):
    """Render one scene from ``source``; resamples jitter that breaks the layout."""
    if not 0 <= source < len(config.sources):
        raise ConfigError(f"unknown source {source}")
    n = config.size
    for _ in range(MAX_ATTEMPTS):
        shapes = jittered_ellipses(config, rng)
        if not all(_inside_frame(e) for e in shapes):
            continue
        label = np.zeros((n, n), dtype=np.uint8)
        for cls, e in enumerate(shapes, start=1):
            label[ellipse_mask(e, n)] = cls
        if len(np.unique(label)) == config.k + 1:
            break
    else:
        raise RuntimeError(f"no valid layout after {MAX_ATTEMPTS} attempts")

    raw = np.full((n, n), config.background_intensity)
    for cls in range(1, config.k + 1):
        raw[label == cls] = config.class_intensities[cls - 1]
    inside = label > 0
    if config.texture_std > 0:
        raw[inside] += rng.normal(0.0, config.texture_std, int(inside.sum()))
    brightness, contrast, noise = config.sources[source]
    raw = contrast * (raw - 0.5) + 0.5 + brightness
    if noise > 0:
        raw += rng.normal(0.0, noise, raw.shape)
    raw = np.rint(np.clip(raw, 0.0, 1.0) * 255) / 255
    return Scene(raw[None], label)


def generate_scenes(config, source, count):
    return [generate_scene(config, source, scene_rng(config, source, i)) for i in range(count)]


@dataclass
class Benchmark:
    partial: list       # K PartialDataset, class order
    test: FullDataset   # held-out source, full labels
    oracle: FullDataset  # the training scenes with full labels


def make_benchmark(config, n_per_class=None, n_test=None):
    """K partially labeled training sets, a fully labeled test set, and the oracle set.

    Scene ``i`` of source ``j`` depends only on ``(seed, j, i)``, so smaller
    datasets are prefixes of larger ones.
    """
    n_per_class = list(config.n_per_class if n_per_class is None else n_per_class)
    n_test = config.n_test if n_test is None else n_test
    if len(n_per_class) != config.k or min(n_per_class) < 1 or n_test < 1:
        raise ConfigError("need k counts >= 1 and n_test >= 1")
    partial, oracle_img, oracle_lab = [], [], []
    for j in range(1, config.k + 1):
        scenes = generate_scenes(config, j - 1, n_per_class[j - 1])
        imgs = [instance_normalize(s.image) for s in scenes]
        partial.append(PartialDataset(j, imgs, [s.label == j for s in scenes],
                                      source=f"source{j - 1}", num_classes=config.k))
        oracle_img += imgs
        oracle_lab += [s.label for s in scenes]
    test_scenes = generate_scenes(config, config.test_source, n_test)
    test = FullDataset([instance_normalize(s.image) for s in test_scenes],
                       [s.label for s in test_scenes], config.k,
                       source=f"source{config.test_source}")
    oracle = FullDataset(oracle_img, oracle_lab, config.k, source="training-sources")
    return Benchmark(partial, test, oracle)
