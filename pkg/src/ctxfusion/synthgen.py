"""Procedural composite images: one class-specific shape over a context texture.

Each class owns a silhouette and a hue; each supercategory owns a context
texture (palette, gradient direction and a noise frequency band).  A class is
shown over its own supercategory's texture with probability
``context_purity`` and over another supercategory's texture otherwise, so the
background is informative about the class without being decisive.

Every sample draws from its own generator seeded by ``(seed, stream, index)``,
which makes generation order-independent.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, GenerationError

FORMAT_VERSION = 1

STREAM_COMPOSITE = 0
STREAM_OBJECT = 1
STREAM_SCENE = 2

MAX_AREA_FRACTION = 0.5
MIN_SILHOUETTE_FILL = 0.30
_SUPERSAMPLE = 4
_MAX_PLACEMENT_TRIES = 32
CLUTTER_BASE = 1 << 20  # texture ids at or above this are label-free clutter


@dataclass
class LabeledImage:
    pixels: np.ndarray  # [3, H, W] in [0, 1]
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1, half-open
    class_id: int
    supercategory_id: int
    split: str = "train"
    context_id: int = -1  # supercategory whose texture forms the background; -1 when none

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]

    def bbox_mask(self) -> np.ndarray:
        h, w = self.size
        m = np.zeros((h, w), dtype=bool)
        x0, y0, x1, y1 = self.bbox
        m[y0:y1, x0:x1] = True
        return m

    def with_pixels(self, pixels: np.ndarray) -> "LabeledImage":
        return LabeledImage(pixels, self.bbox, self.class_id, self.supercategory_id,
                            self.split, self.context_id)

    def validate(self) -> None:
        _, h, w = self.pixels.shape
        x0, y0, x1, y1 = self.bbox
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise GenerationError(f"bbox {self.bbox} outside {w}x{h} image")
        if (x1 - x0) * (y1 - y0) > MAX_AREA_FRACTION * h * w + 1e-9:
            raise GenerationError(f"bbox {self.bbox} exceeds the area cap")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise GenerationError("pixel values outside [0, 1]")


def default_class_map(mode: str, n_classes: int, n_supercategories: int) -> tuple[int, ...]:
    """Class -> supercategory map for a context mode.

    ``mixed`` gives the first ``n_supercategories - 1`` classes a supercategory
    of their own and puts every remaining class in the last one.
    """
    if mode == "dissimilar":
        if n_supercategories < n_classes:
            raise ConfigurationError("dissimilar mode needs at least one supercategory per class")
        return tuple(range(n_classes))
    if mode == "similar":
        return (0,) * n_classes
    if mode == "mixed":
        unique = n_supercategories - 1
        if unique < 1 or n_classes - unique < 2:
            raise ConfigurationError(
                f"mixed mode with {n_classes} classes needs 2..{n_classes - 1} supercategories")
        return tuple(min(c, unique) for c in range(n_classes))
    raise ConfigurationError(f"unknown context_mode {mode!r}")


@dataclass
class DatasetSpec:
    image_size: int = 48
    n_classes: int = 8
    n_supercategories: int = 5
    class_to_supercategory: tuple[int, ...] | None = None
    samples_per_class: int = 600
    train_fraction: float = 0.75
    context_mode: Literal["dissimilar", "similar", "mixed"] = "mixed"
    context_purity: float = 0.8
    object_scale: tuple[float, float] = (0.45, 0.7)
    object_background: Literal["gray", "clutter"] = "clutter"
    seed: int = 0

    def __post_init__(self):
        if self.class_to_supercategory is None:
            self.class_to_supercategory = default_class_map(
                self.context_mode, self.n_classes, self.n_supercategories)
        self.class_to_supercategory = tuple(int(s) for s in self.class_to_supercategory)
        self.object_scale = tuple(float(s) for s in self.object_scale)
        self.validate()

    def validate(self) -> None:
        m = self.class_to_supercategory
        if self.image_size < 8:
            raise ConfigurationError("image_size must be at least 8")
        if self.n_classes < 2 or len(m) != self.n_classes:
            raise ConfigurationError("class_to_supercategory must map every class exactly once")
        if any(s < 0 or s >= self.n_supercategories for s in m):
            raise ConfigurationError("supercategory id out of range")
        if self.context_mode == "dissimilar" and len(set(m)) != len(m):
            raise ConfigurationError("dissimilar mode requires an injective class map")
        if self.context_mode == "similar" and len(set(m)) != 1:
            raise ConfigurationError("similar mode requires a single shared supercategory")
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError("train_fraction must lie in (0, 1)")
        if self.samples_per_class < 1:
            raise ConfigurationError("samples_per_class must be positive")
        if not 0 <= self.context_purity <= 1:
            raise ConfigurationError("context_purity must lie in [0, 1]")
        if self.object_background not in ("gray", "clutter"):
            raise ConfigurationError(f"unknown object_background {self.object_background!r}")
        lo, hi = self.object_scale
        if not 0 < lo <= hi:
            raise ConfigurationError("object_scale must be an increasing positive pair")
        if hi * hi > MAX_AREA_FRACTION * 1.0 + 1e-12:
            raise ConfigurationError(
                f"object_scale upper bound {hi} cannot fit under the {MAX_AREA_FRACTION:.0%} area cap")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_to_supercategory"] = list(self.class_to_supercategory)
        d["object_scale"] = list(self.object_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ---------------------------------------------------------------------------
# appearance tables

_SUPER_PALETTES = [
    ((0.20, 0.45, 0.15), (0.55, 0.75, 0.30)),  # grassland
    ((0.15, 0.30, 0.65), (0.60, 0.80, 0.95)),  # sky / water
    ((0.55, 0.35, 0.20), (0.85, 0.70, 0.50)),  # indoor wood
    ((0.35, 0.35, 0.38), (0.70, 0.70, 0.72)),  # street
    ((0.60, 0.20, 0.35), (0.95, 0.65, 0.55)),  # dusk
    ((0.10, 0.40, 0.40), (0.45, 0.85, 0.75)),
    ((0.45, 0.15, 0.60), (0.80, 0.60, 0.90)),
    ((0.65, 0.60, 0.10), (0.95, 0.90, 0.55)),
]


def _palette(s: int) -> tuple[np.ndarray, np.ndarray]:
    if s < len(_SUPER_PALETTES):
        a, b = _SUPER_PALETTES[s]
        return np.array(a), np.array(b)
    r = np.random.default_rng([9173, s])
    a = r.uniform(0.1, 0.5, 3)
    return a, np.clip(a + r.uniform(0.2, 0.45, 3), 0, 1)


def _context_params(s: int) -> dict:
    """Fixed texture parameters of supercategory ``s``."""
    angle = (s * 0.61803398875 % 1.0) * np.pi
    band = [(1.5, 3.0), (6.0, 10.0), (3.0, 5.5), (10.0, 16.0), (2.0, 4.0),
            (8.0, 12.0), (4.0, 7.0), (12.0, 20.0)][s % 8]
    amp = 0.07 + 0.02 * (s % 3)
    return {"angle": angle, "band": band, "amp": amp}


# Per-sample spread around each class's mean color.  Wide enough that color
# alone is a weak cue: identity should come mostly from the silhouette.
HUE_JITTER = 0.12


def _class_color(k: int, rng: np.random.Generator) -> np.ndarray:
    hue = (k * 0.38196601125 + rng.normal(0, HUE_JITTER)) % 1.0
    sat = float(np.clip(0.65 + rng.normal(0, 0.12), 0.3, 1.0))
    val = float(np.clip(0.80 + rng.normal(0, 0.10), 0.4, 1.0))
    return np.array(colorsys.hsv_to_rgb(hue, sat, val))


def _shape_inside(k: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership of normalized coords ``u, v`` in [-1, 1] for silhouette ``k``."""
    base = k % 10
    if k >= 10:  # further classes reuse silhouettes rotated by 45 degrees
        c = np.sqrt(0.5)
        u, v = c * (u - v), c * (u + v)
    if base == 0:
        return u * u + v * v <= 1.0
    if base == 1:
        return (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9)
    if base == 2:
        return (v <= 1.0) & (np.abs(u) <= (v + 1.0) / 2.0)
    if base == 3:
        return (np.abs(u) <= 0.35) | (np.abs(v) <= 0.35)
    if base == 4:
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.3)
    if base == 5:
        return np.abs(u) + np.abs(v) <= 1.0
    if base == 6:
        return u * u + (v / 0.5) ** 2 <= 1.0
    if base == 7:
        return (np.abs(u - v) <= 0.45) | (np.abs(u + v) <= 0.45)
    if base == 8:
        return ((u <= -0.3) | (v >= 0.3)) & (np.abs(u) <= 1) & (np.abs(v) <= 1)
    r2 = u * u + v * v
    return (r2 <= 1.0) & ((u - 0.45) ** 2 + v * v >= 0.55)


def _coverage(k: int, size: int, box: int, x0: int, y0: int, angle_jitter: float) -> np.ndarray:
    """Antialiased silhouette coverage over the full image."""
    ss = _SUPERSAMPLE
    offs = (np.arange(box * ss) + 0.5) / (box * ss) * 2.0 - 1.0
    v, u = np.meshgrid(offs, offs, indexing="ij")
    if angle_jitter:
        c, s = np.cos(angle_jitter), np.sin(angle_jitter)
        u, v = c * u - s * v, s * u + c * v
    inside = _shape_inside(k, u, v).astype(np.float64)
    cov_box = inside.reshape(box, ss, box, ss).mean(axis=(1, 3))
    cov = np.zeros((size, size))
    cov[y0:y0 + box, x0:x0 + box] = cov_box
    return cov


def _tight_bbox(cov: np.ndarray) -> tuple[int, int, int, int] | None:
    ys, xs = np.nonzero(cov > 0)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _band_noise(size: int, band: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal((size, size))
    f = np.fft.fftfreq(size) * size
    radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    keep = (radius >= band[0]) & (radius <= band[1])
    spec = np.fft.fft2(white) * keep
    field = np.real(np.fft.ifft2(spec))
    std = field.std()
    return field / std if std > 0 else field


def render_background(context_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    a, b = _palette(context_id)
    params = _context_params(context_id)
    a = a + rng.normal(0, 0.03, 3)
    b = b + rng.normal(0, 0.03, 3)
    angle = params["angle"] + rng.normal(0, 0.2)
    ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = (np.cos(angle) * (xs - 0.5) + np.sin(angle) * (ys - 0.5)) / np.sqrt(0.5) + 0.5
    t = np.clip(t, 0, 1)
    img = (1 - t)[None] * a[:, None, None] + t[None] * b[:, None, None]
    noise = _band_noise(size, params["band"], rng)
    tint = 0.7 + 0.3 * rng.random(3)
    img = img + params["amp"] * tint[:, None, None] * noise[None]
    return np.clip(img, 0.0, 1.0)


def _place_object(class_id: int, size: int, scale: tuple[float, float], rng: np.random.Generator):
    for _ in range(_MAX_PLACEMENT_TRIES):
        box = int(round(rng.uniform(*scale) * size))
        box = max(4, min(box, size))
        x0 = int(rng.integers(0, size - box + 1))
        y0 = int(rng.integers(0, size - box + 1))
        jitter = rng.normal(0, 0.15)
        cov = _coverage(class_id, size, box, x0, y0, jitter)
        bbox = _tight_bbox(cov)
        if bbox is None:
            continue
        bx0, by0, bx1, by1 = bbox
        area = (bx1 - bx0) * (by1 - by0)
        if area > MAX_AREA_FRACTION * size * size:
            continue
        if cov.sum() < MIN_SILHOUETTE_FILL * area:
            continue
        return cov, bbox
    raise GenerationError(f"could not place class {class_id} object after {_MAX_PLACEMENT_TRIES} tries")


def render_sample(class_id: int, supercategory_id: int, rng: np.random.Generator, *,
                  size: int = 48, context_id: int | None = None,
                  scale: tuple[float, float] = (0.45, 0.7), with_object: bool = True,
                  background: str = "context") -> LabeledImage:
    """Render one labeled image.

    The background (``"context"`` texture of ``context_id``, default the
    supercategory, ``"gray"``, or ``"clutter"``: a texture with random
    palette and spectrum) is drawn from ``rng`` before the object, so
    rendering with ``with_object=False`` reproduces the background exactly.
    """
    ctx = supercategory_id if context_id is None else context_id
    if background == "gray":
        level = rng.uniform(0.35, 0.65)
        img = np.full((3, size, size), level)
        ctx = -1
    elif background == "clutter":
        # a random texture from outside the supercategory range, unrelated to the label
        img = render_background(CLUTTER_BASE + int(rng.integers(0, 1 << 30)), size, rng)
        ctx = -1
    else:
        img = render_background(ctx, size, rng)
    if not with_object:
        return LabeledImage(img, (0, 0, size, size), class_id, supercategory_id, context_id=ctx)
    cov, bbox = _place_object(class_id, size, scale, rng)
    color = _class_color(class_id, rng)
    shade = 1.0 + 0.15 * (np.linspace(-1, 1, size)[None, :] * rng.normal())
    obj = color[:, None, None] * shade[None]
    img = (1 - cov)[None] * img + cov[None] * obj
    return LabeledImage(np.clip(img, 0.0, 1.0), bbox, class_id, supercategory_id, context_id=ctx)


def sample_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(index)])


def _split_labels(spec: DatasetSpec, n_per_class: int, seed: int, stream: int) -> list[np.ndarray]:
    n_train = int(np.floor(n_per_class * spec.train_fraction + 0.5))
    out = []
    for c in range(spec.n_classes):
        perm = np.random.default_rng([int(seed), stream, 10_000_019, c]).permutation(n_per_class)
        is_train = np.zeros(n_per_class, dtype=bool)
        is_train[perm[:n_train]] = True
        out.append(is_train)
    return out


def _draw_context(spec: DatasetSpec, class_id: int, rng: np.random.Generator) -> int:
    own = spec.class_to_supercategory[class_id]
    if spec.n_supercategories == 1 or rng.random() < spec.context_purity:
        return own
    other = int(rng.integers(0, spec.n_supercategories - 1))
    return other + (other >= own)


def generate_dataset(spec: DatasetSpec) -> list[LabeledImage]:
    """Composite images, class-major order, split stratified by class."""
    spec.validate()
    splits = _split_labels(spec, spec.samples_per_class, spec.seed, STREAM_COMPOSITE)
    out = []
    for c in range(spec.n_classes):
        for j in range(spec.samples_per_class):
            idx = c * spec.samples_per_class + j
            rng = sample_rng(spec.seed, STREAM_COMPOSITE, idx)
            ctx = _draw_context(spec, c, rng)
            img = render_sample(c, spec.class_to_supercategory[c], rng, size=spec.image_size,
                                context_id=ctx, scale=spec.object_scale)
            img.split = "train" if splits[c][j] else "test"
            out.append(img)
    return out


def pretraining_corpus(kind: Literal["object", "scene"], spec: DatasetSpec,
                       samples: int | None = None) -> list[LabeledImage]:
    """Object images on flat gray or label-free clutter, or context textures
    without objects.

    ``samples`` is per class for ``object`` and per supercategory for
    ``scene``; it defaults to ``spec.samples_per_class``.
    """
    n = spec.samples_per_class if samples is None else samples
    if kind == "object":
        stream, groups = STREAM_OBJECT, spec.n_classes
    elif kind == "scene":
        stream, groups = STREAM_SCENE, spec.n_supercategories
    else:
        raise ConfigurationError(f"unknown corpus kind {kind!r}")
    n_train = int(np.floor(n * spec.train_fraction + 0.5))
    out = []
    for g in range(groups):
        perm = np.random.default_rng([int(spec.seed), stream, 10_000_019, g]).permutation(n)
        train = set(perm[:n_train].tolist())
        for j in range(n):
            rng = sample_rng(spec.seed, stream, g * n + j)
            if kind == "object":
                img = render_sample(g, spec.class_to_supercategory[g], rng, size=spec.image_size,
                                    scale=spec.object_scale, background=spec.object_background)
            else:
                img = render_sample(-1, g, rng, size=spec.image_size, with_object=False)
            img.split = "train" if j in train else "test"
            out.append(img)
    return out


def class_groups(dataset: Sequence[LabeledImage]) -> tuple[set[int], set[int]]:
    """(classes with a supercategory of their own, classes sharing one)."""
    c2s = {}
    for im in dataset:
        c2s.setdefault(im.class_id, im.supercategory_id)
    counts: dict[int, int] = {}
    for s in c2s.values():
        counts[s] = counts.get(s, 0) + 1
    unique = {c for c, s in c2s.items() if counts[s] == 1}
    return unique, set(c2s) - unique


def filter_split(dataset: Sequence[LabeledImage], which: str) -> list[LabeledImage]:
    if which == "all":
        return list(dataset)
    unique, shared = class_groups(dataset)
    if which == "dissimilar":
        keep = unique
    elif which == "similar":
        keep = shared
    else:
        raise ConfigurationError(f"unknown split {which!r}")
    out = [im for im in dataset if im.class_id in keep]
    if not out:
        raise ConfigurationError(f"split {which!r} is empty for this dataset")
    return out


def split_mask(dataset: Sequence[LabeledImage], which: str) -> np.ndarray:
    """Boolean row mask equivalent to :func:`filter_split`."""
    if which == "all":
        return np.ones(len(dataset), dtype=bool)
    kept = {id(im) for im in filter_split(dataset, which)}
    return np.array([id(im) in kept for im in dataset])


def stack(dataset: Sequence[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    """Pixels ``[N,3,H,W]`` and class ids."""
    x = np.stack([im.pixels for im in dataset]) if dataset else np.zeros((0, 3, 1, 1))
    y = np.array([im.class_id for im in dataset], dtype=np.int64)
    return x, y


def select(dataset: Sequence[LabeledImage], split: str) -> list[LabeledImage]:
    return [im for im in dataset if im.split == split]


# ---------------------------------------------------------------------------
# on-disk format: manifest.json + pixels.bin (little-endian float64, manifest order)


def export_dataset(dataset: Sequence[LabeledImage], directory: str | os.PathLike,
                   spec: DatasetSpec | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if not dataset:
        raise ConfigurationError("refusing to export an empty dataset")
    shape = list(dataset[0].pixels.shape)
    samples = []
    for im in dataset:
        if list(im.pixels.shape) != shape:
            raise ConfigurationError("all images must share one shape")
        samples.append({"class_id": im.class_id, "supercategory_id": im.supercategory_id,
                        "context_id": im.context_id, "bbox": list(im.bbox), "split": im.split})
    payload = np.ascontiguousarray(np.stack([im.pixels for im in dataset]), dtype="<f8").tobytes()
    manifest = {
        "version": FORMAT_VERSION,
        "pixel_shape": shape,
        "dtype": "<f8",
        "payload": "pixels.bin",
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "spec": spec.to_dict() if spec is not None else None,
        "samples": samples,
    }
    _atomic_write(d / "pixels.bin", payload)
    _atomic_write(d / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
    return d / "manifest.json"


def import_dataset(directory: str | os.PathLike) -> list[LabeledImage]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"manifest: unreadable ({e})") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"version: expected {FORMAT_VERSION}, found {manifest.get('version')!r}")
    shape = tuple(manifest["pixel_shape"])
    samples = manifest["samples"]
    raw = (d / manifest.get("payload", "pixels.bin")).read_bytes()
    expected = len(samples) * int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise FormatError(f"payload: expected {expected} bytes, found {len(raw)}")
    if "payload_sha256" in manifest and hashlib.sha256(raw).hexdigest() != manifest["payload_sha256"]:
        raise FormatError("payload_sha256: checksum mismatch")
    pix = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape((len(samples),) + shape)
    return [LabeledImage(pix[i].copy(), tuple(s["bbox"]), int(s["class_id"]), int(s["supercategory_id"]),
                         s["split"], int(s.get("context_id", -1))) for i, s in enumerate(samples)]


def read_manifest_spec(directory: str | os.PathLike) -> DatasetSpec | None:
    manifest = json.loads((Path(directory) / "manifest.json").read_text())
    return DatasetSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
