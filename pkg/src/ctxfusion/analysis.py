"""Feature-subspace shift under perturbation, Grad-CAM, and head weight magnitudes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .models import FG, Classifier, JointClassifier
from .tensor import Tensor


@dataclass
class FeatureBatch:
    matrix: np.ndarray  # [n_samples, feature_dim]
    class_ids: np.ndarray
    source: str = FG
    condition: str = "clean"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids)
        if self.matrix.ndim != 2 or len(self.class_ids) != len(self.matrix):
            raise DimensionError("feature matrix must be [n, d] with one class id per row")
        if not np.isfinite(self.matrix).all():
            raise ConfigurationError("feature batch holds non-finite entries")


def pooled_features(model: Classifier, x: np.ndarray, y: np.ndarray, stream: str,
                    condition: str = "clean") -> FeatureBatch:
    """Spatially pooled tap features of one stream."""
    maps = model.extractors[stream].maps(x)
    return FeatureBatch(maps.mean(axis=(2, 3)), y, stream, condition)


@dataclass
class PcaResult:
    mean: np.ndarray
    components: np.ndarray  # [k, d], orthonormal rows
    eigenvalues: np.ndarray  # nonincreasing
    projections: list[np.ndarray]

    def project(self, m: np.ndarray) -> np.ndarray:
        return (np.asarray(m) - self.mean) @ self.components.T

    def back_project(self, p: np.ndarray) -> np.ndarray:
        return p @ self.components + self.mean


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude coordinate is positive."""
    out = vectors.copy()
    for row in out:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return out


def pca_fit(clean: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean, components[k,d], eigenvalues[k]) of the sample covariance."""
    n, d = clean.shape
    if not 1 <= k <= min(n - 1, d):
        raise ConfigurationError(f"k={k} must lie in [1, min(n-1, d)] = [1, {min(n - 1, d)}]")
    mean = clean.mean(axis=0)
    centered = clean - mean
    cov = centered.T @ centered / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    vals = np.clip(vals[order], 0.0, None)
    return mean, _fix_signs(vecs[:, order].T), vals


def pca_project(batches: Sequence[FeatureBatch], k: int = 2) -> PcaResult:
    """Fit on the clean batches, project every batch into that basis."""
    clean = [b.matrix for b in batches if b.condition == "clean"]
    if not clean:
        raise ConfigurationError("PCA needs at least one clean batch to fit")
    dims = {b.matrix.shape[1] for b in batches}
    if len(dims) != 1:
        raise DimensionError(f"feature dims differ across batches: {sorted(dims)}")
    mean, comps, vals = pca_fit(np.concatenate(clean), k)
    res = PcaResult(mean, comps, vals, [])
    res.projections = [res.project(b.matrix) for b in batches]
    return res


def within_class_spread(points: np.ndarray, class_ids: np.ndarray) -> float:
    """Mean over classes of the RMS distance to the class centroid."""
    spreads = []
    for c in np.unique(class_ids):
        p = points[class_ids == c]
        if len(p) < 2:
            continue
        spreads.append(np.sqrt(((p - p.mean(axis=0)) ** 2).sum(axis=1).mean()))
    return float(np.mean(spreads)) if spreads else 0.0


@dataclass
class ShiftResult:
    score: float
    displacement: float
    spread: float
    pca: PcaResult


def subspace_shift(clean: FeatureBatch, perturbed: FeatureBatch, k: int = 2) -> ShiftResult:
    """Centroid displacement of the perturbed population in the clean PCA plane,
    in units of the clean within-class spread."""
    if clean.matrix.shape != perturbed.matrix.shape or not np.array_equal(clean.class_ids, perturbed.class_ids):
        raise DimensionError("clean and perturbed batches must be row-aligned")
    pca = pca_project([clean, FeatureBatch(perturbed.matrix, perturbed.class_ids, perturbed.source,
                                           "perturbed")], k)
    pc, pp = pca.projections
    spread = within_class_spread(pc, clean.class_ids)
    if spread <= 0:
        raise ConfigurationError("degenerate clean features: zero within-class spread")
    disp = float(np.linalg.norm(pp.mean(axis=0) - pc.mean(axis=0)))
    return ShiftResult(disp / spread, disp, spread, pca)


def projections_csv(pca: PcaResult, batches: Sequence[FeatureBatch]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = pca.components.shape[0]
    w.writerow(["source", "condition", "class_id"] + [f"pc{i + 1}" for i in range(k)])
    for b, proj in zip(batches, pca.projections):
        for c, row in zip(b.class_ids, proj):
            w.writerow([b.source, b.condition, int(c)] + [repr(float(v)) for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Grad-CAM


@dataclass
class CamMap:
    heatmap: np.ndarray  # [H, W] in [0, 1]
    target_class: int
    layer: str
    is_zero: bool = False

    def mass_inside(self, bbox: tuple[int, int, int, int]) -> float:
        total = self.heatmap.sum()
        if total <= 0:
            return 0.0
        x0, y0, x1, y1 = bbox
        return float(self.heatmap[y0:y1, x0:x1].sum() / total)


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Interpolation weights with half-pixel centers and edge clamping."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_bilinear(a: np.ndarray, h: int, w: int) -> np.ndarray:
    return _bilinear_matrix(h, a.shape[0]) @ a @ _bilinear_matrix(w, a.shape[1]).T


def default_cam_layer(model: Classifier) -> str:
    if isinstance(model, JointClassifier):
        return "fusion" if model.fusion_mode == "mid_conv" else "taps"
    return model.streams[0]


def _cam_activations(model: Classifier, x: Tensor, layer: str):
    """Leaf activations for ``layer`` and the logits computed from them."""
    maps = {s: model.extractors[s].tap(x) for s in model.streams}
    if layer == "fusion":
        if not (isinstance(model, JointClassifier) and model.fusion_mode == "mid_conv"):
            raise ConfigurationError("the 'fusion' layer exists only on mid_conv joint models")
        fused = Tensor(model.fused_map({k: Tensor(v.data) for k, v in maps.items()}).data, requires_grad=True)
        logits = T.linear(T.avg_pool_global(fused), model.head["weight"], model.head["bias"])
        return [fused], logits
    if layer == "taps" or layer in model.streams:
        leaves = {s: Tensor(m.data, requires_grad=(layer == "taps" or layer == s)) for s, m in maps.items()}
        logits = model.logits_from_maps(leaves)
        acts = [leaves[s] for s in model.streams if leaves[s].requires_grad]
        return acts, logits
    raise ConfigurationError(f"unknown CAM layer {layer!r} for {model.kind} model")


def grad_cam(model: Classifier, image: np.ndarray, target_class: int, layer: str | None = None) -> CamMap:
    """Gradient-weighted class activation map for one ``[3,H,W]`` image."""
    layer = layer or default_cam_layer(model)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"grad_cam takes one [3,H,W] image, got {image.shape}")
    acts, logits = _cam_activations(model, Tensor(image[None]), layer)
    if not 0 <= target_class < logits.shape[1]:
        raise ConfigurationError(f"target_class {target_class} outside [0, {logits.shape[1]})")
    cam = None
    picked = logits[:, target_class].sum()
    if picked.requires_grad:
        T.backward(picked)
    for a in acts:
        g = a.grad if a.grad is not None else np.zeros(a.shape)
        weights = g[0].mean(axis=(1, 2))
        part = np.tensordot(weights, a.data[0], axes=1)
        cam = part if cam is None else cam + part
    cam = np.maximum(cam, 0.0)
    h, w = image.shape[1:]
    up = np.maximum(upsample_bilinear(cam, h, w), 0.0)
    peak = up.max()
    if peak <= 0:
        return CamMap(np.zeros((h, w)), target_class, layer, is_zero=True)
    return CamMap(up / peak, target_class, layer)


# ---------------------------------------------------------------------------
# joint head weights


@dataclass
class WeightReport:
    fg_mean_abs: float
    bg_mean_abs: float

    @property
    def ratio(self) -> float:
        if self.bg_mean_abs == 0:
            return float("inf") if self.fg_mean_abs > 0 else float("nan")
        return self.fg_mean_abs / self.bg_mean_abs

    def as_tuple(self) -> tuple[float, float, float]:
        return self.fg_mean_abs, self.bg_mean_abs, self.ratio


def weight_magnitude_report(model: Classifier) -> WeightReport:
    """Mean |w| over the foreground and background partitions of the joint head."""
    if not isinstance(model, JointClassifier) or model.partition() is None:
        raise ContractError("weight report needs a joint model with a weight partition")
    wf, wb = model.partition_weights()
    return WeightReport(float(np.abs(wf).mean()), float(np.abs(wb).mean()))
