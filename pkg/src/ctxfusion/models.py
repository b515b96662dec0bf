"""Foreground/background extractors, unimodal and joint classifiers, training.

Extractors are small ReLU conv stacks.  After pretraining they are frozen and
truncated at ``tap_layer``: the pretraining head and every stage after the tap
are dropped.  Classifiers consume the tap maps; the joint model fuses the two
streams either by channel concatenation plus two convs (``mid_conv``) or by
pooled-vector concatenation into a single linear head (``late_fc``).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import tensor as T
from .errors import (ConfigurationError, DimensionError, FormatError, NonFiniteError,
                     TrainingError)
from .perturb import PerturbationSpec, apply_batch, fgsm_batch
from .synthgen import LabeledImage, select, stack
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_MAGIC = b"CTXFCKPT"

FG, BG = "fg", "bg"


@dataclass
class ExtractorArch:
    stages: tuple[tuple[int, int, int], ...] = ((16, 3, 1), (32, 3, 2), (64, 3, 2), (64, 3, 2))
    tap_layer: int | None = None  # default: second-to-last stage
    in_channels: int = 3

    def __post_init__(self):
        self.stages = tuple(tuple(int(v) for v in s) for s in self.stages)
        if self.tap_layer is None:
            self.tap_layer = max(len(self.stages) - 2, 0)
        if not 0 <= self.tap_layer < len(self.stages):
            raise ConfigurationError(f"tap_layer {self.tap_layer} outside {len(self.stages)} stages")

    @property
    def tap_channels(self) -> int:
        return self.stages[self.tap_layer][0]

    def to_dict(self) -> dict:
        return {"stages": [list(s) for s in self.stages], "tap_layer": self.tap_layer,
                "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorArch":
        stages = d.get("stages")
        return cls(stages=tuple(tuple(s) for s in stages) if stages else cls.stages,
                   tap_layer=d.get("tap_layer"), in_channels=d.get("in_channels", 3))


@dataclass
class JointArch:
    fusion_mode: Literal["mid_conv", "late_fc"] = "late_fc"
    fusion_channels: tuple[int, int] = (128, 64)
    fusion_kernel: int = 3

    def __post_init__(self):
        if self.fusion_mode not in ("mid_conv", "late_fc"):
            raise ConfigurationError(f"unknown fusion_mode {self.fusion_mode!r}")
        self.fusion_channels = tuple(int(c) for c in self.fusion_channels)
        if len(self.fusion_channels) != 2:
            raise ConfigurationError("mid_conv fusion uses exactly two conv stages")

    def to_dict(self) -> dict:
        return {"fusion_mode": self.fusion_mode, "fusion_channels": list(self.fusion_channels),
                "fusion_kernel": self.fusion_kernel}

    @classmethod
    def from_dict(cls, d: dict) -> "JointArch":
        return cls(**d)


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    alpha: float = 0.0
    adversarial_eps: float | None = None
    weight_decay: float = 0.0
    clip_norm: float | None = None  # global gradient-norm cap

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.batch_size < 1:
            raise ConfigurationError("invalid optimizer settings")
        if self.adversarial_eps is not None and self.adversarial_eps < 0:
            raise ConfigurationError("adversarial_eps must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *tags])


def _checksum(params: Sequence[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# extractor


class Extractor:
    """Conv stack pretrained on objects (``object``) or scenes (``scene``)."""

    def __init__(self, arch: ExtractorArch, kind: str, n_outputs: int, seed: int = 0):
        self.arch = arch
        self.kind = kind
        self.seed = seed
        rng = _rng(seed, 101, 0 if kind == "object" else 1)
        self.stages: list[tuple[Tensor, Tensor]] = []
        cin = arch.in_channels
        for cout, k, _ in arch.stages:
            fan_in = cin * k * k
            self.stages.append((_uniform(rng, (cout, cin, k, k), np.sqrt(6.0 / fan_in)),
                                Tensor(np.zeros(cout), requires_grad=True)))
            cin = cout
        fan = arch.stages[-1][0]
        self.head: tuple[Tensor, Tensor] | None = (
            _uniform(rng, (n_outputs, fan), 1 / np.sqrt(fan)), _uniform(rng, (n_outputs,), 1 / np.sqrt(fan)))
        self.frozen = False
        self.pretrain_accuracy: float | None = None
        # fixed per-channel standardization of the tap, set from corpus statistics at freeze time
        self.tap_scale: Tensor | None = None
        self.tap_shift: Tensor | None = None

    @property
    def tap_channels(self) -> int:
        return self.arch.tap_channels

    def parameters(self) -> list[Tensor]:
        ps = [t for kb in self.stages for t in kb]
        ps += list(self.head) if self.head is not None else []
        ps += [self.tap_scale, self.tap_shift] if self.tap_scale is not None else []
        return ps

    def _run(self, x: Tensor, upto: int) -> Tensor:
        h = T.mul(T.add(x, -0.5), 4.0)
        for i, ((k, b), (_, ksize, stride)) in enumerate(zip(self.stages, self.arch.stages)):
            if i > upto:
                break
            h = T.relu(T.conv2d(h, k, b, stride=stride, padding=ksize // 2))
        return h

    def tap(self, x: Tensor) -> Tensor:
        """Feature map at the tap stage, ``[N, tap_channels, h, w]``."""
        h = self._run(x, self.arch.tap_layer)
        if self.tap_scale is not None:
            h = T.channel_affine(h, self.tap_scale.data, self.tap_shift.data)
        return h

    def pretrain_logits(self, x: Tensor) -> Tensor:
        if self.head is None:
            raise ConfigurationError("extractor head was discarded at freeze time")
        h = self._run(x, len(self.stages) - 1)
        return T.linear(T.avg_pool_global(h), *self.head)

    def freeze(self, calibration: np.ndarray | None = None) -> "Extractor":
        """Drop the head and post-tap stages, stop gradients, and (given
        calibration images) standardize tap channels with their statistics."""
        self.stages = self.stages[: self.arch.tap_layer + 1]
        self.head = None
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        if calibration is not None and len(calibration):
            self.tap_scale = self.tap_shift = None
            maps = self.maps(calibration)
            mean = maps.mean(axis=(0, 2, 3))
            std = maps.std(axis=(0, 2, 3))
            scale = np.where(std > 1e-8, 1.0 / np.maximum(std, 1e-8), 1.0)
            self.tap_scale = Tensor(scale)
            self.tap_shift = Tensor(-mean * scale)
        return self

    def checksum(self) -> str:
        return _checksum(self.parameters())

    def maps(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Tap maps for a stacked image batch, without building gradients."""
        outs = [self.tap(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0,))


# ---------------------------------------------------------------------------
# classifiers


class Classifier:
    """Frozen extractor streams followed by a trainable head."""

    kind = "classifier"
    streams: tuple[str, ...] = ()

    def __init__(self, extractors: dict[str, Extractor], n_classes: int, seed: int):
        for name, e in extractors.items():
            if not e.frozen:
                raise ConfigurationError(f"{name} extractor must be frozen before building a classifier")
        self.extractors = extractors
        self.n_classes = n_classes
        self.seed = seed
        self.head: dict[str, Tensor] = {}

    def head_parameters(self) -> list[Tensor]:
        return list(self.head.values())

    def logits_from_maps(self, maps: dict[str, Tensor]) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4:
            raise DimensionError(f"model input must be [N,3,H,W], got {x.shape}")
        return self.logits_from_maps({s: self.extractors[s].tap(x) for s in self.streams})

    def fg_penalty_terms(self) -> list[Tensor]:
        """Slices of head parameters forming the foreground weights."""
        return []

    def partition(self) -> list[str] | None:
        return None

    def maps(self, x: np.ndarray) -> dict[str, np.ndarray]:
        return {s: self.extractors[s].maps(x) for s in self.streams}

    def logits(self, maps: dict[str, np.ndarray], batch_size: int = 512) -> np.ndarray:
        n = len(next(iter(maps.values())))
        outs = [self.logits_from_maps({k: Tensor(v[i:i + batch_size]) for k, v in maps.items()}).data
                for i in range(0, n, batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.n_classes))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(self.maps(x)).argmax(axis=1)

    def arch_dict(self) -> dict:
        return {}


class UnimodalClassifier(Classifier):
    """Extractor tap -> global average pool -> linear."""

    kind = "unimodal"

    def __init__(self, extractor: Extractor, n_classes: int, seed: int = 0, stream: str | None = None):
        stream = stream or (FG if extractor.kind == "object" else BG)
        super().__init__({stream: extractor}, n_classes, seed)
        self.streams = (stream,)
        d = extractor.tap_channels
        rng = _rng(seed, 202, 0 if stream == FG else 1)
        self.head = {"weight": _uniform(rng, (n_classes, d), 1 / np.sqrt(d)),
                     "bias": _uniform(rng, (n_classes,), 1 / np.sqrt(d))}

    @property
    def feature_dim(self) -> int:
        return self.head["weight"].shape[1]

    def logits_from_maps(self, maps):
        f = T.avg_pool_global(maps[self.streams[0]])
        return T.linear(f, self.head["weight"], self.head["bias"])


class JointClassifier(Classifier):
    kind = "joint"
    streams = (FG, BG)

    def __init__(self, fg: Extractor, bg: Extractor, arch: JointArch, n_classes: int, seed: int = 0):
        super().__init__({FG: fg, BG: bg}, n_classes, seed)
        self.arch = arch
        self.fg_dim = fg.tap_channels
        self.bg_dim = bg.tap_channels
        rng = _rng(seed, 303, 0 if arch.fusion_mode == "late_fc" else 1)
        if arch.fusion_mode == "late_fc":
            d = self.fg_dim + self.bg_dim
            self.head = {"weight": _uniform(rng, (n_classes, d), 1 / np.sqrt(d)),
                         "bias": _uniform(rng, (n_classes,), 1 / np.sqrt(d))}
        else:
            k = arch.fusion_kernel
            c0 = self.fg_dim + self.bg_dim
            c1, c2 = arch.fusion_channels
            self.head = {
                "conv1.kernels": _uniform(rng, (c1, c0, k, k), np.sqrt(6.0 / (c0 * k * k))),
                "conv1.bias": Tensor(np.zeros(c1), requires_grad=True),
                "conv2.kernels": _uniform(rng, (c2, c1, k, k), np.sqrt(6.0 / (c1 * k * k))),
                "conv2.bias": Tensor(np.zeros(c2), requires_grad=True),
                "weight": _uniform(rng, (n_classes, c2), 1 / np.sqrt(c2)),
                "bias": _uniform(rng, (n_classes,), 1 / np.sqrt(c2)),
            }

    @property
    def fusion_mode(self) -> str:
        return self.arch.fusion_mode

    def fused_map(self, maps) -> Tensor:
        """Output of the last fusion conv (mid_conv only)."""
        fg, bg = maps[FG], maps[BG]
        if fg.shape[2:] != bg.shape[2:] or fg.shape[0] != bg.shape[0]:
            raise DimensionError(f"fg tap {fg.shape} and bg tap {bg.shape} differ spatially")
        h = T.concat_channels(fg, bg)
        p = self.arch.fusion_kernel // 2
        h = T.relu(T.conv2d(h, self.head["conv1.kernels"], self.head["conv1.bias"], padding=p))
        return T.relu(T.conv2d(h, self.head["conv2.kernels"], self.head["conv2.bias"], padding=p))

    def logits_from_maps(self, maps):
        if self.fusion_mode == "late_fc":
            f = T.concat([T.avg_pool_global(maps[FG]), T.avg_pool_global(maps[BG])], axis=1)
        else:
            f = T.avg_pool_global(self.fused_map(maps))
        return T.linear(f, self.head["weight"], self.head["bias"])

    def _fg_index(self):
        if self.fusion_mode == "late_fc":
            return "weight", (slice(None), slice(0, self.fg_dim))
        return "conv1.kernels", (slice(None), slice(0, self.fg_dim))

    def _bg_index(self):
        if self.fusion_mode == "late_fc":
            return "weight", (slice(None), slice(self.fg_dim, None))
        return "conv1.kernels", (slice(None), slice(self.fg_dim, None))

    def fg_penalty_terms(self):
        name, idx = self._fg_index()
        return [self.head[name][idx]]

    def partition(self) -> list[str]:
        """Stream owning each column of the head weight (late_fc) or each
        input channel of the first fusion conv (mid_conv)."""
        return [FG] * self.fg_dim + [BG] * self.bg_dim

    def partition_weights(self) -> tuple[np.ndarray, np.ndarray]:
        (nf, fi), (nb, bi) = self._fg_index(), self._bg_index()
        return self.head[nf].data[fi], self.head[nb].data[bi]

    def arch_dict(self) -> dict:
        return self.arch.to_dict()


def build_unimodal(extractor: Extractor, n_classes: int, seed: int = 0) -> UnimodalClassifier:
    if not extractor.frozen:
        raise ConfigurationError("extractor must be frozen")
    return UnimodalClassifier(extractor, n_classes, seed)


def build_joint(fg: Extractor, bg: Extractor, arch: JointArch | None = None, n_classes: int = 8,
                seed: int = 0, image_size: int | None = None) -> JointClassifier:
    arch = arch or JointArch()
    if not (fg.frozen and bg.frozen):
        raise ConfigurationError("extractors must be frozen")
    if image_size is not None:
        probe = Tensor(np.zeros((1, fg.arch.in_channels, image_size, image_size)))
        if fg.tap(probe).shape[2:] != bg.tap(probe).shape[2:]:
            raise DimensionError("fg and bg tap maps differ spatially")
    return JointClassifier(fg, bg, arch, n_classes, seed)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, split: str, loss: float, accuracy: float) -> None:
        self.rows.append({"epoch": epoch, "split": split, "loss": loss, "accuracy": accuracy})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "accuracy"])
        for r in self.rows:
            w.writerow([r["epoch"], r["split"], repr(float(r["loss"])), repr(float(r["accuracy"]))])
        return buf.getvalue()

    def last(self, split: str) -> dict:
        return [r for r in self.rows if r["split"] == split][-1]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _check_finite(loss: Tensor, epoch: int, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")


def pretrain_extractor(kind: str, corpus: Sequence[LabeledImage], arch: ExtractorArch | None = None,
                       config: TrainConfig | None = None) -> Extractor:
    """Train a fresh extractor on its corpus and return it frozen.

    Objects are labeled by class, scenes by supercategory.  Held-out
    accuracy on the corpus test split lands in ``pretrain_accuracy``.
    """
    arch = arch or ExtractorArch()
    config = config or TrainConfig(epochs=30)
    label_of = (lambda im: im.class_id) if kind == "object" else (lambda im: im.supercategory_id)
    if kind not in ("object", "scene"):
        raise ConfigurationError(f"unknown extractor kind {kind!r}")
    train = select(corpus, "train")
    test = select(corpus, "test")
    x = np.stack([im.pixels for im in train])
    y = np.array([label_of(im) for im in train])
    n_out = int(max(label_of(im) for im in corpus)) + 1
    ext = Extractor(arch, kind, n_out, seed=config.seed)
    opt = T.SGD(ext.parameters(), config.lr, config.momentum, config.clip_norm)
    rng = _rng(config.seed, 404, 0 if kind == "object" else 1)
    step = 0
    for epoch in range(config.epochs):
        total, correct, seen = 0.0, 0, 0
        for idx in _batches(len(x), config.batch_size, rng):
            opt.zero_grad()
            try:
                logits = ext.pretrain_logits(Tensor(x[idx]))
                loss = T.softmax_cross_entropy(logits, y[idx])
            except NonFiniteError as e:
                raise TrainingError(f"{kind} extractor diverged at epoch {epoch}, step {step}: {e}") from e
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.data.argmax(1) == y[idx]).sum())
            seen += len(idx)
            step += 1
        log.info("pretrain %s epoch %d loss %.4f acc %.3f", kind, epoch, total / seen, correct / seen)
    if test:
        xt = np.stack([im.pixels for im in test])
        yt = np.array([label_of(im) for im in test])
        pred = np.concatenate([ext.pretrain_logits(Tensor(xt[i:i + 256])).data.argmax(1)
                               for i in range(0, len(xt), 256)])
        ext.pretrain_accuracy = float((pred == yt).mean())
    return ext.freeze(calibration=x)


def head_loss(model: Classifier, maps: dict[str, Tensor], y: np.ndarray, alpha: float) -> tuple[Tensor, Tensor]:
    """Mean cross entropy plus ``alpha * ||theta_fg||^2``; returns (loss, logits)."""
    logits = model.logits_from_maps(maps)
    loss = T.softmax_cross_entropy(logits, y)
    if alpha > 0:
        terms = model.fg_penalty_terms()
        if not terms:
            raise ConfigurationError("alpha > 0 needs a model with foreground weights (joint)")
        for t in terms:
            loss = loss + T.mul(T.square_sum(t), alpha)
    return loss, logits


def train_head(model: Classifier, dataset: Sequence[LabeledImage], config: TrainConfig | None = None,
               cache: dict | None = None) -> tuple[Classifier, TrainLog]:
    """Fit the classifier head on the train split with extractors frozen.

    Tap maps are computed once and reused across epochs.  With
    ``adversarial_eps`` set, every batch is doubled with FGSM copies made
    against the current model.
    """
    config = config or TrainConfig()
    if config.alpha > 0 and not model.fg_penalty_terms():
        raise ConfigurationError("alpha > 0 is only defined for joint models")
    train, test = select(dataset, "train"), select(dataset, "test")
    if not train:
        raise ConfigurationError("training split is empty")
    xtr, ytr = stack(train)
    maps_tr = _cached_maps(model, xtr, cache, "train")
    maps_te = _cached_maps(model, stack(test)[0], cache, "test") if test else None
    yte = stack(test)[1] if test else None
    params = model.head_parameters()
    before = {s: e.checksum() for s, e in model.extractors.items()}
    opt = T.SGD(params, config.lr, config.momentum, config.clip_norm)
    rng = _rng(config.seed, 505)
    trainlog = TrainLog()
    step = 0
    for epoch in range(config.epochs):
        total, correct, seen = 0.0, 0, 0
        for idx in _batches(len(ytr), config.batch_size, rng):
            yb = ytr[idx]
            batch = {k: v[idx] for k, v in maps_tr.items()}
            if config.adversarial_eps:
                adv = fgsm_batch(model, xtr[idx], yb, config.adversarial_eps)
                adv_maps = model.maps(adv)
                batch = {k: np.concatenate([batch[k], adv_maps[k]]) for k in batch}
                yb = np.concatenate([yb, yb])
            opt.zero_grad()
            try:
                loss, logits = head_loss(model, {k: Tensor(v) for k, v in batch.items()}, yb, config.alpha)
            except NonFiniteError as e:
                raise TrainingError(
                    f"head training diverged at epoch {epoch}, step {step} (lr={config.lr}): {e}") from e
            T.backward(loss)
            if config.weight_decay:
                for p in params:
                    p.grad += config.weight_decay * p.data
            opt.step()
            total += loss.item() * len(yb)
            correct += int((logits.data.argmax(1) == yb).sum())
            seen += len(yb)
            step += 1
        trainlog.add(epoch, "train", total / seen, correct / seen)
        if maps_te is not None:
            lg = model.logits(maps_te)
            trainlog.add(epoch, "test", _mean_ce(lg, yte), float((lg.argmax(1) == yte).mean()))
    after = {s: e.checksum() for s, e in model.extractors.items()}
    if before != after:
        raise TrainingError("extractor parameters changed during head training")
    return model, trainlog


def _cached_maps(model: Classifier, x: np.ndarray, cache: dict | None, tag: str) -> dict[str, np.ndarray]:
    out = {}
    for s in model.streams:
        ext = model.extractors[s]
        key = (ext.checksum(), tag)
        if cache is not None and key in cache:
            out[s] = cache[key]
        else:
            out[s] = ext.maps(x)
            if cache is not None:
                cache[key] = out[s]
    return out


def _mean_ce(logits: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(-T.log_softmax(logits)[np.arange(len(y)), y].mean())


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[int, float]
    loss: float
    n: int
    predictions: np.ndarray

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "loss": self.loss, "n": self.n,
                "per_class": {str(k): v for k, v in self.per_class.items()}}


def score(logits: np.ndarray, y: np.ndarray) -> EvalResult:
    pred = logits.argmax(axis=1) if len(y) else np.zeros(0, dtype=int)
    per_class = {int(c): float((pred[y == c] == c).mean()) for c in np.unique(y)}
    acc = float((pred == y).mean()) if len(y) else float("nan")
    return EvalResult(acc, per_class, _mean_ce(logits, y), int(len(y)), pred)


def evaluate(model: Classifier, dataset: Sequence[LabeledImage],
             perturbation: PerturbationSpec | None = None, split: str | None = "test") -> EvalResult:
    """Accuracy (overall and per class) and mean loss, optionally after perturbing."""
    images = select(dataset, split) if split else list(dataset)
    x, y = stack(images)
    x = apply_batch(perturbation, x, y, [im.bbox for im in images], model=model)
    return score(model.logits(model.maps(x)), y)


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 LE header length, JSON header, LE float64 payload


def _extractor_header(e: Extractor) -> dict:
    return {"kind": e.kind, "arch": e.arch.to_dict(), "seed": e.seed, "frozen": e.frozen,
            "tap_norm": e.tap_scale is not None,
            "pretrain_accuracy": e.pretrain_accuracy,
            "n_outputs": e.head[0].shape[0] if e.head is not None else None}


def _named_params(obj) -> list[tuple[str, Tensor]]:
    if isinstance(obj, Extractor):
        out = []
        for i, (k, b) in enumerate(obj.stages):
            out += [(f"stage{i}.kernels", k), (f"stage{i}.bias", b)]
        if obj.head is not None:
            out += [("head.weight", obj.head[0]), ("head.bias", obj.head[1])]
        if obj.tap_scale is not None:
            out += [("tap_norm.scale", obj.tap_scale), ("tap_norm.shift", obj.tap_shift)]
        return out
    out = []
    for s in obj.streams:
        out += [(f"{s}.{n}", p) for n, p in _named_params(obj.extractors[s])]
    return out + [(f"head.{n}", p) for n, p in obj.head.items()]


def save_checkpoint(model: Classifier | Extractor, path: str | os.PathLike) -> Path:
    named = _named_params(model)
    offset = 0
    entries = []
    for name, p in named:
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.size
    header: dict = {"version": CHECKPOINT_VERSION, "params": entries, "payload_len": offset}
    if isinstance(model, Extractor):
        header.update(model="extractor", extractor=_extractor_header(model))
    else:
        header.update(model=model.kind, n_classes=model.n_classes, seed=model.seed,
                      streams=list(model.streams), arch=model.arch_dict(), partition=model.partition(),
                      extractors={s: _extractor_header(e) for s, e in model.extractors.items()})
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in named)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload)
    os.replace(tmp, path)
    return path


def _restore_extractor(h: dict) -> Extractor:
    e = Extractor(ExtractorArch.from_dict(h["arch"]), h["kind"], h.get("n_outputs") or 1, seed=h["seed"])
    e.pretrain_accuracy = h.get("pretrain_accuracy")
    if h.get("frozen"):
        e.freeze()
    if h.get("tap_norm"):
        c = e.tap_channels
        e.tap_scale, e.tap_shift = Tensor(np.ones(c)), Tensor(np.zeros(c))
    return e


def load_checkpoint(path: str | os.PathLike) -> Classifier | Extractor:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"file: cannot read {path} ({e})") from e
    if raw[:len(_MAGIC)] != _MAGIC:
        raise FormatError("magic: not a checkpoint file")
    if len(raw) < len(_MAGIC) + 8:
        raise FormatError("header_len: file truncated")
    (hlen,) = struct.unpack("<Q", raw[len(_MAGIC):len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    if len(raw) < start + hlen:
        raise FormatError("header: file truncated")
    try:
        header = json.loads(raw[start:start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"header: corrupt JSON ({e})") from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"version: expected {CHECKPOINT_VERSION}, found {header.get('version')!r}")
    payload = raw[start + hlen:]
    if len(payload) != 8 * header["payload_len"]:
        raise FormatError(f"payload: expected {8 * header['payload_len']} bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f8")
    try:
        kind = header["model"]
        if kind == "extractor":
            model = _restore_extractor(header["extractor"])
        else:
            exts = {s: _restore_extractor(h) for s, h in header["extractors"].items()}
            if kind == "unimodal":
                (s,) = header["streams"]
                model = UnimodalClassifier(exts[s], header["n_classes"], header["seed"], stream=s)
            elif kind == "joint":
                model = JointClassifier(exts[FG], exts[BG], JointArch.from_dict(header["arch"]),
                                        header["n_classes"], header["seed"])
                if model.partition() != header.get("partition"):
                    raise FormatError("partition: stored map does not match the architecture")
            else:
                raise FormatError(f"model: unknown kind {kind!r}")
    except KeyError as e:
        raise FormatError(f"{e.args[0]}: missing from header") from e
    named = dict(_named_params(model))
    if set(named) != {p["name"] for p in header["params"]}:
        raise FormatError("params: names do not match the architecture")
    for entry in header["params"]:
        p = named[entry["name"]]
        if list(p.shape) != entry["shape"]:
            raise FormatError(f"params.{entry['name']}: shape {entry['shape']} != {list(p.shape)}")
        p.data = values[entry["offset"]:entry["offset"] + p.size].reshape(p.shape).copy()
    return model


def weight_partition(model: Classifier) -> list[str] | None:
    return model.partition()
