"""Experiment orchestration: dataset, extractors, classifiers and the sweeps.

A :class:`Lab` owns one output directory.  It loads artifacts that already
exist there (datasets, checkpoints) and otherwise builds them, provided the
config allows training.  Sweeps evaluate every model on every split at every
perturbation level; perturbed images and tap maps are computed once per level
and shared by all models.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis
from .errors import ConfigurationError, CtxFusionError
from .models import (BG, FG, Classifier, ExtractorArch, JointArch, TrainConfig,
                     build_joint, build_unimodal, load_checkpoint, pretrain_extractor, save_checkpoint,
                     score, train_head)
from .perturb import blur_batch, fgsm_batch
from .synthgen import (DatasetSpec, LabeledImage, export_dataset, generate_dataset, import_dataset,
                       pretraining_corpus, select, split_mask, stack)

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["model", "split", "kind", "level", "accuracy", "loss", "n"]
SPLITS = ("all", "dissimilar", "similar")


class MissingCheckpointError(CtxFusionError, FileNotFoundError):
    pass


def _increasing(xs: Sequence[float], name: str, allow_zero: bool = False) -> list[float]:
    xs = [float(v) for v in xs]
    if not xs:
        raise ConfigurationError(f"{name} grid is empty")
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise ConfigurationError(f"{name} grid must be strictly increasing")
    if xs[0] < 0 or (xs[0] == 0 and not allow_zero):
        raise ConfigurationError(f"{name} grid values must be positive")
    return xs


def geometric_grid(lo: float, hi: float, n: int) -> list[float]:
    if n == 1:
        return [float(lo)]
    return [float(v) for v in np.geomspace(lo, hi, n)]


def _desk_dataset() -> DatasetSpec:
    return DatasetSpec(image_size=24, samples_per_class=300, context_purity=0.7)


@dataclass
class ExperimentConfig:
    """Everything one experiment needs.  The defaults are a desk-scale
    profile: a full run (both extractors, heads, every sweep) takes minutes
    on one CPU core."""

    dataset: DatasetSpec = field(default_factory=_desk_dataset)
    object_samples: int = 600  # per class, object pretraining corpus
    scene_samples: int = 200  # per supercategory, scene pretraining corpus
    extractor: ExtractorArch = field(default_factory=ExtractorArch)
    joint: JointArch = field(default_factory=lambda: JointArch("late_fc"))
    models: tuple[str, ...] = ("fg", "bg", "joint")
    alpha: float = 0.0
    pretrain_fg: TrainConfig = field(
        default_factory=lambda: TrainConfig(lr=0.04, epochs=14, batch_size=32, clip_norm=5.0))
    pretrain_bg: TrainConfig = field(
        default_factory=lambda: TrainConfig(lr=0.04, epochs=8, batch_size=32, clip_norm=5.0))
    head: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.05, epochs=20, batch_size=64,
                                                                  weight_decay=0.01))
    sigmas: list[float] = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0])
    moderate_sigma: float = 2.0
    epsilons: list[float] = field(default_factory=lambda: [0.01, 0.02, 0.03, 0.05])
    alphas: list[float] = field(default_factory=lambda: geometric_grid(0.1, 10.0, 5))
    alpha_joint_mode: str = "late_fc"
    fgsm_joint_mode: str = "late_fc"
    reference_eps: float = 0.03
    retrain_eps: float | None = None  # FGSM strength for adversarial retraining; default reference_eps
    pca_sigma: float | None = None  # default: the moderate sigma
    cam_images: int = 100
    cam_render: int = 6
    splits: tuple[str, ...] = SPLITS
    out: str = "runs/default"
    seed: int = 0
    train_enabled: bool = True

    def __post_init__(self):
        self.sigmas = _increasing(self.sigmas, "sigma")
        self.epsilons = _increasing(self.epsilons, "epsilon")
        self.alphas = _increasing(self.alphas, "alpha")
        for s in self.splits:
            if s not in SPLITS:
                raise ConfigurationError(f"unknown split {s!r}")
        for m in self.models:
            if m not in ("fg", "bg", "joint"):
                raise ConfigurationError(f"unknown model {m!r}")
        if self.moderate_sigma <= 0:
            raise ConfigurationError("moderate_sigma must be positive")
        if self.alpha_joint_mode not in ("late_fc", "mid_conv") or self.fgsm_joint_mode not in ("late_fc", "mid_conv"):
            raise ConfigurationError("joint modes must be late_fc or mid_conv")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        seed = int(seed)
        return replace(self, seed=seed, dataset=replace(self.dataset, seed=seed),
                       pretrain_fg=replace(self.pretrain_fg, seed=seed),
                       pretrain_bg=replace(self.pretrain_bg, seed=seed), head=replace(self.head, seed=seed))

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "object_samples": self.object_samples,
            "scene_samples": self.scene_samples,
            "extractor": self.extractor.to_dict(),
            "joint": self.joint.to_dict(),
            "models": list(self.models),
            "alpha": self.alpha,
            "pretrain_fg": self.pretrain_fg.to_dict(),
            "pretrain_bg": self.pretrain_bg.to_dict(),
            "head": self.head.to_dict(),
            "sigmas": self.sigmas,
            "moderate_sigma": self.moderate_sigma,
            "epsilons": self.epsilons,
            "alphas": self.alphas,
            "alpha_joint_mode": self.alpha_joint_mode,
            "fgsm_joint_mode": self.fgsm_joint_mode,
            "reference_eps": self.reference_eps,
            "retrain_eps": self.retrain_eps,
            "pca_sigma": self.pca_sigma,
            "cam_images": self.cam_images,
            "cam_render": self.cam_render,
            "splits": list(self.splits),
            "out": self.out,
            "seed": self.seed,
            "train_enabled": self.train_enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        if "dataset" in d:
            d["dataset"] = DatasetSpec.from_dict(d["dataset"])
        if "extractor" in d:
            d["extractor"] = ExtractorArch.from_dict(d["extractor"])
        if "joint" in d:
            d["joint"] = JointArch.from_dict(d["joint"])
        for k in ("pretrain_fg", "pretrain_bg", "head"):
            if k in d:
                d[k] = TrainConfig.from_dict(d[k])
        for k in ("models", "splits"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config {path}: invalid JSON ({e})") from e


# ---------------------------------------------------------------------------
# sweep results


@dataclass
class SweepResult:
    rows: list[dict] = field(default_factory=list)

    def add(self, model: str, split: str, kind: str, level: float, accuracy: float, loss: float, n: int) -> None:
        self.rows.append({"model": model, "split": split, "kind": kind, "level": float(level),
                          "accuracy": float(accuracy), "loss": float(loss), "n": int(n)})

    def extend(self, other: "SweepResult") -> None:
        self.rows.extend(other.rows)

    def get(self, model: str, split: str, kind: str, level: float) -> dict:
        for r in self.rows:
            if r["model"] == model and r["split"] == split and r["kind"] == kind and r["level"] == level:
                return r
        raise KeyError((model, split, kind, level))

    def accuracy(self, model: str, split: str, kind: str, level: float) -> float:
        return self.get(model, split, kind, level)["accuracy"]

    def curve(self, model: str, split: str, kind: str) -> tuple[np.ndarray, np.ndarray]:
        pts = sorted((r["level"], r["accuracy"]) for r in self.rows
                     if r["model"] == model and r["split"] == split and r["kind"] == kind)
        return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])

    def check_complete(self) -> None:
        """Every (model, split, kind, level) cell present exactly once."""
        keys = [(r["model"], r["split"], r["kind"], r["level"]) for r in self.rows]
        if len(set(keys)) != len(keys):
            raise ConfigurationError("duplicate sweep cells")
        models = {k[0] for k in keys}
        splits = {k[1] for k in keys}
        for kind in {k[2] for k in keys}:
            levels = {k[3] for k in keys if k[2] == kind}
            kmodels = {k[0] for k in keys if k[2] == kind}
            for m in kmodels:
                for s in splits:
                    for lv in levels:
                        if (m, s, kind, lv) not in set(keys):
                            raise ConfigurationError(f"missing sweep cell {(m, s, kind, lv)}")
        for r in self.rows:
            if not (0.0 <= r["accuracy"] <= 1.0):
                raise ConfigurationError("accuracy outside [0, 1]")
        del models

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([r["model"], r["split"], r["kind"], repr(r["level"]), repr(r["accuracy"]),
                        repr(r["loss"]), r["n"]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SweepResult":
        res = cls()
        for r in csv.DictReader(io.StringIO(text)):
            res.add(r["model"], r["split"], r["kind"], float(r["level"]), float(r["accuracy"]),
                    float(r["loss"]), int(r["n"]))
        return res


def auc(levels: np.ndarray, acc: np.ndarray) -> float:
    """Trapezoidal area under an accuracy curve."""
    return float(np.sum((levels[1:] - levels[:-1]) * (acc[1:] + acc[:-1]) / 2.0))


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


# ---------------------------------------------------------------------------
# lab


class Lab:
    """Artifacts of one experiment, cached in memory and under ``out``."""

    def __init__(self, config: ExperimentConfig, out: str | os.PathLike | None = None, persist: bool = True):
        self.config = config
        self.out = Path(out if out is not None else config.out)
        self.persist = persist
        self._data: dict[str, list[LabeledImage]] = {}
        self._models: dict[str, Classifier] = {}
        self._extractors: dict[str, object] = {}
        self._cache: dict = {}
        self.written: list[Path] = []

    # paths
    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    @property
    def ckpt_dir(self) -> Path:
        return self.out / "checkpoints"

    @property
    def results_dir(self) -> Path:
        return self.out / "results"

    def _note(self, path: Path) -> Path:
        self.written.append(path)
        return path

    # data
    def _load_or_make(self, name: str, make) -> list[LabeledImage]:
        if name in self._data:
            return self._data[name]
        d = self.data_dir / name
        if (d / "manifest.json").exists():
            data = import_dataset(d)
        else:
            data = make()
            if self.persist:
                self._note(export_dataset(data, d, self.config.dataset))
        self._data[name] = data
        return data

    def dataset(self) -> list[LabeledImage]:
        return self._load_or_make("composite", lambda: generate_dataset(self.config.dataset))

    def corpus(self, kind: str) -> list[LabeledImage]:
        n = self.config.object_samples if kind == "object" else self.config.scene_samples
        return self._load_or_make(kind, lambda: pretraining_corpus(kind, self.config.dataset, n))

    def generate(self) -> list[Path]:
        self.dataset()
        self.corpus("object")
        self.corpus("scene")
        return [self.data_dir / n / "manifest.json" for n in ("composite", "object", "scene")]

    def test_set(self) -> list[LabeledImage]:
        return select(self.dataset(), "test")

    # models
    def _ckpt(self, name: str) -> Path:
        return self.ckpt_dir / f"{name}.ckpt"

    def _require_training(self, path: Path) -> None:
        if not self.config.train_enabled:
            raise MissingCheckpointError(f"missing checkpoint {path} and training is disabled in the config")

    def extractor(self, stream: str):
        if stream in self._extractors:
            return self._extractors[stream]
        path = self._ckpt(f"{stream}_extractor")
        if path.exists():
            ext = load_checkpoint(path)
        else:
            self._require_training(path)
            kind = "object" if stream == FG else "scene"
            tc = self.config.pretrain_fg if stream == FG else self.config.pretrain_bg
            ext = pretrain_extractor(kind, self.corpus(kind), self.config.extractor, tc)
            log.info("%s extractor held-out accuracy %.3f", stream, ext.pretrain_accuracy)
            if self.persist:
                self._note(save_checkpoint(ext, path))
        self._extractors[stream] = ext
        return ext

    def pretrain(self) -> list[Path]:
        self.extractor(FG)
        self.extractor(BG)
        return [self._ckpt("fg_extractor"), self._ckpt("bg_extractor")]

    def model(self, name: str, *, mode: str | None = None, alpha: float | None = None,
              adversarial_eps: float | None = None) -> Classifier:
        """``fg``, ``bg`` or ``joint`` (optionally with a fusion mode, alpha,
        or adversarial retraining)."""
        key = self.model_key(name, mode=mode, alpha=alpha, adversarial_eps=adversarial_eps)
        if key in self._models:
            return self._models[key]
        path = self._ckpt(key)
        if path.exists():
            model = load_checkpoint(path)
            # share the lab's extractor objects so tap maps are cached once
            for s in model.streams:
                if s in self._extractors or self._ckpt(f"{s}_extractor").exists():
                    ext = self.extractor(s)
                    if ext.checksum() == model.extractors[s].checksum():
                        model.extractors[s] = ext
        else:
            self._require_training(path)
            cfg = self.config
            n = cfg.dataset.n_classes
            if name in (FG, BG):
                model = build_unimodal(self.extractor(name), n, cfg.head.seed)
                tc = cfg.head
            elif name == "joint":
                arch = replace(cfg.joint, fusion_mode=mode or cfg.joint.fusion_mode)
                model = build_joint(self.extractor(FG), self.extractor(BG), arch, n, cfg.head.seed)
                a = cfg.alpha if alpha is None else alpha
                tc = replace(cfg.head, alpha=a, adversarial_eps=adversarial_eps)
            else:
                raise ConfigurationError(f"unknown model {name!r}")
            model, trainlog = train_head(model, self.dataset(), tc, self._cache)
            if self.persist:
                self._note(save_checkpoint(model, path))
                self._note(write_text(self.out / "logs" / f"train_{key}.csv", trainlog.to_csv()))
        self._models[key] = model
        return model

    def model_key(self, name: str, *, mode: str | None = None, alpha: float | None = None,
                  adversarial_eps: float | None = None) -> str:
        if name != "joint":
            return name
        mode = mode or self.config.joint.fusion_mode
        a = self.config.alpha if alpha is None else alpha
        key = f"joint_{mode}"
        if a:
            key += f"_alpha{a:g}"
        if adversarial_eps:
            key += f"_adv{adversarial_eps:g}"
        return key

    def train(self) -> list[Path]:
        names = []
        for m in self.config.models:
            self.model(m)
            names.append(self._ckpt(self.model_key(m)))
        return names

    # evaluation machinery
    def _maps(self, stream: str, x: np.ndarray, tag) -> np.ndarray:
        ext = self.extractor(stream)
        key = ("eval", stream, tag)
        if key not in self._cache:
            self._cache[key] = ext.maps(x)
        return self._cache[key]

    def evaluate_models(self, models: dict[str, Classifier], x: np.ndarray, y: np.ndarray, tag,
                        kind: str, level: float, result: SweepResult, splits: Sequence[str]) -> None:
        test = self.test_set()
        masks = {s: split_mask(test, s) for s in splits}
        for name, model in models.items():
            maps = {s: self._maps(s, x, tag) for s in model.streams}
            logits = model.logits(maps)
            for s, m in masks.items():
                r = score(logits[m], y[m])
                result.add(name, s, kind, level, r.accuracy, r.loss, r.n)

    def drop_eval_cache(self) -> None:
        for k in [k for k in self._cache if k[0] == "eval"]:
            del self._cache[k]


def _lab(config_or_lab) -> Lab:
    return config_or_lab if isinstance(config_or_lab, Lab) else Lab(config_or_lab)


def _standard_models(lab: Lab, joint_mode: str | None = None) -> dict[str, Classifier]:
    out = {}
    for m in lab.config.models:
        if m == "joint":
            out["joint"] = lab.model("joint", mode=joint_mode)
        else:
            out[m] = lab.model(m)
    return out


def run_blur_sweep(config_or_lab, plot: bool = True) -> SweepResult:
    """Every model x split x (clean + sigma grid) x {bbox, whole} blur."""
    lab = _lab(config_or_lab)
    cfg = lab.config
    models = _standard_models(lab)
    test = lab.test_set()
    x, y = stack(test)
    boxes = [im.bbox for im in test]
    res = SweepResult()
    for region in ("bbox", "whole"):
        kind = f"blur_{region}"
        lab.evaluate_models(models, x, y, "clean", kind, 0.0, res, cfg.splits)
        for sigma in cfg.sigmas:
            xb = blur_batch(x, boxes, sigma, region)
            lab.evaluate_models(models, xb, y, (kind, sigma), kind, sigma, res, cfg.splits)
    lab.drop_eval_cache()
    res.check_complete()
    if lab.persist:
        path = lab._note(write_text(lab.results_dir / "blur_sweep.csv", res.to_csv()))
        if plot:
            from . import plotting
            lab.written += plotting.plot_blur_sweep(path, lab.results_dir)
    return res


def fgsm_images(lab: Lab, source: Classifier, eps: float) -> np.ndarray:
    key = ("fgsm_x", eps)
    if key not in lab._cache:
        x, y = stack(lab.test_set())
        lab._cache[key] = fgsm_batch(source, x, y, eps)
    return lab._cache[key]


def run_fgsm_sweep(config_or_lab, plot: bool = True) -> SweepResult:
    """FGSM crafted on the fg classifier; every model scored on the same images."""
    lab = _lab(config_or_lab)
    cfg = lab.config
    models = _standard_models(lab, joint_mode=cfg.fgsm_joint_mode)
    source = lab.model(FG)
    x, y = stack(lab.test_set())
    res = SweepResult()
    lab.evaluate_models(models, x, y, "clean", "fgsm", 0.0, res, cfg.splits)
    for eps in cfg.epsilons:
        lab.evaluate_models(models, fgsm_images(lab, source, eps), y, ("fgsm", eps), "fgsm", eps, res, cfg.splits)
    lab.drop_eval_cache()
    res.check_complete()
    if lab.persist:
        path = lab._note(write_text(lab.results_dir / "fgsm_sweep.csv", res.to_csv()))
        if plot:
            from . import plotting
            lab.written += plotting.plot_fgsm_sweep(path, lab.results_dir)
    return res


@dataclass
class AlphaSweep:
    result: SweepResult
    weights: list[dict]

    def weights_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "alpha", "fg_mean_abs", "bg_mean_abs", "ratio"])
        for r in self.weights:
            w.writerow([r["model"], repr(r["alpha"]), repr(r["fg_mean_abs"]), repr(r["bg_mean_abs"]),
                        repr(r["ratio"])])
        return buf.getvalue()


def alpha_model_name(alpha: float) -> str:
    return f"joint_alpha={alpha:g}"


def run_alpha_sweep(config_or_lab, plot: bool = True) -> AlphaSweep:
    """Retrain the joint head for alpha in {0} + grid plus an adversarially
    retrained baseline; score all of them under fg-sourced FGSM."""
    lab = _lab(config_or_lab)
    cfg = lab.config
    mode = cfg.alpha_joint_mode
    retrain_eps = cfg.retrain_eps if cfg.retrain_eps is not None else cfg.reference_eps
    models: dict[str, Classifier] = {FG: lab.model(FG), BG: lab.model(BG)}
    weights = []
    for a in [0.0] + cfg.alphas:
        m = lab.model("joint", mode=mode, alpha=a)
        models[alpha_model_name(a)] = m
        rep = analysis.weight_magnitude_report(m)
        weights.append({"model": alpha_model_name(a), "alpha": a, "fg_mean_abs": rep.fg_mean_abs,
                        "bg_mean_abs": rep.bg_mean_abs, "ratio": rep.ratio})
    adv = lab.model("joint", mode=mode, alpha=0.0, adversarial_eps=retrain_eps)
    models["joint_adv"] = adv
    rep = analysis.weight_magnitude_report(adv)
    weights.append({"model": "joint_adv", "alpha": 0.0, "fg_mean_abs": rep.fg_mean_abs,
                    "bg_mean_abs": rep.bg_mean_abs, "ratio": rep.ratio})
    x, y = stack(lab.test_set())
    res = SweepResult()
    levels = sorted(set(cfg.epsilons) | {cfg.reference_eps})
    lab.evaluate_models(models, x, y, "clean", "fgsm", 0.0, res, cfg.splits)
    for eps in levels:
        lab.evaluate_models(models, fgsm_images(lab, models[FG], eps), y, ("fgsm", eps), "fgsm", eps,
                            res, cfg.splits)
    lab.drop_eval_cache()
    res.check_complete()
    sweep = AlphaSweep(res, weights)
    if lab.persist:
        path = lab._note(write_text(lab.results_dir / "alpha_sweep.csv", res.to_csv()))
        wpath = lab._note(write_text(lab.results_dir / "alpha_weights.csv", sweep.weights_csv()))
        if plot:
            from . import plotting
            lab.written += plotting.plot_alpha_sweep(path, wpath, lab.results_dir, cfg.reference_eps)
    return sweep


def run_eval(config_or_lab) -> SweepResult:
    lab = _lab(config_or_lab)
    models = _standard_models(lab)
    x, y = stack(lab.test_set())
    res = SweepResult()
    lab.evaluate_models(models, x, y, "clean", "clean", 0.0, res, lab.config.splits)
    lab.drop_eval_cache()
    if lab.persist:
        lab._note(write_text(lab.results_dir / "eval.csv", res.to_csv()))
    return res


# ---------------------------------------------------------------------------
# analyses


@dataclass
class PcaReport:
    sigma: float
    shifts: dict[str, analysis.ShiftResult]
    batches: dict[str, tuple[analysis.FeatureBatch, analysis.FeatureBatch]]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "sigma", "score", "displacement", "spread"])
        for s, r in self.shifts.items():
            w.writerow([s, repr(self.sigma), repr(r.score), repr(r.displacement), repr(r.spread)])
        return buf.getvalue()


def default_pca_sigma(cfg: ExperimentConfig) -> float:
    return cfg.pca_sigma if cfg.pca_sigma is not None else cfg.moderate_sigma


def run_pca(config_or_lab, sigma: float | None = None, plot: bool = True) -> PcaReport:
    """Shift of fg and bg pooled features under fg-only blur, in the clean PCA plane."""
    lab = _lab(config_or_lab)
    sigma = default_pca_sigma(lab.config) if sigma is None else float(sigma)
    test = lab.test_set()
    x, y = stack(test)
    xb = blur_batch(x, [im.bbox for im in test], sigma, "bbox")
    shifts, batches = {}, {}
    for stream in (FG, BG):
        ext = lab.extractor(stream)
        clean = analysis.FeatureBatch(ext.maps(x).mean(axis=(2, 3)), y, stream, "clean")
        pert = analysis.FeatureBatch(ext.maps(xb).mean(axis=(2, 3)), y, stream, "perturbed")
        shifts[stream] = analysis.subspace_shift(clean, pert, k=2)
        batches[stream] = (clean, pert)
    rep = PcaReport(sigma, shifts, batches)
    if lab.persist:
        lab._note(write_text(lab.results_dir / "pca_shift.csv", rep.csv()))
        proj_text = ""
        for stream in (FG, BG):
            pca = shifts[stream].pca
            text = analysis.projections_csv(pca, batches[stream])
            proj_text += text if not proj_text else text.split("\n", 1)[1]
        ppath = lab._note(write_text(lab.results_dir / "pca_projections.csv", proj_text))
        if plot:
            from . import plotting
            lab.written += plotting.plot_pca(ppath, lab.results_dir)
    return rep


@dataclass
class CamReport:
    mass: dict[str, list[float]]
    bbox_fraction: list[float]

    def mean(self, model: str) -> float:
        return float(np.mean(self.mass[model]))

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "mean_mass_inside_bbox", "mean_bbox_area_fraction", "n"])
        for m, v in self.mass.items():
            w.writerow([m, repr(float(np.mean(v))), repr(float(np.mean(self.bbox_fraction))), len(v)])
        return buf.getvalue()


def run_cam(config_or_lab, n_images: int | None = None, render: int | None = None) -> CamReport:
    """Grad-CAM mass inside the bbox for fg, bg and joint on test images."""
    lab = _lab(config_or_lab)
    cfg = lab.config
    n_images = cfg.cam_images if n_images is None else n_images
    render = cfg.cam_render if render is None else render
    test = lab.test_set()
    pick = np.random.default_rng([cfg.seed, 606]).permutation(len(test))[:n_images]
    models = {FG: lab.model(FG), BG: lab.model(BG), "joint": lab.model("joint")}
    mass = {m: [] for m in models}
    frac = []
    rendered = []
    for j, i in enumerate(pick):
        im = test[int(i)]
        x0, y0, x1, y1 = im.bbox
        frac.append((x1 - x0) * (y1 - y0) / (im.size[0] * im.size[1]))
        for name, model in models.items():
            cam = analysis.grad_cam(model, im.pixels, im.class_id)
            mass[name].append(cam.mass_inside(im.bbox))
            if j < render:
                rendered.append((j, name, im, cam))
    rep = CamReport(mass, frac)
    if lab.persist:
        lab._note(write_text(lab.results_dir / "cam_mass.csv", rep.csv()))
        from . import plotting
        for j, name, im, cam in rendered:
            stem = lab.results_dir / "cam" / f"img{j:03d}_{name}"
            lab._note(plotting.write_pgm(stem.with_suffix(".pgm"), cam.heatmap))
            lab._note(plotting.cam_overlay(stem.with_suffix(".svg"), im.pixels, cam.heatmap, im.bbox,
                                           f"{name} class {im.class_id}"))
    return rep


def run_report(out: str | os.PathLike) -> tuple[Path, list[dict]]:
    """Concatenate every results CSV under ``out`` into ``summary.csv``."""
    out = Path(out)
    files = sorted(p for p in out.rglob("*.csv") if p.name != "summary.csv")
    if not files:
        raise ConfigurationError(f"no CSV files under {out}")
    rows, columns = [], ["file"]
    for f in files:
        for r in csv.DictReader(io.StringIO(f.read_text())):
            rows.append({"file": str(f.relative_to(out)), **r})
            for k in r:
                if k not in columns:
                    columns.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, restval="", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return write_text(out / "summary.csv", buf.getvalue()), rows
