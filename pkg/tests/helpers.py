"""Shared fixtures-as-functions: tiny frozen extractors and model gradient checks."""

import numpy as np

from ctxfusion import models as M
from ctxfusion import tensor as T
from ctxfusion.models import Extractor, ExtractorArch
from ctxfusion.tensor import Tensor

# Central-difference step.  Small enough that a step rarely straddles a ReLU
# kink (where finite differences are wrong, not the analytic gradient), large
# enough that float64 roundoff stays near 1e-10.
STEP = 1e-6

TINY_ARCH = ExtractorArch(stages=((4, 3, 1), (6, 3, 2), (8, 3, 2)), tap_layer=1)


def frozen_extractor(kind: str, seed: int = 0, size: int = 12, arch: ExtractorArch = TINY_ARCH,
                     n_out: int = 4) -> Extractor:
    calib = np.random.default_rng([seed, 7]).uniform(size=(16, 3, size, size))
    return Extractor(arch, kind, n_out, seed=seed).freeze(calibration=calib)


def tiny_models(n_classes: int = 4, seed: int = 0):
    fg, bg = frozen_extractor("object", seed), frozen_extractor("scene", seed + 1)
    return {
        "fg": M.build_unimodal(fg, n_classes, seed),
        "bg": M.build_unimodal(bg, n_classes, seed),
        "joint_late_fc": M.build_joint(fg, bg, M.JointArch("late_fc"), n_classes, seed),
        "joint_mid_conv": M.build_joint(fg, bg, M.JointArch("mid_conv", (6, 5)), n_classes, seed),
    }


def model_loss(model, x: Tensor, y, alpha: float) -> Tensor:
    loss = T.softmax_cross_entropy(model.forward(x), y)
    for t in model.fg_penalty_terms() if alpha > 0 else []:
        loss = T.add(loss, T.mul(T.square_sum(t), alpha))
    return loss


def _coords(size: int, sample: int | None, seed: int):
    if sample is None or sample >= size:
        return None
    return np.random.default_rng([seed, size]).choice(size, sample, replace=False)


def model_grad_errors(model, x: np.ndarray, y, alpha: float = 0.0, sample: int | None = None,
                      seed: int = 0) -> dict[str, float]:
    """Max relative error of the analytic gradient w.r.t. the input and every head parameter.

    ``sample`` checks that many random coordinates per tensor instead of all.
    """
    errors = {"input": T.grad_check(lambda t: model_loss(model, t, y, alpha), x, h=STEP,
                                    coords=_coords(x.size, sample, seed))}
    for name, p in list(model.head.items()):
        def f(t, name=name, p=p):
            model.head[name] = t
            try:
                return model_loss(model, Tensor(x), y, alpha)
            finally:
                model.head[name] = p
        errors[name] = T.grad_check(f, p.data.copy(), h=STEP, coords=_coords(p.size, sample, seed))
    return errors


def extractor_grad_errors(kind: str, x: np.ndarray, y, seed: int = 0) -> dict[str, float]:
    """Gradient check of an unfrozen extractor's pretraining loss w.r.t. each parameter."""
    ext = Extractor(TINY_ARCH, kind, 4, seed=seed)
    params = ext.parameters()
    errors = {}
    for i, p in enumerate(params):
        def f(t, i=i, p=p):
            _swap(ext, p, t)
            try:
                return T.softmax_cross_entropy(ext.pretrain_logits(Tensor(x)), y)
            finally:
                _swap(ext, t, p)
        errors[f"param{i}"] = T.grad_check(f, p.data.copy())
    return errors


def _swap(ext: Extractor, old: Tensor, new: Tensor) -> None:
    ext.stages = [tuple(new if t is old else t for t in kb) for kb in ext.stages]
    ext.head = tuple(new if t is old else t for t in ext.head)
