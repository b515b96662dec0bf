import numpy as np
import pytest

from ctxfusion import models as M
from ctxfusion import tensor as T
from ctxfusion.analysis import weight_magnitude_report
from ctxfusion.errors import ConfigurationError, DimensionError, FormatError, TrainingError
from ctxfusion.models import JointArch, TrainConfig
from ctxfusion.synthgen import DatasetSpec, LabeledImage, generate_dataset
from ctxfusion.tensor import Tensor
from helpers import TINY_ARCH, extractor_grad_errors, frozen_extractor, model_grad_errors, tiny_models


def batch(n=3, size=12, seed=0):
    r = np.random.default_rng(seed)
    return r.uniform(size=(n, 3, size, size)), r.integers(0, 4, n)


def tiny_dataset(n_per_class=10, seed=0):
    spec = DatasetSpec(image_size=12, n_classes=4, n_supercategories=3, samples_per_class=n_per_class, seed=seed)
    return generate_dataset(spec)


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("name", ["fg", "bg", "joint_late_fc", "joint_mid_conv"])
@pytest.mark.parametrize("alpha", [0.0, 0.3])
def test_model_gradients(name, alpha):
    model = tiny_models()[name]
    if alpha and not name.startswith("joint"):
        pytest.skip("alpha applies to joint models only")
    x, y = batch()
    errors = model_grad_errors(model, x, y, alpha)
    assert max(errors.values()) < 1e-4, errors


@pytest.mark.parametrize("kind", ["object", "scene"])
def test_extractor_gradients(kind):
    x, y = batch(2)
    errors = extractor_grad_errors(kind, x, y)
    assert max(errors.values()) < 1e-4, errors


# ---------------------------------------------------------------------------
# structure


def test_freeze_truncates_and_stops_gradients():
    e = M.Extractor(TINY_ARCH, "object", 4)
    assert len(e.stages) == 3 and e.head is not None
    e.freeze()
    assert len(e.stages) == 2 and e.head is None
    assert all(not p.requires_grad for p in e.parameters())
    with pytest.raises(ConfigurationError):
        e.pretrain_logits(Tensor(np.zeros((1, 3, 12, 12))))


def test_tap_normalization_standardizes_calibration_maps():
    calib = np.random.default_rng(1).uniform(size=(40, 3, 12, 12))
    e = M.Extractor(TINY_ARCH, "object", 4).freeze(calibration=calib)
    maps = e.maps(calib)
    live = maps.std(axis=(0, 2, 3)) > 0
    assert np.allclose(maps.mean(axis=(0, 2, 3))[live], 0, atol=1e-10)
    assert np.allclose(maps.std(axis=(0, 2, 3))[live], 1, atol=1e-10)


def test_classifier_needs_frozen_extractor():
    with pytest.raises(ConfigurationError):
        M.build_unimodal(M.Extractor(TINY_ARCH, "object", 4), 4)


def test_unimodal_is_pool_then_linear():
    m = tiny_models()["fg"]
    x, _ = batch()
    tap = m.extractors["fg"].tap(Tensor(x)).data
    expected = tap.mean(axis=(2, 3)) @ m.head["weight"].data.T + m.head["bias"].data
    assert np.allclose(m.forward(Tensor(x)).data, expected, atol=1e-12)


def test_mid_conv_matches_hand_composition():
    m = tiny_models()["joint_mid_conv"]
    x, _ = batch()
    h = m.head
    fg = m.extractors["fg"].tap(Tensor(x)).data
    bg = m.extractors["bg"].tap(Tensor(x)).data

    def conv(z, k, b):
        zp = np.pad(z, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros((z.shape[0], k.shape[0]) + z.shape[2:])
        for i in range(3):
            for j in range(3):
                out += np.einsum("nchw,oc->nohw", zp[:, :, i:i + z.shape[2], j:j + z.shape[3]], k[:, :, i, j])
        return np.maximum(out + b[None, :, None, None], 0)

    z = conv(np.concatenate([fg, bg], axis=1), h["conv1.kernels"].data, h["conv1.bias"].data)
    z = conv(z, h["conv2.kernels"].data, h["conv2.bias"].data)
    expected = z.mean(axis=(2, 3)) @ h["weight"].data.T + h["bias"].data
    assert np.abs(m.forward(Tensor(x)).data - expected).max() < 1e-12


def test_late_fc_with_zero_bg_columns_equals_fg_head():
    models = tiny_models()
    joint, fg = models["joint_late_fc"], models["fg"]
    d = joint.fg_dim
    joint.head["weight"].data[:, d:] = 0.0
    fg.head["weight"].data[:] = joint.head["weight"].data[:, :d]
    fg.head["bias"].data[:] = joint.head["bias"].data
    x, _ = batch(seed=3)
    assert np.abs(joint.forward(Tensor(x)).data - fg.forward(Tensor(x)).data).max() < 1e-12


@pytest.mark.parametrize("mode", ["late_fc", "mid_conv"])
def test_partition_marks_fg_then_bg(mode):
    m = tiny_models()[f"joint_{mode}"]
    part = m.partition()
    assert part == ["fg"] * m.fg_dim + ["bg"] * m.bg_dim
    wf, wb = m.partition_weights()
    assert wf.shape[1] == m.fg_dim and wb.shape[1] == m.bg_dim
    assert M.weight_partition(tiny_models()["fg"]) is None


def test_spatial_mismatch_is_dimension_error():
    fg = frozen_extractor("object")
    other = M.ExtractorArch(stages=((4, 3, 1), (6, 3, 2), (8, 3, 2)), tap_layer=2)
    bg = frozen_extractor("scene", arch=other)
    with pytest.raises(DimensionError):
        M.build_joint(fg, bg, JointArch("mid_conv", (6, 5)), 4, image_size=12)


def test_random_model_is_near_chance():
    data = tiny_dataset(n_per_class=60, seed=5)
    m = tiny_models(seed=2)["joint_late_fc"]
    res = M.evaluate(m, data, split=None)
    se = np.sqrt(0.25 * 0.75 / res.n)
    assert abs(res.accuracy - 0.25) < 3 * se


# ---------------------------------------------------------------------------
# training


def test_alpha_penalty_value():
    m = tiny_models()["joint_late_fc"]
    x, y = batch()
    maps = {k: Tensor(v) for k, v in m.maps(x).items()}
    base, _ = M.head_loss(m, maps, y, 0.0)
    pen, _ = M.head_loss(m, maps, y, 2.5)
    wf = m.head["weight"].data[:, :m.fg_dim]
    assert pen.item() - base.item() == pytest.approx(2.5 * (wf ** 2).sum(), rel=1e-12)


def test_alpha_needs_joint():
    m = tiny_models()["fg"]
    with pytest.raises(ConfigurationError):
        M.train_head(m, tiny_dataset(), TrainConfig(alpha=1.0, epochs=1))


def test_large_alpha_shrinks_fg_weights():
    m = tiny_models()["joint_late_fc"]
    before = np.linalg.norm(m.head["weight"].data[:, :m.fg_dim])
    M.train_head(m, tiny_dataset(), TrainConfig(alpha=1e3, lr=1e-4, epochs=20, batch_size=8))
    after = np.linalg.norm(m.head["weight"].data[:, :m.fg_dim])
    assert after < 0.1 * before


def test_alpha_shrinks_weight_ratio():
    data = tiny_dataset(20)
    ratios = []
    for alpha in (0.0, 0.1, 1.0):
        m = tiny_models()["joint_late_fc"]
        M.train_head(m, data, TrainConfig(alpha=alpha, lr=0.02, epochs=4, batch_size=16))
        ratios.append(weight_magnitude_report(m).ratio)
    assert ratios[0] > ratios[1] > ratios[2]


def test_separable_toy_reaches_full_train_accuracy():
    r = np.random.default_rng(0)
    images = []
    for i in range(40):
        c = i % 2
        px = np.zeros((3, 12, 12))
        px[0 if c == 0 else 2] = r.uniform(0.7, 1.0)
        images.append(LabeledImage(px, (0, 0, 6, 6), c, c, "train"))
    m = M.build_unimodal(frozen_extractor("object"), 2)
    _, log = M.train_head(m, images, TrainConfig(epochs=40, lr=0.1, batch_size=8))
    assert log.last("train")["accuracy"] == 1.0
    assert M.evaluate(m, images, split="train").accuracy == 1.0


def test_training_keeps_extractors_and_is_deterministic():
    data = tiny_dataset()
    outs = []
    for _ in range(2):
        m = tiny_models()["joint_late_fc"]
        sums = {s: e.checksum() for s, e in m.extractors.items()}
        _, log = M.train_head(m, data, TrainConfig(epochs=2, batch_size=8, weight_decay=0.01))
        assert sums == {s: e.checksum() for s, e in m.extractors.items()}
        outs.append((m.head["weight"].data.tobytes(), log.to_csv()))
    assert outs[0] == outs[1]
    assert outs[0][1].splitlines()[0] == "epoch,split,loss,accuracy"


def test_adversarial_training_runs():
    m = tiny_models()["joint_late_fc"]
    _, log = M.train_head(m, tiny_dataset(6), TrainConfig(epochs=1, batch_size=8, adversarial_eps=0.03))
    assert np.isfinite(log.last("train")["loss"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    m = tiny_models()["fg"]
    with pytest.raises(TrainingError, match="diverged"):
        M.train_head(m, tiny_dataset(), TrainConfig(epochs=5, lr=1e308, momentum=0.9))


def test_pretraining_produces_frozen_extractor():
    from ctxfusion.synthgen import pretraining_corpus
    spec = DatasetSpec(image_size=12, n_classes=4, n_supercategories=3, samples_per_class=10)
    e = M.pretrain_extractor("scene", pretraining_corpus("scene", spec), TINY_ARCH,
                             TrainConfig(epochs=2, batch_size=8, clip_norm=5.0))
    assert e.frozen and e.head is None and 0 <= e.pretrain_accuracy <= 1


def test_score_and_per_class():
    logits = np.array([[2.0, 0.0], [0.0, 1.0], [3.0, 0.0]])
    res = M.score(logits, np.array([0, 1, 1]))
    assert res.accuracy == pytest.approx(2 / 3)
    assert res.per_class == {0: 1.0, 1: 0.5}
    assert res.n == 3


# ---------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("name", ["fg", "bg", "joint_late_fc", "joint_mid_conv"])
def test_checkpoint_round_trip_is_exact(tmp_path, name):
    m = tiny_models()[name]
    x, _ = batch(4, seed=9)
    path = M.save_checkpoint(m, tmp_path / "m.ckpt")
    back = M.load_checkpoint(path)
    assert type(back) is type(m)
    assert back.forward(Tensor(x)).data.tobytes() == m.forward(Tensor(x)).data.tobytes()
    if name.startswith("joint"):
        assert back.partition() == m.partition()


def test_extractor_checkpoint_round_trip(tmp_path):
    e = frozen_extractor("scene")
    back = M.load_checkpoint(M.save_checkpoint(e, tmp_path / "e.ckpt"))
    assert back.checksum() == e.checksum()
    x, _ = batch()
    assert back.maps(x).tobytes() == e.maps(x).tobytes()


def test_checkpoint_corruption_names_field(tmp_path):
    path = M.save_checkpoint(tiny_models()["fg"], tmp_path / "m.ckpt")
    raw = path.read_bytes()
    cases = {
        "magic": b"NOTACKPT" + raw[8:],
        "payload": raw[:-8],
        "header": raw[:20],
    }
    for field_name, data in cases.items():
        path.write_bytes(data)
        with pytest.raises(FormatError, match=field_name):
            M.load_checkpoint(path)
    with pytest.raises(FormatError, match="file"):
        M.load_checkpoint(tmp_path / "missing.ckpt")


def test_train_config_round_trip():
    c = TrainConfig(lr=0.01, alpha=0.5, adversarial_eps=0.02, clip_norm=3.0)
    assert TrainConfig.from_dict({**c.to_dict(), "unknown": 1}) == c
    with pytest.raises(ConfigurationError):
        TrainConfig(alpha=-1)


def test_unimodal_shapes_and_init_determinism():
    e = frozen_extractor("object")
    a, b = M.build_unimodal(e, 5, seed=3), M.build_unimodal(e, 5, seed=3)
    assert sum(p.size for p in a.head_parameters()) == e.tap_channels * 5 + 5
    assert all(np.array_equal(a.head[k].data, b.head[k].data) for k in a.head)
    x, _ = batch(4)
    assert a.forward(Tensor(x)).shape == (4, 5)


def test_late_fc_head_input_dim():
    m = tiny_models()["joint_late_fc"]
    assert m.head["weight"].shape[1] == m.fg_dim + m.bg_dim
    mid = tiny_models()["joint_mid_conv"]
    assert mid.head["conv1.kernels"].shape[1] == mid.fg_dim + mid.bg_dim


def test_alpha_zero_loss_is_plain_cross_entropy():
    m = tiny_models()["joint_late_fc"]
    x, y = batch()
    maps = {k: Tensor(v) for k, v in m.maps(x).items()}
    loss, logits = M.head_loss(m, maps, y, 0.0)
    assert abs(loss.item() - T.softmax_cross_entropy(logits, y).item()) <= 1e-12


def test_large_alpha_fg_norm_decreases_over_epochs():
    m = tiny_models()["joint_late_fc"]
    data = tiny_dataset()
    norms = [np.linalg.norm(m.head["weight"].data[:, :m.fg_dim])]
    for _ in range(5):
        M.train_head(m, data, TrainConfig(alpha=1e3, lr=1e-4, epochs=4, batch_size=8))
        norms.append(np.linalg.norm(m.head["weight"].data[:, :m.fg_dim]))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_evaluate_is_deterministic_and_eps_zero_is_clean():
    from ctxfusion.perturb import Fgsm
    m = tiny_models()["fg"]
    data = tiny_dataset()
    a, b = M.evaluate(m, data), M.evaluate(m, data)
    c = M.evaluate(m, data, Fgsm(0.0))
    assert a.accuracy == b.accuracy == c.accuracy and a.loss == c.loss
