import numpy as np
import pytest
import torch
import torch.nn.functional as F
from sklearn.base import clone

from echosr import ValidationError
from echosr.classifier import (ClassifierConfig, EchoClassifier, ResNetClassifier, _module_from_params,
                               build_classifier, evaluate_classifier, fit_arrays, predict_arrays, preprocess,
                               train_classifier)
from echosr.dataset import Quality, Task, build_classification_split
from echosr.metrics import accuracy
from echosr.params import ARCH_CLASSIFIER, params_from_module

from gradcheck import check_gradients, pass_fraction

FAST = dict(input_size=32, width_multiplier=0.125, epochs=4, batch=8, lr_rate=1e-3)


def bright_dark(n_per_class, seed, size=40):
    """Textured frames whose class is set by overall brightness."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, level in ((0, 0.3), (1, 0.7)):
        for _ in range(n_per_class):
            images.append(np.clip(level + 0.1 * rng.standard_normal((size, size)), 0, 1))
            labels.append(label)
    return images, np.array(labels)


def threshold_oracle(images, labels):
    """Best single mean-intensity threshold, searched exhaustively."""
    means = np.array([img.mean() for img in images])
    best = 0.0
    for t in np.unique(means):
        best = max(best, np.mean((means >= t) == labels), np.mean((means < t) == labels))
    return best


class TestBuild:
    def test_forward_shape(self):
        cfg = ClassifierConfig(width_multiplier=0.25)
        module, _ = _module_from_params(build_classifier(cfg))
        module.eval()
        logits = module(torch.rand(1, 1, 96, 96))
        assert logits.shape == (1, 2) and torch.isfinite(logits).all()

    def test_seeded(self):
        cfg = ClassifierConfig(width_multiplier=0.25, seed=4)
        assert build_classifier(cfg).checksum() == build_classifier(cfg).checksum()

    def test_width_monotone(self):
        small = build_classifier(ClassifierConfig(width_multiplier=0.25)).n_parameters
        full = build_classifier(ClassifierConfig(width_multiplier=1.0)).n_parameters
        assert small < full

    def test_resnet18_depth(self):
        module, _ = _module_from_params(build_classifier(ClassifierConfig(width_multiplier=0.125)))
        convs = [m for m in module.modules() if isinstance(m, torch.nn.Conv2d) and m.kernel_size != (1, 1)]
        assert len(convs) + 1 == 18  # 17 convs + the linear head

    def test_config_validation(self):
        for bad in (dict(batch=0), dict(epochs=0), dict(lr_rate=0.0)):
            with pytest.raises(ValidationError):
                ClassifierConfig(**bad)

    def test_pretrained_mismatch_lists_tensors(self, tmp_path):
        build_classifier(ClassifierConfig(width_multiplier=0.25)).save(tmp_path / "init.npz")
        with pytest.raises(ValidationError, match="stem.0.weight"):
            build_classifier(ClassifierConfig(width_multiplier=0.5, pretrained_init=str(tmp_path / "init.npz")))

    def test_pretrained_three_channel(self, tmp_path):
        cfg = ClassifierConfig(**FAST)
        module = ResNetClassifier(cfg.widths(), cfg.stage_blocks, in_channels=3)
        params_from_module(module, ARCH_CLASSIFIER, {"arch": ARCH_CLASSIFIER}).save(tmp_path / "rgb.npz")
        cfg = ClassifierConfig(**{**FAST, "epochs": 1}, pretrained_init=str(tmp_path / "rgb.npz"))
        images, labels = bright_dark(6, 0)
        params, _ = fit_arrays(images, labels, cfg)
        assert params.tensors["stem.0.weight"].shape[1] == 3
        assert predict_arrays(params, images)[0].shape == (12,)


class TestTraining:
    def test_oracle_is_perfect(self):
        images, labels = bright_dark(20, 0)
        assert threshold_oracle(images, labels) == 1.0

    def test_separable_task(self):
        images, labels = bright_dark(16, 1)
        params, hist = fit_arrays(images, labels, ClassifierConfig(**FAST))
        preds, _ = predict_arrays(params, images)
        assert accuracy(preds.tolist(), labels.tolist()) >= 0.95
        assert len(hist.records) == FAST["epochs"]

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_mostly_decreases(self, seed):
        images, labels = bright_dark(16, seed, size=48)
        cfg = ClassifierConfig(seed=seed, width_multiplier=0.25, input_size=48)
        _, hist = fit_arrays(images, labels, cfg)
        losses = [hist.initial_eval["loss"]] + hist.series("loss")
        assert len(losses) == 11
        assert sum(b < a for a, b in zip(losses, losses[1:])) >= 7

    def test_deterministic(self):
        images, labels = bright_dark(8, 2)
        cfg = ClassifierConfig(**{**FAST, "epochs": 2})
        p1, h1 = fit_arrays(images, labels, cfg)
        p2, h2 = fit_arrays(images, labels, cfg)
        assert h1.records == h2.records and p1.checksum() == p2.checksum()

    def test_single_class(self):
        with pytest.raises(ValidationError, match="single class"):
            fit_arrays([np.zeros((32, 32))] * 3, [1, 1, 1], ClassifierConfig(**FAST))

    def test_normalisation_stored(self):
        images, labels = bright_dark(4, 3)
        params, _ = fit_arrays(images, labels, ClassifierConfig(**{**FAST, "epochs": 1}))
        stack = preprocess(images, FAST["input_size"])
        assert params.extras["mean"] == pytest.approx(stack.mean(), abs=1e-3)
        assert params.extras["std"] == pytest.approx(stack.std(), abs=1e-3)


@pytest.fixture(scope="module")
def trained_view(small_ds):
    split = build_classification_split(small_ds, Task.VIEW, Quality.GOOD, seed=0)
    params, _ = train_classifier(split, ClassifierConfig(**FAST))
    return split, params


class TestEvaluate:
    def test_confusion_and_consistency(self, trained_view):
        split, params = trained_view
        res = evaluate_classifier(params, split.test, Task.VIEW)
        assert res.confusion.sum() == len(split.test)
        preds = [p for _, _, p, _ in res.per_frame]
        truth = [t for _, t, _, _ in res.per_frame]
        assert res.accuracy == accuracy(preds, truth)
        assert res.accuracy == np.trace(res.confusion) / res.confusion.sum()

    def test_deterministic(self, trained_view):
        split, params = trained_view
        a = evaluate_classifier(params, split.test, "view")
        b = evaluate_classifier(params, split.test, "view")
        assert a.per_frame == b.per_frame

    def test_permutation_invariant(self, trained_view, small_ds):
        _, params = trained_view
        frames = list(small_ds)
        order = np.random.default_rng(0).permutation(len(frames))
        a = evaluate_classifier(params, frames, Task.VIEW)
        b = evaluate_classifier(params, [frames[i] for i in order], Task.VIEW)
        assert a.accuracy == b.accuracy
        np.testing.assert_array_equal(a.confusion, b.confusion)

    def test_logits_finite_on_extremes(self, trained_view):
        _, params = trained_view
        _, probs = predict_arrays(params, [np.zeros((32, 32)), np.ones((32, 32)), np.full((50, 70), 0.5)])
        assert np.all(np.isfinite(probs))

    def test_empty(self, trained_view):
        with pytest.raises(ValidationError):
            evaluate_classifier(trained_view[1], [], Task.VIEW)


def test_miniature_gradients():
    torch.manual_seed(0)
    module = ResNetClassifier(widths=(4, 8), stage_blocks=(1, 1)).double().train()
    n_params = sum(p.numel() for p in module.parameters())
    assert n_params <= 5000
    x = torch.rand(4, 1, 16, 16, dtype=torch.float64)
    y = torch.tensor([0, 1, 1, 0])
    errors = check_gradients(module, lambda: F.cross_entropy(module(x), y), n_per_tensor=10)
    assert pass_fraction(errors) >= 0.99


class TestEstimator:
    def test_get_params_clone(self):
        est = EchoClassifier(input_size=32, epochs=2)
        assert clone(est).get_params() == est.get_params()

    def test_fit_predict_string_labels(self):
        images, labels = bright_dark(8, 5)
        names = np.where(labels == 1, "bright", "dark")
        est = EchoClassifier(**FAST).fit(images, names)
        assert list(est.classes_) == ["bright", "dark"]
        assert est.score(images, names) >= 0.9
        assert est.predict_proba(images).shape == (16, 2)

    def test_three_classes_rejected(self):
        with pytest.raises(ValidationError):
            EchoClassifier(**FAST).fit([np.zeros((32, 32))] * 3, [0, 1, 2])
