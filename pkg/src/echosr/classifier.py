"""ResNet-18-family binary classifier for the view and phase tasks."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import ValidationError
from .dataset import Task, task_classes, task_label
from .degradation import resize
from .metrics import accuracy
from .params import ARCH_CLASSIFIER, ModelParams, TrainHistory, load_into_module, params_from_module

BASE_WIDTHS = (64, 128, 256, 512)
EVAL_BATCH = 32


@dataclass(frozen=True)
class ClassifierConfig:
    input_size: int = 96
    batch: int = 16
    epochs: int = 10
    lr_rate: float = 1e-4
    seed: int = 0
    width_multiplier: float = 1.0
    pretrained_init: str = None
    stage_blocks: tuple = (2, 2, 2, 2)
    hflip: bool = False

    def __post_init__(self):
        if self.batch < 1 or self.epochs < 1:
            raise ValidationError("batch and epochs must be >= 1")
        if self.lr_rate <= 0:
            raise ValidationError("lr_rate must be positive")
        if self.input_size < 16:
            raise ValidationError("input_size must be >= 16")
        object.__setattr__(self, "stage_blocks", tuple(self.stage_blocks))

    @classmethod
    def reference(cls, **overrides):
        return cls(**{"input_size": 224, **overrides})

    def to_dict(self):
        d = asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    def widths(self):
        return tuple(max(1, int(round(w * self.width_multiplier))) for w in BASE_WIDTHS[: len(self.stage_blocks)])


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class ResNetClassifier(nn.Module):
    def __init__(self, widths=BASE_WIDTHS, stage_blocks=(2, 2, 2, 2), in_channels=1, n_classes=2):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(widths[0]), nn.ReLU(), nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages, cin = [], widths[0]
        for i, (w, n) in enumerate(zip(widths, stage_blocks)):
            blocks = [BasicBlock(cin, w, 1 if i == 0 else 2)]
            blocks += [BasicBlock(w, w, 1) for _ in range(n - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = w
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(cin, n_classes)

    @property
    def in_channels(self):
        return self.stem[0].in_channels

    def forward(self, x):
        h = self.stages(self.stem(x))
        return self.fc(h.mean(dim=(2, 3)))


def _make_module(cfg, in_channels=1):
    return ResNetClassifier(cfg.widths(), cfg.stage_blocks, in_channels)


def build_classifier(cfg):
    """Seeded ResNet classifier weights, or the ``pretrained_init`` file's weights."""
    in_channels = 1
    init = None
    if cfg.pretrained_init:
        init = ModelParams.load(cfg.pretrained_init)
        stem = init.tensors.get("stem.0.weight")
        if stem is not None:
            in_channels = int(stem.shape[1])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        module = _make_module(cfg, in_channels)
    if init is not None:
        load_into_module(module, init)
    return _to_params(module, cfg, mean=0.0, std=1.0)


def _to_params(module, cfg, mean, std):
    config = {**cfg.to_dict(), "arch": ARCH_CLASSIFIER, "in_channels": module.in_channels}
    return params_from_module(module, ARCH_CLASSIFIER, config, {"mean": mean, "std": std})


def _module_from_params(params):
    if params.arch != ARCH_CLASSIFIER:
        raise ValidationError(f"expected classifier weights, got {params.arch!r}")
    cfg = ClassifierConfig.from_dict(params.config)
    module = _make_module(cfg, params.config.get("in_channels", 1))
    return load_into_module(module, params), cfg


def preprocess(images, input_size):
    """Resize each frame to ``input_size`` squared; returns an (N, H, W) float32 stack."""
    out = np.empty((len(images), input_size, input_size), dtype=np.float32)
    for i, img in enumerate(images):
        img = np.asarray(img, dtype=np.float64)
        out[i] = img if img.shape == (input_size, input_size) else resize(img, (input_size, input_size))
    return out


def _to_input(stack, mean, std, in_channels):
    x = torch.as_tensor((stack - mean) / std, dtype=torch.float32)[:, None]
    return x.expand(-1, in_channels, -1, -1).contiguous() if in_channels > 1 else x


def fit_arrays(images, labels, cfg):
    """Core cross-entropy training loop on raw images and 0/1 labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValidationError("training set is empty")
    if len(np.unique(labels)) < 2:
        raise ValidationError("training set contains a single class")
    init = build_classifier(cfg)
    module, _ = _module_from_params(init)
    stack = preprocess(images, cfg.input_size)
    mean = float(stack.mean())
    std = float(stack.std()) or 1.0
    x_all = _to_input(stack, mean, std, module.in_channels)
    y_all = torch.as_tensor(labels)

    opt = torch.optim.Adam(module.parameters(), lr=cfg.lr_rate)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    module.train()
    history.evals.append({"step": 0, "loss": _mean_loss(module, x_all, y_all, cfg.batch, cfg.seed)})
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(labels))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch):
            idx = torch.as_tensor(order[start : start + cfg.batch])
            xb, yb = x_all[idx], y_all[idx]
            if cfg.hflip:
                flip = torch.as_tensor(rng.random(len(idx)) < 0.5)
                xb = torch.where(flip[:, None, None, None], xb.flip(-1), xb)
            if len(idx) == 1:
                # batch norm needs more than one sample per batch in train mode
                continue
            opt.zero_grad()
            logits = module(xb)
            loss = F.cross_entropy(logits, yb)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"classifier loss became non-finite in epoch {epoch}")
            loss.backward()
            opt.step()
            total_loss += value * len(idx)
            correct += int((logits.argmax(1) == yb).sum())
        history.add(epoch, loss=total_loss / len(labels), train_accuracy=correct / len(labels))
    recalibrate_batchnorm(module, x_all, cfg.batch, seed=cfg.seed)
    return _to_params(module, cfg, mean, std), history


def _mean_loss(module, x, y, batch, seed):
    """Training-mode cross-entropy over shuffled batches of ``x``, without updating weights."""
    order = torch.as_tensor(np.random.default_rng([seed, 3]).permutation(len(x)))
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(x), batch):
            idx = order[start : start + batch]
            xb, yb = x[idx], y[idx]
            if len(xb) > 1:
                total += F.cross_entropy(module(xb), yb, reduction="sum").item()
    return total / len(x)


def recalibrate_batchnorm(module, x, batch, seed=0):
    """Replace running BN statistics with exact averages over shuffled batches of ``x``.

    Short desk-scale runs leave the exponential running averages far from
    the data, which makes eval-mode predictions collapse to one class.
    Batches are shuffled so their statistics resemble the mixed-class
    batches seen in training (inputs usually arrive grouped by class).
    """
    order = torch.as_tensor(np.random.default_rng([seed, 2]).permutation(len(x)))
    norms = [m for m in module.modules() if isinstance(m, nn.BatchNorm2d)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    module.train()
    with torch.no_grad():
        for start in range(0, len(x), batch):
            xb = x[order[start : start + batch]]
            if len(xb) > 1:
                module(xb)
    for m, momentum in zip(norms, saved):
        m.momentum = momentum
    module.eval()


def predict_arrays(params, images):
    """Class indices and softmax probabilities, computed in a fixed, order-independent way."""
    module, cfg = _module_from_params(params)
    module.eval()
    stack = preprocess(images, cfg.input_size)
    x = _to_input(stack, params.extras["mean"], params.extras["std"], module.in_channels)
    probs = np.empty((len(images), 2))
    with torch.no_grad():
        for i in range(len(images)):
            probs[i] = torch.softmax(module(x[i : i + 1]), dim=1)[0].double().numpy()
    return probs.argmax(1), probs


@dataclass
class ClassifierResult:
    accuracy: float
    confusion: np.ndarray
    per_frame: list = field(default_factory=list)

    def __post_init__(self):
        total = int(self.confusion.sum())
        if total != len(self.per_frame):
            raise ValidationError("confusion matrix does not cover every frame")
        if total and not math.isclose(self.accuracy, np.trace(self.confusion) / total):
            raise ValidationError("accuracy disagrees with the confusion matrix")


def train_classifier(split, cfg):
    """Train on ``split.train``; returns weights and the per-epoch history."""
    if not split.train:
        raise ValidationError("training split is empty")
    images = [f.image for f in split.train]
    return fit_arrays(images, split.labels("train"), cfg)


def evaluate_classifier(params, frames, task):
    frames = list(frames)
    if not frames:
        raise ValidationError("no frames to evaluate")
    task = Task(task)
    truth = [task_label(f, task) for f in frames]
    preds, probs = predict_arrays(params, [f.image for f in frames])
    confusion = np.zeros((2, 2), dtype=np.int64)
    for t, p in zip(truth, preds):
        confusion[t, p] += 1
    names = task_classes(task)
    per_frame = [
        (f.key, names[t].value, names[p].value, float(probs[i, p]))
        for i, (f, t, p) in enumerate(zip(frames, truth, preds))
    ]
    return ClassifierResult(accuracy(preds.tolist(), truth), confusion, per_frame)


class EchoClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn wrapper around the ResNet classifier.

    ``X`` is a sequence of 2D frames (any size; each is resized to
    ``input_size``), ``y`` any two distinct labels.
    """

    def __init__(self, input_size=96, batch=16, epochs=10, lr_rate=1e-4, seed=0,
                 width_multiplier=1.0, pretrained_init=None, stage_blocks=(2, 2, 2, 2), hflip=False):
        self.input_size = input_size
        self.batch = batch
        self.epochs = epochs
        self.lr_rate = lr_rate
        self.seed = seed
        self.width_multiplier = width_multiplier
        self.pretrained_init = pretrained_init
        self.stage_blocks = stage_blocks
        self.hflip = hflip

    def _config(self):
        return ClassifierConfig(**self.get_params())

    def fit(self, X, y):
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValidationError(f"expected exactly two classes, got {len(self.classes_)}")
        encoded = np.searchsorted(self.classes_, y)
        self.params_, self.history_ = fit_arrays(list(X), encoded, self._config())
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return predict_arrays(self.params_, list(X))[1]

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(1)]
