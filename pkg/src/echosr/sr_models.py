"""SRResNet / SRGAN generators, the SRGAN discriminator and their training loops.

Everything is single-channel. Generators emit unclamped intensities
during training; inference clamps to [0, 1].
"""

import logging
import math
import weakref
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import ValidationError, check_image, check_scale
from .dataset import EchoDataset
from .degradation import SRPair, make_pair
from .metrics import psnr
from .params import (
    ARCH_DISCRIMINATOR, ARCH_FEATURES, ARCH_SRGAN, ARCH_SRRESNET,
    ModelParams, TrainHistory, load_into_module, params_from_module,
)

logger = logging.getLogger(__name__)

GENERATOR_ARCHS = (ARCH_SRRESNET, ARCH_SRGAN)
MODE_COLLAPSE_FRACTION = 0.25


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class SRConfig:
    """Hyperparameters for both SR generators.

    Defaults are desk-scale; ``SRConfig.reference()`` gives the full-size
    16-block, 64-channel generator.
    """

    n_res_blocks: int = 4
    base_channels: int = 32
    scale: int = 4
    lr_rate: float = 1e-4
    steps: int = 300
    batch: int = 8
    seed: int = 0
    perceptual_weight: float = 1.0
    adversarial_weight: float = 1e-3
    patch_size: int = 24
    disc_channels: int = 16
    feature_depth: int = 2
    feature_seed: int = 1234
    eval_every: int = 0

    def __post_init__(self):
        check_scale(self.scale, allowed={2, 4})
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.batch < 1 or self.patch_size < 1:
            raise ValidationError("batch and patch_size must be >= 1")
        if self.perceptual_weight < 0 or self.adversarial_weight < 0:
            raise ValidationError("loss weights must be nonnegative")
        if self.lr_rate <= 0:
            raise ValidationError("lr_rate must be positive")

    @classmethod
    def reference(cls, **overrides):
        return cls(**{"n_res_blocks": 16, "base_channels": 64, **overrides})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


# --------------------------------------------------------------------------
# networks


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.PReLU(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class Generator(nn.Module):
    """Residual trunk followed by x2 sub-pixel (pixel-shuffle) stages."""

    def __init__(self, n_res_blocks=4, channels=32, scale=4):
        super().__init__()
        self.head = nn.Sequential(nn.Conv2d(1, channels, 9, padding=4), nn.PReLU(channels))
        self.body = nn.Sequential(*[ResidualBlock(channels) for _ in range(n_res_blocks)])
        self.body_tail = nn.Conv2d(channels, channels, 3, padding=1)
        ups = []
        for _ in range(int(math.log2(scale))):
            ups += [nn.Conv2d(channels, 4 * channels, 3, padding=1), nn.PixelShuffle(2), nn.PReLU(channels)]
        self.upsample = nn.Sequential(*ups)
        self.tail = nn.Conv2d(channels, 1, 9, padding=4)

    def forward(self, x):
        h = self.head(x)
        h = h + self.body_tail(self.body(h))
        return self.tail(self.upsample(h))


class Discriminator(nn.Module):
    """Strided convolutional real/fake classifier returning one logit per image."""

    def __init__(self, channels=16):
        super().__init__()
        c = channels
        plan = [(1, c, 1), (c, c, 2), (c, 2 * c, 1), (2 * c, 2 * c, 2), (2 * c, 4 * c, 1), (4 * c, 4 * c, 2)]
        layers = []
        for cin, cout, stride in plan:
            layers += [nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.Linear(4 * c, 8 * c), nn.LeakyReLU(0.2), nn.Linear(8 * c, 1))

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3))).squeeze(1)


class FeatureExtractor(nn.Module):
    def __init__(self, depth=2, channels=16):
        super().__init__()
        layers, cin = [], 1
        for i in range(depth):
            cout = channels * 2**i
            layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU()]
            if i < depth - 1:
                layers.append(nn.AvgPool2d(2))
            cin = cout
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _seeded(seed, factory):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def build_generator(cfg):
    return _seeded(cfg.seed, lambda: Generator(cfg.n_res_blocks, cfg.base_channels, cfg.scale))


def build_discriminator(cfg):
    return _seeded(cfg.seed + 7919, lambda: Discriminator(cfg.disc_channels))


def build_feature_extractor(depth=2, seed=1234, channels=16):
    """Fixed random-feature extractor used by the perceptual distance."""
    module = _seeded(seed, lambda: FeatureExtractor(depth, channels))
    config = {"arch": ARCH_FEATURES, "depth": depth, "channels": channels, "seed": seed}
    return params_from_module(module, ARCH_FEATURES, config)


_MODULE_CACHE = weakref.WeakKeyDictionary()


def _module_for(params):
    module = _MODULE_CACHE.get(params)
    if module is not None:
        return module
    if params.arch in GENERATOR_ARCHS:
        cfg = SRConfig.from_dict(params.config)
        module = Generator(cfg.n_res_blocks, cfg.base_channels, cfg.scale)
    elif params.arch == ARCH_FEATURES:
        module = FeatureExtractor(params.config["depth"], params.config["channels"])
    elif params.arch == ARCH_DISCRIMINATOR:
        module = Discriminator(SRConfig.from_dict(params.config).disc_channels)
    else:
        raise ValidationError(f"no SR network for architecture {params.arch!r}")
    load_into_module(module, params).eval()
    for p in module.parameters():
        p.requires_grad_(False)
    _MODULE_CACHE[params] = module
    return module


def _to_tensor(img):
    return torch.tensor(np.asarray(img), dtype=torch.float32)[None, None]


# --------------------------------------------------------------------------
# functional API


def srresnet_forward(lr, params):
    """Upscale one LR image with a trained generator; output clamped to [0, 1]."""
    if params.arch not in GENERATOR_ARCHS:
        raise ValidationError(f"expected generator weights, got architecture {params.arch!r}")
    lr = check_image(lr, "lr", unit_range=True)
    with torch.no_grad():
        out = _module_for(params)(_to_tensor(lr))
    return out.clamp(0.0, 1.0)[0, 0].double().numpy()


generator_forward = srresnet_forward


def perceptual_distance(a, b, extractor=None):
    """Mean squared distance between feature maps of ``a`` and ``b``."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    extractor = extractor if extractor is not None else build_feature_extractor()
    if extractor.arch != ARCH_FEATURES:
        raise ValidationError(f"expected a feature extractor, got {extractor.arch!r}")
    net = _module_for(extractor)
    with torch.no_grad():
        fa = net(torch.as_tensor(a)[None, None].float())
        fb = net(torch.as_tensor(b)[None, None].float())
    return float(torch.mean((fa.double() - fb.double()) ** 2))


def _check_pairs(pairs, cfg):
    if not pairs:
        raise ValidationError("need at least one SR pair")
    for i, p in enumerate(pairs):
        if p.scale != cfg.scale:
            raise ValidationError(f"pair {i} has scale {p.scale}, config expects {cfg.scale}")


class _PatchSampler:
    def __init__(self, pairs, cfg):
        self.pairs = pairs
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.lr = [torch.as_tensor(p.lr, dtype=torch.float32) for p in pairs]
        self.hr = [torch.as_tensor(p.hr, dtype=torch.float32) for p in pairs]

    def batch(self):
        cfg, r = self.cfg, self.cfg.scale
        ps = min([cfg.patch_size] + [min(p.lr.shape) for p in self.pairs])
        idx = self.rng.integers(len(self.pairs), size=cfg.batch)
        lrs, hrs = [], []
        for i in idx:
            h, w = self.pairs[i].lr.shape
            top = int(self.rng.integers(h - ps + 1))
            left = int(self.rng.integers(w - ps + 1))
            lrs.append(self.lr[i][top : top + ps, left : left + ps])
            hrs.append(self.hr[i][top * r : (top + ps) * r, left * r : (left + ps) * r])
        return torch.stack(lrs)[:, None], torch.stack(hrs)[:, None]


def evaluate_pairs(params_or_module, pairs):
    """Full-image pixel MSE and mean PSNR of clamped outputs over ``pairs``."""
    if isinstance(params_or_module, ModelParams):
        outs = [srresnet_forward(p.lr, params_or_module) for p in pairs]
    else:
        with torch.no_grad():
            outs = [params_or_module(_to_tensor(p.lr)).clamp(0, 1)[0, 0].double().numpy() for p in pairs]
    mses = [float(np.mean((o - p.hr) ** 2)) for o, p in zip(outs, pairs)]
    psnrs = [psnr(o, p.hr) for o, p in zip(outs, pairs)]
    return {"pixel_loss": float(np.mean(mses)), "psnr": float(np.mean(psnrs))}


def _init_generator(cfg, init):
    gen = build_generator(cfg)
    if init is not None:
        if init.arch not in GENERATOR_ARCHS:
            raise ValidationError(f"warm start needs generator weights, got {init.arch!r}")
        load_into_module(gen, init)
    return gen


def _check_finite(loss, step):
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"loss became non-finite at step {step}")


def _record_eval(history, gen, pairs, step):
    gen.eval()
    history.evals.append({"step": step, **evaluate_pairs(gen, pairs)})
    gen.train()


def train_srresnet(pairs, cfg, init=None, val_pairs=None):
    """Pixel-MSE training over random LR/HR patch crops with Adam."""
    _check_pairs(pairs, cfg)
    gen = _init_generator(cfg, init)
    opt = torch.optim.Adam(gen.parameters(), lr=cfg.lr_rate)
    sampler = _PatchSampler(pairs, cfg)
    history = TrainHistory()
    val_pairs = val_pairs or pairs
    _record_eval(history, gen, pairs, 0)
    gen.train()
    for step in range(1, cfg.steps + 1):
        lr, hr = sampler.batch()
        opt.zero_grad()
        loss = F.mse_loss(gen(lr), hr)
        value = loss.item()
        _check_finite(value, step)
        loss.backward()
        opt.step()
        val_psnr = None
        if cfg.eval_every and step % cfg.eval_every == 0:
            gen.eval()
            val_psnr = evaluate_pairs(gen, val_pairs)["psnr"]
            gen.train()
        history.add(step, generator_loss=value, psnr_on_val=val_psnr)
    _record_eval(history, gen, pairs, cfg.steps)
    config = {**cfg.to_dict(), "arch": ARCH_SRRESNET}
    return params_from_module(gen, ARCH_SRRESNET, config), history


def train_srgan(pairs, cfg, init=None, extractor=None, val_pairs=None):
    """Adversarial training: one discriminator update per generator update.

    Generator loss = pixel MSE + perceptual_weight * feature MSE
    + adversarial_weight * non-saturating GAN term. Returns generator weights
    and a history whose records also carry the discriminator loss/accuracy.
    """
    _check_pairs(pairs, cfg)
    gen = _init_generator(cfg, init)
    disc = build_discriminator(cfg)
    if extractor is None:
        extractor = build_feature_extractor(cfg.feature_depth, cfg.feature_seed)
    feat = _module_for(extractor)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_rate)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_rate)
    sampler = _PatchSampler(pairs, cfg)
    history = TrainHistory()
    val_pairs = val_pairs or pairs
    _record_eval(history, gen, pairs, 0)
    gen.train()
    pinned = 0
    for step in range(1, cfg.steps + 1):
        lr, hr = sampler.batch()
        fake = gen(lr)

        opt_d.zero_grad()
        real_logit = disc(hr)
        fake_logit = disc(fake.detach())
        d_loss = (F.binary_cross_entropy_with_logits(real_logit, torch.ones_like(real_logit))
                  + F.binary_cross_entropy_with_logits(fake_logit, torch.zeros_like(fake_logit)))
        d_value = d_loss.item()
        _check_finite(d_value, step)
        d_loss.backward()
        opt_d.step()
        d_acc = float(torch.cat([real_logit > 0, fake_logit < 0]).float().mean())
        pinned += d_acc == 1.0

        opt_g.zero_grad()
        pixel = F.mse_loss(fake, hr)
        g_loss = pixel
        if cfg.perceptual_weight > 0:
            g_loss = g_loss + cfg.perceptual_weight * F.mse_loss(feat(fake), feat(hr))
        if cfg.adversarial_weight > 0:
            adv_logit = disc(fake)
            g_loss = g_loss + cfg.adversarial_weight * F.binary_cross_entropy_with_logits(
                adv_logit, torch.ones_like(adv_logit))
        g_value = g_loss.item()
        _check_finite(g_value, step)
        g_loss.backward()
        opt_g.step()

        val_psnr = None
        if cfg.eval_every and step % cfg.eval_every == 0:
            gen.eval()
            val_psnr = evaluate_pairs(gen, val_pairs)["psnr"]
            gen.train()
        history.add(step, generator_loss=g_value, discriminator_loss=d_value,
                    pixel_loss=pixel.item(), discriminator_accuracy=d_acc, psnr_on_val=val_psnr)
    _record_eval(history, gen, pairs, cfg.steps)
    if pinned > MODE_COLLAPSE_FRACTION * cfg.steps:
        msg = (f"discriminator accuracy pinned at 1.0 on {pinned}/{cfg.steps} steps; "
               "possible mode collapse")
        logger.warning(msg)
        history.warnings.append(msg)
    config = {**cfg.to_dict(), "arch": ARCH_SRGAN}
    return params_from_module(gen, ARCH_SRGAN, config), history


def enhance_subset(subset, params):
    """Replace every frame's image with its super-resolved version."""
    frames = [
        f.with_image(srresnet_forward(f.image, params),
                     source_path=f"SYNTHETIC-ENHANCED[{params.arch}]:{f.source_path}")
        for f in subset
    ]
    return EchoDataset(frames, getattr(subset, "provenance", "SYNTHETIC"))


# --------------------------------------------------------------------------
# estimators


def _as_pairs(X, y, scale):
    if y is None:
        return [make_pair(x, scale) for x in X]
    if len(X) != len(y):
        raise ValidationError(f"got {len(X)} LR images but {len(y)} HR images")
    return [SRPair(check_image(lo, "lr", unit_range=True), check_image(hi, "hr", unit_range=True), scale)
            for lo, hi in zip(X, y)]


class SRResNetUpscaler(BaseEstimator):
    """SRResNet generator with a fit/predict interface.

    ``fit(X, y)`` takes LR images ``X`` and their HR targets ``y``. With
    ``y=None`` the images in ``X`` are treated as HR references and LR inputs
    are made by bicubic downsampling. ``predict`` returns one upscaled image
    per input; ``score`` is the mean PSNR in dB.
    """

    _arch = ARCH_SRRESNET

    def __init__(self, n_res_blocks=4, base_channels=32, scale=4, lr_rate=1e-4, steps=300,
                 batch=8, patch_size=24, seed=0, warm_start=None):
        self.n_res_blocks = n_res_blocks
        self.base_channels = base_channels
        self.scale = scale
        self.lr_rate = lr_rate
        self.steps = steps
        self.batch = batch
        self.patch_size = patch_size
        self.seed = seed
        self.warm_start = warm_start

    def _config(self):
        return SRConfig(n_res_blocks=self.n_res_blocks, base_channels=self.base_channels,
                        scale=self.scale, lr_rate=self.lr_rate, steps=self.steps,
                        batch=self.batch, patch_size=self.patch_size, seed=self.seed)

    def _train(self, pairs, cfg):
        return train_srresnet(pairs, cfg, init=self.warm_start)

    def fit(self, X, y=None):
        cfg = self._config()
        pairs = _as_pairs(list(X), None if y is None else list(y), cfg.scale)
        self.params_, self.history_ = self._train(pairs, cfg)
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return [srresnet_forward(x, self.params_) for x in X]

    transform = predict

    def score(self, X, y):
        return float(np.mean([psnr(o, t) for o, t in zip(self.predict(X), y)]))


class SRGANUpscaler(SRResNetUpscaler):
    _arch = ARCH_SRGAN

    def __init__(self, n_res_blocks=4, base_channels=32, scale=4, lr_rate=1e-4, steps=300,
                 batch=8, patch_size=24, seed=0, warm_start=None,
                 perceptual_weight=1.0, adversarial_weight=1e-3, extractor=None):
        super().__init__(n_res_blocks, base_channels, scale, lr_rate, steps, batch, patch_size, seed, warm_start)
        self.perceptual_weight = perceptual_weight
        self.adversarial_weight = adversarial_weight
        self.extractor = extractor

    def _config(self):
        return replace(super()._config(), perceptual_weight=self.perceptual_weight,
                       adversarial_weight=self.adversarial_weight)

    def _train(self, pairs, cfg):
        return train_srgan(pairs, cfg, init=self.warm_start, extractor=self.extractor)
