"""Trained-weights container and training traces shared by all models.

``ModelParams`` files are plain ``.npz`` archives: one array per named
tensor plus a ``__meta__`` JSON string holding the format version,
architecture tag and config snapshot.
"""

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ._validation import ValidationError

FORMAT_VERSION = 1

ARCH_SRRESNET = "srresnet"
ARCH_SRGAN = "srgan"
ARCH_DISCRIMINATOR = "srgan_discriminator"
ARCH_FEATURES = "feature_extractor"
ARCH_CLASSIFIER = "resnet_classifier"


@dataclass(frozen=True, eq=False)
class ModelParams:
    arch: str
    config: dict
    tensors: OrderedDict
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        tensors = OrderedDict()
        for name, value in self.tensors.items():
            arr = np.array(value, dtype=np.float64 if np.asarray(value).dtype.kind == "f" else None)
            if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
                raise ValidationError(f"tensor {name!r} contains non-finite values")
            arr.setflags(write=False)
            tensors[name] = arr
        object.__setattr__(self, "tensors", tensors)
        tag = self.config.get("arch")
        if tag is not None and tag != self.arch:
            raise ValidationError(f"architecture tag {self.arch!r} does not match config {tag!r}")

    @property
    def n_parameters(self):
        return int(sum(a.size for a in self.tensors.values()))

    def checksum(self):
        h = hashlib.sha256(self.arch.encode())
        for name, arr in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def save(self, path):
        meta = {"version": FORMAT_VERSION, "arch": self.arch, "config": self.config,
                "extras": self.extras, "names": list(self.tensors)}
        arrays = {f"t{i:04d}": arr for i, arr in enumerate(self.tensors.values())}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            if "__meta__" not in data.files:
                raise ValidationError(f"{path} is not a model parameter file")
            meta = json.loads(str(data["__meta__"]))
            if meta.get("version") != FORMAT_VERSION:
                raise ValidationError(f"{path}: unsupported format version {meta.get('version')}")
            tensors = OrderedDict((name, data[f"t{i:04d}"]) for i, name in enumerate(meta["names"]))
        return cls(meta["arch"], meta["config"], tensors, meta.get("extras", {}))


def params_from_module(module, arch, config, extras=None):
    tensors = OrderedDict((k, v.detach().cpu().double().numpy()) for k, v in module.state_dict().items())
    return ModelParams(arch, dict(config), tensors, dict(extras or {}))


def load_into_module(module, params):
    """Copy ``params`` into ``module``; shape mismatches raise listing every offender."""
    import torch

    state = module.state_dict()
    problems = []
    for name, target in state.items():
        if name not in params.tensors:
            problems.append(f"{name}: missing")
        elif tuple(params.tensors[name].shape) != tuple(target.shape):
            problems.append(f"{name}: expected {tuple(target.shape)}, got {params.tensors[name].shape}")
    extra = set(params.tensors) - set(state)
    problems.extend(f"{name}: unexpected" for name in sorted(extra))
    if problems:
        raise ValidationError("incompatible weights:\n  " + "\n  ".join(problems))
    module.load_state_dict(
        OrderedDict((k, torch.as_tensor(np.array(params.tensors[k])).to(state[k].dtype)) for k in state)
    )
    return module


@dataclass
class TrainHistory:
    """Per-step (or per-epoch) records plus free-form warning strings.

    ``evals`` holds periodic full-set evaluations keyed by step, taken
    before the first update (step 0) and after the last one.
    """

    records: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def add(self, step, **values):
        if self.records and step <= self.records[-1]["step"]:
            raise ValidationError("history steps must be strictly increasing")
        for k, v in values.items():
            if v is not None and not math.isfinite(v):
                raise ValidationError(f"non-finite {k} at step {step}")
        self.records.append({"step": step, **values})

    def series(self, key):
        return [r[key] for r in self.records if r.get(key) is not None]

    @property
    def initial_eval(self):
        return self.evals[0] if self.evals else None

    @property
    def final_eval(self):
        return self.evals[-1] if self.evals else None

    def to_dict(self):
        return {"records": self.records, "evals": self.evals, "warnings": self.warnings}
