"""Command-line entry point: ``echosr <subcommand> ...``.

Exit codes: 0 success, 1 I/O failure, 2 invalid input or usage.
Option precedence: command-line flag > ``--config`` file > built-in default.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from ._validation import ValidationError
from .classifier import ClassifierConfig
from .dataset import (
    Quality, cache_dir, dataset_checksum, load_bundle, load_camus, load_manifest, parse_quality,
    save_bundle, synthesize_dataset,
)
from .degradation import load_pairs, make_sr_pairs, save_pairs
from .experiments import generate_report, load_results, run_all, write_manifest
from .params import ARCH_SRGAN, ARCH_SRRESNET, ModelParams
from .sr_models import SRConfig, enhance_subset, train_srgan, train_srresnet

logger = logging.getLogger("echosr")

EXIT_OK, EXIT_IO, EXIT_INVALID = 0, 1, 2


class UsageError(ValidationError):
    pass


def _load_config(path, command):
    """Flat keys apply to every subcommand; a section named after the subcommand overrides them."""
    if not path:
        return {}
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValidationError(f"config file {path} must hold key-value pairs")
    section = data.get(command) or {}
    flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
    return {k.replace("-", "_"): v for k, v in {**flat, **section}.items()}


def _opt(args, name, default=None):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return args.config_values.get(name, default)


def _out_path(args, filename):
    out = Path(_opt(args, "out", "echosr-out"))
    out.mkdir(parents=True, exist_ok=True)
    target = out / filename
    if target.exists() and not args.overwrite:
        raise UsageError(f"{target} already exists; pass --overwrite or choose another --out")
    return target


def _parse_synthetic(tokens, seed):
    synth = {"patients": 30, "size": 64, "seed": seed}
    for tok in tokens or []:
        key, sep, value = tok.partition("=")
        if not sep or key not in synth or not value.strip().lstrip("-").isdigit():
            raise UsageError(f"bad --synthetic entry {tok!r}; expected patients=N, size=N or seed=N")
        synth[key] = int(value)
    return synth


def _dataset_from_args(args):
    sources = [s for s in ("camus", "manifest", "dataset") if getattr(args, s, None)]
    if getattr(args, "synthetic", None) is not None:
        sources.append("synthetic")
    if len(sources) != 1:
        raise UsageError("choose exactly one dataset source: --camus, --manifest, --dataset or --synthetic")
    if args.camus:
        return load_camus(args.camus), {"camus": str(args.camus)}
    if args.manifest:
        return load_manifest(args.manifest), {"manifest": str(args.manifest)}
    if getattr(args, "dataset", None):
        return load_bundle(args.dataset), {"bundle": str(args.dataset)}
    synth = _parse_synthetic(args.synthetic, _opt(args, "seed", 0))
    return synthesize_dataset(synth["patients"], synth["size"], synth["seed"]), {"synthetic": synth}


def _add_source_args(p, bundle=True):
    p.add_argument("--camus", help="CAMUS root directory")
    p.add_argument("--manifest", help="CSV/JSON manifest of frames")
    p.add_argument("--synthetic", nargs="*", metavar="KEY=VALUE",
                   help="phantom dataset, e.g. --synthetic patients=30 size=64 seed=0")
    if bundle:
        p.add_argument("--dataset", help="dataset bundle written by 'ingest'")


# --------------------------------------------------------------------------
# subcommands


def cmd_ingest(args):
    ds, source = _dataset_from_args(args)
    print(ds.distribution_table())
    target = _out_path(args, "dataset.npz")
    save_bundle(ds, target)
    checksum = dataset_checksum(ds)
    cached = cache_dir() / "datasets" / f"{checksum[:16]}.npz"
    cached.parent.mkdir(parents=True, exist_ok=True)
    if not cached.exists():
        save_bundle(ds, cached)
    print(f"wrote {len(ds)} frames to {target} (cache: {cached})")
    return EXIT_OK


def cmd_make_pairs(args):
    ds, _ = _dataset_from_args(args)
    quality = parse_quality(_opt(args, "quality", "Good"))
    subset = ds.filter(quality=quality)
    if len(subset) == 0:
        raise ValidationError(f"dataset has no {quality.value} frames")
    scale = int(_opt(args, "scale", 4))
    pairs = make_sr_pairs(subset, scale)
    target = _out_path(args, "pairs.npz")
    save_pairs(pairs, target)
    print(f"wrote {len(pairs)} pairs (x{scale}, {quality.value} tier) to {target}")
    return EXIT_OK


SR_OPTIONS = {
    "steps": ("steps", int), "lr_rate": ("lr_rate", float), "batch": ("batch", int),
    "patch_size": ("patch_size", int), "blocks": ("n_res_blocks", int), "channels": ("base_channels", int),
    "perceptual_weight": ("perceptual_weight", float), "adversarial_weight": ("adversarial_weight", float),
    "scale": ("scale", int),
}


def cmd_train_sr(args):
    if not args.pairs:
        raise UsageError("train-sr needs --pairs (write one with 'make-pairs')")
    pairs = load_pairs(args.pairs)
    fields = {"seed": _opt(args, "seed", 0)}
    for opt, (field, cast) in SR_OPTIONS.items():
        value = _opt(args, opt)
        if value is not None:
            fields[field] = cast(value)
    fields.setdefault("scale", pairs[0].scale)
    cfg = SRConfig(**fields)
    init = ModelParams.load(args.init) if args.init else None
    arch = args.arch
    if arch == ARCH_SRRESNET:
        params, history = train_srresnet(pairs, cfg, init=init)
    else:
        params, history = train_srgan(pairs, cfg, init=init)
    target = _out_path(args, f"{arch}.npz")
    params.save(target)
    hist_path = target.with_suffix(".history.json")
    hist_path.write_text(json.dumps(history.to_dict(), indent=2, sort_keys=True) + "\n")
    for w in history.warnings:
        print(f"warning: {w}")
    final = history.final_eval
    print(f"final loss: {history.records[-1]['generator_loss']:.8f}")
    print(f"final train-set pixel MSE: {final['pixel_loss']:.8f}  PSNR: {final['psnr']:.4f} dB")
    print(f"wrote {target}")
    return EXIT_OK


def cmd_enhance(args):
    if not args.model:
        raise UsageError("enhance needs --model")
    params = ModelParams.load(args.model)
    ds, _ = _dataset_from_args(args)
    quality = _opt(args, "quality", "Poor")
    subset = ds if str(quality).lower() == "all" else ds.filter(quality=parse_quality(quality))
    enhanced = enhance_subset(subset, params)
    target = _out_path(args, "enhanced.npz")
    save_bundle(enhanced, target)
    print(f"enhanced {len(enhanced)} frames with {params.arch}; wrote {target}")
    return EXIT_OK


CLASSIFIER_OPTIONS = {
    "input_size": int, "epochs": int, "batch": int, "lr_rate": float, "width": float,
}


def _classifier_config(args):
    fields = {}
    for opt, cast in CLASSIFIER_OPTIONS.items():
        value = _opt(args, opt)
        if value is not None:
            fields["width_multiplier" if opt == "width" else opt] = cast(value)
    if _opt(args, "pretrained_init"):
        fields["pretrained_init"] = _opt(args, "pretrained_init")
    return ClassifierConfig(**fields)


def cmd_experiment(args):
    modes = {"all": ("cross-quality", "train-on-sr", "test-on-sr")}.get(args.mode, (args.mode,))
    enhancers = {}
    for name, path in (("SRRESNET", args.srresnet), ("SRGAN", args.srgan)):
        if path:
            if not Path(path).exists():
                raise UsageError(f"missing trained SR model: {path}")
            enhancers[name] = ModelParams.load(path)
    if any(m != "cross-quality" for m in modes) and not enhancers:
        raise UsageError(f"mode {args.mode} needs a trained SR model (--srresnet and/or --srgan)")
    tasks = ["view", "phase"] if args.task == "both" else [args.task]
    seeds = _opt(args, "seeds", [0, 1, 2])
    out = Path(_opt(args, "out", "echosr-out"))
    if (out / "results.json").exists() and not args.overwrite:
        raise UsageError(f"{out} already holds results; pass --overwrite or choose another --out")
    ds, source = _dataset_from_args(args)
    cfg = _classifier_config(args)
    by_patient = bool(_opt(args, "by_patient", False))
    config = {"classifier": cfg.to_dict(), "tasks": tasks, "modes": list(modes), "source": source,
              "by_patient": by_patient,
              "sr_models": {k: v.checksum() for k, v in sorted(enhancers.items())}}
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, config, seeds, ds.provenance.value, {"dataset": dataset_checksum(ds)})
    matrices, records = run_all(ds, tasks, cfg, seeds, enhancers, modes, by_patient)
    generate_report(matrices, records, out, config, ds)
    for m in matrices:
        print(f"{m.task.value} accuracy (rows train, cols test: Good Medium Poor)")
        for q in Quality:
            print(f"  {q.value:<7}" + "".join(f"{v:8.3f}" for v in m.row(q)))
    for r in records:
        print(f"{r.task.value:<6}{r.mode.value:<12}{r.sr_model:<9}{r.counterpart_quality.value:<7}"
              f"{r.baseline_acc:7.3f} -> {r.enhanced_acc:7.3f}  ({r.rel_delta_pct:+.2f}%)")
    print(f"wrote results to {out}")
    return EXIT_OK


def cmd_report(args):
    matrices, records, config = load_results(args.results)
    out = Path(_opt(args, "out") or Path(args.results).parent)
    out.mkdir(parents=True, exist_ok=True)
    written = generate_report(matrices, records, out, config)
    # regenerated results must match the input byte for byte
    if Path(args.results).resolve() != written["results"].resolve():
        original = Path(args.results).read_text()
        if written["results"].read_text() != original:
            raise ValidationError("regenerated results differ from the input file")
    print(f"report written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser():
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML or JSON key-value file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--overwrite", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="echosr", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="load or synthesize a dataset and cache it")
    _add_source_args(p, bundle=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("make-pairs", parents=[common], help="build bicubic LR/HR training pairs")
    _add_source_args(p)
    p.add_argument("--quality", default=None)
    p.add_argument("--scale", type=int, default=None)
    p.set_defaults(func=cmd_make_pairs)

    p = sub.add_parser("train-sr", parents=[common], help="train an SRResNet or SRGAN generator")
    p.add_argument("--arch", choices=[ARCH_SRRESNET, ARCH_SRGAN], default=ARCH_SRRESNET)
    p.add_argument("--pairs")
    p.add_argument("--init", help="warm-start generator weights")
    for opt, (_, cast) in SR_OPTIONS.items():
        p.add_argument("--" + opt.replace("_", "-"), dest=opt, type=cast, default=None)
    p.set_defaults(func=cmd_train_sr)

    p = sub.add_parser("enhance", parents=[common], help="super-resolve a dataset tier")
    p.add_argument("--model")
    _add_source_args(p)
    p.add_argument("--quality", default=None, help="tier to enhance (default Poor; 'all' for every frame)")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("experiment", parents=[common], help="run cross-quality and SR experiments")
    p.add_argument("--task", choices=["view", "phase", "both"], default="both")
    p.add_argument("--mode", choices=["cross-quality", "train-on-sr", "test-on-sr", "all"], default="cross-quality")
    _add_source_args(p)
    p.add_argument("--srresnet")
    p.add_argument("--srgan")
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--by-patient", dest="by_patient", action="store_true", default=None)
    p.add_argument("--pretrained-init", dest="pretrained_init", default=None)
    for opt, cast in CLASSIFIER_OPTIONS.items():
        p.add_argument("--" + opt.replace("_", "-"), dest=opt, type=cast, default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", parents=[common], help="regenerate report files from results.json")
    p.add_argument("results")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("seed", "config", "out"):
        setattr(args, name, getattr(args, name, None))
    for name in ("overwrite", "verbose"):
        setattr(args, name, getattr(args, name, False))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.config_values = _load_config(args.config, args.command)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"echosr: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValidationError, KeyError) as exc:
        print(f"echosr: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"echosr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
