"""Command-line front end: one process per run, files as the only output.

Subcommands: summary, synth-data, pretrain, finetune, eval, gradcheck,
compare.  Global flags ``--config`` (JSON file), ``--seed``, ``--out-dir``
(alias ``--out``), and ``--variant`` (gray or color) apply everywhere;
resolution order is CLI flag > config file > built-in default, and the fully
resolved set is echoed into the run manifest before any training starts.
Config file keys are the flag names with underscores.

Exit codes: 0 success, 1 validation failure (message on stderr), 2 usage
error (argparse).  Commands that produce files write only under
``--out-dir``; summary, eval, and gradcheck write nothing.
"""

import argparse
import json
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone

from .data import (
    DataError,
    load_image_dir,
    save_dataset_dir,
    split,
    synth_dataset,
)
from .gradcheck import all_ok, format_report, run_all
from .graph import (
    build_mednet,
    canonical_config,
    canonical_small_config,
    format_summary,
    slim_config,
    tiny_config,
    with_classes,
)
from .training import StepDecay, TrainConfig, evaluate, train
from .transfer import (
    FREEZE_BOUNDARIES,
    FreezePlan,
    compare_transfer,
    finetune,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
)

VARIANT_CHANNELS = {"gray": 1, "color": 3}
ARCH_PRESETS = {
    "canonical": canonical_config,
    "canonical-small": canonical_small_config,
    "slim": slim_config,
    "tiny": tiny_config,
}

MANIFEST_NAME = "manifest.json"

TRAIN_KNOBS = {
    "epochs": 10,
    "batch_size": 32,
    "lr": 0.01,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "decay_every": 30,
    "decay_factor": 0.1,
}

DEFAULTS = {
    "summary": {"arch": "canonical", "variant": "gray", "classes": None,
                "seed": 0},
    "synth-data": {"variant": "gray", "classes": 8, "per_class": 250,
                   "size": 64, "seed": 0, "out_dir": "runs/synth-data"},
    "pretrain": {"arch": "canonical", "variant": "gray", "data": None,
                 "classes": 8, "per_class": 250, "size": 64,
                 "val_fraction": 0.2, "seed": 0, "out_dir": "runs/pretrain",
                 **TRAIN_KNOBS},
    "finetune": {"checkpoint": None, "data": None, "variant": None,
                 "classes": None, "per_class": 50, "freeze": "none",
                 "seed": 0, "out_dir": "runs/finetune",
                 **{**TRAIN_KNOBS, "batch_size": 16}},
    "eval": {"checkpoint": None, "arch": "canonical", "variant": None,
             "data": None, "classes": None, "per_class": 50, "size": 64,
             "batch_size": 64, "seed": 0},
    "gradcheck": {"seed": 0, "trials": 20},
    "compare": {"checkpoint": None, "data": None, "variant": None,
                "classes": None, "per_class": 50, "n_seeds": 5,
                "freeze": "none", "seed": 0, "out_dir": "runs/compare",
                **{**TRAIN_KNOBS, "batch_size": 16}},
}


# ---------------------------------------------------------------------------
# config resolution and run manifests


def _resolve(args):
    """defaults <- config file <- explicit CLI flags, all keys materialized."""
    defaults = DEFAULTS[args.command]
    resolved = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            file_config = json.load(f)
        if not isinstance(file_config, dict):
            raise ValueError(f"{args.config}: config file must hold a JSON object")
        unknown = set(file_config) - set(defaults)
        if unknown:
            raise ValueError(
                f"{args.config}: unknown config keys for {args.command}: "
                f"{', '.join(sorted(unknown))}")
        resolved.update(file_config)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    variant = resolved.get("variant")
    if variant is not None and variant not in VARIANT_CHANNELS:
        raise ValueError(f"variant must be 'gray' or 'color', got {variant!r}")
    return resolved


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(out_dir, manifest):
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _start_manifest(command, resolved):
    out_dir = resolved["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": resolved,
        "seed": resolved.get("seed"),
        "started_at": _now(),
        "ended_at": None,
        "outputs": [],
    }
    _write_manifest(out_dir, manifest)
    return manifest


def _finish_manifest(resolved, manifest, outputs):
    manifest["ended_at"] = _now()
    manifest["outputs"] = sorted(outputs)
    _write_manifest(resolved["out_dir"], manifest)


# ---------------------------------------------------------------------------
# shared pieces


def _preset(name):
    if name not in ARCH_PRESETS:
        raise ValueError(f"unknown architecture {name!r}; choose one of "
                         f"{', '.join(sorted(ARCH_PRESETS))}")
    return ARCH_PRESETS[name]()


def _build_config(arch, size, channels, num_classes):
    config = replace(_preset(arch), input_h=size, input_w=size,
                     input_channels=channels, num_classes=num_classes)
    config.validate()
    return config


def _train_config(resolved):
    return TrainConfig(
        epochs=int(resolved["epochs"]),
        batch_size=int(resolved["batch_size"]),
        lr=float(resolved["lr"]),
        momentum=float(resolved["momentum"]),
        weight_decay=float(resolved["weight_decay"]),
        lr_decay=StepDecay(int(resolved["decay_every"]),
                           float(resolved["decay_factor"])),
        seed=int(resolved["seed"]),
    )


def _colorspace_of(channels):
    return {1: "gray", 3: "color"}[int(channels)]


def _dataset_for(resolved, kind, size, default_classes):
    """A directory dataset resized to the model, or a synthetic one."""
    if resolved.get("data"):
        return load_image_dir(resolved["data"], kind, size)
    classes = resolved.get("classes") or default_classes
    return synth_dataset(kind, int(classes), int(resolved["per_class"]),
                         int(size), seed=int(resolved["seed"]))


def _dataset_tag(resolved, kind, size, classes):
    if resolved.get("data"):
        return str(resolved["data"])
    return (f"synth/{kind}/{classes}x{resolved['per_class']}"
            f"@{size}/seed{resolved['seed']}")


def _train_val(dataset, val_fraction, seed):
    if val_fraction <= 0.0:
        return dataset, dataset
    train_set, val_set = split(dataset, [1.0 - val_fraction, val_fraction],
                               seed=seed)
    return train_set, val_set


def _print_confusion(confusion):
    print("confusion (rows = truth):")
    width = max(len(str(int(v))) for v in confusion.flat)
    for row in confusion:
        print("  " + " ".join(f"{int(v):>{width}d}" for v in row))


# ---------------------------------------------------------------------------
# subcommands


def cmd_summary(args):
    resolved = _resolve(args)
    config = replace(_preset(resolved["arch"]),
                     input_channels=VARIANT_CHANNELS[resolved["variant"]])
    if resolved["classes"]:
        config = with_classes(config, int(resolved["classes"]))
    graph = build_mednet(config, seed=int(resolved["seed"]))
    print(format_summary(graph))
    return 0


def cmd_synth_data(args):
    resolved = _resolve(args)
    manifest = _start_manifest("synth-data", resolved)
    dataset = synth_dataset(resolved["variant"], int(resolved["classes"]),
                            int(resolved["per_class"]), int(resolved["size"]),
                            seed=int(resolved["seed"]))
    save_dataset_dir(dataset, resolved["out_dir"])
    _finish_manifest(resolved, manifest, dataset.class_names)
    print(f"wrote {len(dataset)} images in {len(dataset.class_names)} "
          f"classes to {resolved['out_dir']}")
    return 0


def cmd_pretrain(args):
    resolved = _resolve(args)
    kind = resolved["variant"]
    size = int(resolved["size"])
    dataset = _dataset_for(resolved, kind, size, default_classes=8)
    num_classes = len(dataset.class_names)
    config = _build_config(resolved["arch"], size, VARIANT_CHANNELS[kind],
                           num_classes)
    graph = build_mednet(config, seed=int(resolved["seed"]))
    train_set, val_set = _train_val(dataset, float(resolved["val_fraction"]),
                                    int(resolved["seed"]))
    train_config = _train_config(resolved)

    manifest = _start_manifest("pretrain", resolved)
    out = resolved["out_dir"]
    records, graph = train(graph, train_set, val_set, train_config,
                           csv_path=os.path.join(out, "metrics.csv"),
                           json_path=os.path.join(out, "summary.json"),
                           log=print)
    checkpoint_path = os.path.join(out, "checkpoint.ckpt")
    save_checkpoint(graph, checkpoint_path, {
        "created_by": "mednet pretrain",
        "seed": int(resolved["seed"]),
        "epochs_trained": len(records),
        "source_dataset_tag": _dataset_tag(resolved, kind, size, num_classes),
    })
    _finish_manifest(resolved, manifest,
                     ["metrics.csv", "summary.json", "checkpoint.ckpt"])
    print(f"checkpoint: {checkpoint_path}")
    return 0


def cmd_finetune(args):
    resolved = _resolve(args)
    if not resolved["checkpoint"]:
        raise ValueError("finetune requires --checkpoint")
    header = read_checkpoint_header(resolved["checkpoint"])
    source = header["config"]
    kind = resolved["variant"] or _colorspace_of(source["input_channels"])
    size = int(source["input_h"])
    dataset = _dataset_for(resolved, kind, (source["input_h"],
                                            source["input_w"]) if
                           resolved.get("data") else size, default_classes=2)
    num_classes = len(dataset.class_names)
    train_config = _train_config(resolved)

    manifest = _start_manifest("finetune", resolved)
    out = resolved["out_dir"]
    records, graph = finetune(
        resolved["checkpoint"], dataset, num_classes,
        FreezePlan(resolved["freeze"]), train_config,
        csv_path=os.path.join(out, "metrics.csv"),
        json_path=os.path.join(out, "summary.json"), log=print)
    checkpoint_path = os.path.join(out, "checkpoint.ckpt")
    save_checkpoint(graph, checkpoint_path, {
        "created_by": "mednet finetune",
        "seed": int(resolved["seed"]),
        "epochs_trained": len(records),
        "source_dataset_tag": _dataset_tag(resolved, kind, size, num_classes),
    })
    _finish_manifest(resolved, manifest,
                     ["metrics.csv", "summary.json", "checkpoint.ckpt"])
    print(f"checkpoint: {checkpoint_path}")
    return 0


def cmd_eval(args):
    resolved = _resolve(args)
    if resolved["checkpoint"]:
        graph = load_checkpoint(resolved["checkpoint"])
        config = graph.config
        kind = _colorspace_of(config.input_channels)
        dataset = _dataset_for(
            resolved, kind,
            (config.input_h, config.input_w) if resolved.get("data")
            else config.input_h,
            default_classes=config.num_classes)
    else:
        kind = resolved["variant"] or "gray"
        size = int(resolved["size"])
        dataset = _dataset_for(resolved, kind, size, default_classes=4)
        config = _build_config(resolved["arch"], size, VARIANT_CHANNELS[kind],
                               len(dataset.class_names))
        graph = build_mednet(config, seed=int(resolved["seed"]))
    loss, accuracy, confusion = evaluate(graph, dataset,
                                         batch_size=int(resolved["batch_size"]))
    print(f"samples: {len(dataset)}")
    print(f"loss: {loss:.6f}")
    print(f"accuracy: {accuracy:.6f}")
    _print_confusion(confusion)
    return 0


def cmd_gradcheck(args):
    resolved = _resolve(args)
    results = run_all(seed=int(resolved["seed"]), trials=int(resolved["trials"]))
    print(format_report(results))
    return 0 if all_ok(results) else 1


def cmd_compare(args):
    resolved = _resolve(args)
    if not resolved["checkpoint"]:
        raise ValueError("compare requires --checkpoint")
    header = read_checkpoint_header(resolved["checkpoint"])
    source = header["config"]
    kind = resolved["variant"] or _colorspace_of(source["input_channels"])
    dataset = _dataset_for(resolved, kind,
                           (source["input_h"], source["input_w"]) if
                           resolved.get("data") else int(source["input_h"]),
                           default_classes=2)
    train_config = _train_config(resolved)

    manifest = _start_manifest("compare", resolved)
    out = resolved["out_dir"]
    report = compare_transfer(
        resolved["checkpoint"], dataset, train_config,
        int(resolved["n_seeds"]), plan=FreezePlan(resolved["freeze"]),
        new_num_classes=len(dataset.class_names),
        json_path=os.path.join(out, "report.json"))
    for run in report["runs"]:
        scratch, ft = run["scratch"], run["finetuned"]
        reached = ft["epochs_to_threshold"]
        print(f"seed {run['seed']}: scratch best {scratch['best_val_accuracy']:.3f} "
              f"(epoch {scratch['epochs_to_threshold']}), finetuned best "
              f"{ft['best_val_accuracy']:.3f} (threshold at "
              f"{'epoch ' + str(reached) if reached else 'no epoch'}), "
              f"win={run['finetuned_in_half_epochs']}")
    print(f"wins: {report['wins']}/{report['n_seeds']}")
    _finish_manifest(resolved, manifest, ["report.json"])
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_global_flags(sub):
    sub.add_argument("--config", help="JSON file of config keys (flag names "
                     "with underscores); CLI flags override it")
    sub.add_argument("--seed", type=int, help="master seed")
    sub.add_argument("--out-dir", "--out", dest="out_dir",
                     help="directory all outputs are written under")
    sub.add_argument("--variant", choices=("gray", "color"),
                     help="input colorspace: 1-channel gray or 3-channel color")


def _add_train_flags(sub):
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--momentum", type=float)
    sub.add_argument("--weight-decay", type=float)
    sub.add_argument("--decay-every", type=int)
    sub.add_argument("--decay-factor", type=float)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mednet",
        description="Train, fine-tune, and inspect MedNet models.")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("summary", help="print the architecture table")
    _add_global_flags(sub)
    sub.add_argument("--arch", choices=sorted(ARCH_PRESETS))
    sub.add_argument("--classes", type=int)
    sub.set_defaults(func=cmd_summary)

    sub = commands.add_parser("synth-data", help="write a synthetic dataset "
                              "directory of PGM/PPM files")
    _add_global_flags(sub)
    sub.add_argument("--classes", type=int)
    sub.add_argument("--per-class", type=int)
    sub.add_argument("--size", type=int)
    sub.set_defaults(func=cmd_synth_data)

    sub = commands.add_parser("pretrain", help="train from scratch and write "
                              "a checkpoint")
    _add_global_flags(sub)
    _add_train_flags(sub)
    sub.add_argument("--arch", choices=sorted(ARCH_PRESETS))
    sub.add_argument("--data", help="dataset directory (default: synthetic)")
    sub.add_argument("--classes", type=int)
    sub.add_argument("--per-class", type=int)
    sub.add_argument("--size", type=int)
    sub.add_argument("--val-fraction", type=float)
    sub.set_defaults(func=cmd_pretrain)

    sub = commands.add_parser("finetune", help="fine-tune a checkpoint on a "
                              "target dataset")
    _add_global_flags(sub)
    _add_train_flags(sub)
    sub.add_argument("--checkpoint")
    sub.add_argument("--data", help="dataset directory (default: synthetic)")
    sub.add_argument("--classes", type=int)
    sub.add_argument("--per-class", type=int)
    sub.add_argument("--freeze", choices=FREEZE_BOUNDARIES)
    sub.set_defaults(func=cmd_finetune)

    sub = commands.add_parser("eval", help="loss, accuracy, and confusion "
                              "matrix of a model on a dataset")
    _add_global_flags(sub)
    sub.add_argument("--checkpoint", help="model to evaluate (default: a "
                     "freshly initialized one)")
    sub.add_argument("--arch", choices=sorted(ARCH_PRESETS))
    sub.add_argument("--data", help="dataset directory (default: synthetic)")
    sub.add_argument("--classes", type=int)
    sub.add_argument("--per-class", type=int)
    sub.add_argument("--size", type=int)
    sub.add_argument("--batch-size", type=int)
    sub.set_defaults(func=cmd_eval)

    sub = commands.add_parser("gradcheck", help="finite-difference gradient "
                              "suite; nonzero exit on failure")
    _add_global_flags(sub)
    sub.add_argument("--trials", type=int)
    sub.set_defaults(func=cmd_gradcheck)

    sub = commands.add_parser("compare", help="scratch-vs-finetune comparison "
                              "across seeds")
    _add_global_flags(sub)
    _add_train_flags(sub)
    sub.add_argument("--checkpoint")
    sub.add_argument("--data", help="dataset directory (default: synthetic)")
    sub.add_argument("--classes", type=int)
    sub.add_argument("--per-class", type=int)
    sub.add_argument("--n-seeds", type=int)
    sub.add_argument("--freeze", choices=FREEZE_BOUNDARIES)
    sub.set_defaults(func=cmd_compare)

    return parser


def cli(argv=None):
    """Parse and run; returns the exit code (argparse usage errors exit 2)."""
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def entry():
    sys.exit(cli(sys.argv[1:]))
