"""Checkpoint serialization and the pretrain -> fine-tune workflow.

Checkpoint wire format, bit-exact:

=========  ==========================================================
bytes 0-3  magic ``b"MDNT"``
bytes 4-7  little-endian u32 format version (= 1)
bytes 8-11 little-endian u32 header length in bytes
header     UTF-8 JSON object with keys config, manifest, provenance
payload    concatenated little-endian IEEE-754 float32 tensors
=========  ==========================================================

The manifest lists ``[name, dtype, shape, byte_offset]`` for every graph
parameter, batch-norm running statistics included, in graph order; a loaded
model is therefore bit-identical to the saved one.  Files are written to a
temp path and renamed into place so readers never observe a partial write.
"""

import dataclasses
import json
import os
import struct

import numpy as np

from . import layers
from .data import DataError, split
from .graph import (
    ConfigError,
    MedNetConfig,
    ModelGraph,
    build_mednet,
    init_rng_for,
    with_classes,
)
from .tensor import Rng, ShapeError
from .training import train, write_json_summary

MAGIC = b"MDNT"
FORMAT_VERSION = 1
PROVENANCE_KEYS = ("created_by", "seed", "epochs_trained", "source_dataset_tag")

# Topological stage order; freeze plans are prefix-closed over this list.
STAGES = ("stem", "block_1", "block_2", "block_3", "block_4",
          "block_5", "block_6", "block_7", "block_8")
FREEZE_BOUNDARIES = ("none",) + STAGES + ("all_but_head",)

HEAD_PARAM_NAMES = frozenset({"head.fc2.weight", "head.fc2.bias"})


class CheckpointError(ValueError):
    """Unreadable or internally inconsistent checkpoint file."""


# ---------------------------------------------------------------------------
# serialization


def _normalize_provenance(provenance):
    prov = dict(provenance or {})
    for key in PROVENANCE_KEYS:
        prov.setdefault(key, None)
    return prov


def save_checkpoint(graph, path, provenance=None):
    """Write the graph's config and every parameter tensor to ``path``."""
    manifest = []
    chunks = []
    offset = 0
    for name, value in graph.named_params().items():
        data = np.ascontiguousarray(value, dtype="<f4").tobytes()
        manifest.append([name, "float32", list(value.shape), offset])
        chunks.append(data)
        offset += len(data)
    header = {
        "config": graph.config.to_dict(),
        "manifest": manifest,
        "provenance": _normalize_provenance(provenance),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for data in chunks:
            f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _read_checkpoint(path):
    path = os.fspath(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version}, "
            f"expected {FORMAT_VERSION}"
        )
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    for key in ("config", "manifest", "provenance"):
        if key not in header:
            raise CheckpointError(f"{path}: header lacks {key!r}")
    return header, raw[12 + header_len:]


def read_checkpoint_header(path):
    """Parse just the JSON header: config, manifest, and provenance."""
    header, _ = _read_checkpoint(path)
    return header


def _restore(header, payload, path):
    config = MedNetConfig.from_dict(header["config"])
    graph = build_mednet(config, seed=0)
    params = graph.named_params()
    manifest = header["manifest"]
    expected = sum(int(np.prod(shape, dtype=np.int64)) * 4
                   for _, _, shape, _ in manifest)
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload length mismatch: manifest declares {expected} "
            f"bytes, file holds {len(payload)}"
        )
    seen = set()
    for name, dtype_name, shape, offset in manifest:
        if name not in params:
            raise CheckpointError(
                f"{path}: manifest name {name!r} absent from rebuilt graph")
        if dtype_name != "float32":
            raise CheckpointError(
                f"{path}: unsupported tensor dtype {dtype_name!r}")
        count = int(np.prod(shape, dtype=np.int64))
        if offset < 0 or offset + count * 4 > len(payload):
            raise CheckpointError(
                f"{path}: tensor {name!r} extends past the payload")
        tensor = np.frombuffer(payload, dtype="<f4", count=count,
                               offset=offset).reshape(shape).copy()
        try:
            graph.set_param(name, tensor)
        except ShapeError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(
            f"{path}: manifest lacks graph parameters, e.g. "
            f"{sorted(missing)[0]!r}"
        )
    return graph


def load_checkpoint(path):
    """Rebuild the graph described by the file and restore every tensor."""
    header, payload = _read_checkpoint(path)
    return _restore(header, payload, os.fspath(path))


# ---------------------------------------------------------------------------
# head replacement and freezing


def replace_head(graph, new_num_classes, rng=None):
    """Return a copy of ``graph`` with a fresh classification head.

    Everything up to and including FC1 is carried over bit-identically
    (batch-norm running statistics included); the final FC layer and the
    softmax output are rebuilt for ``new_num_classes``.  ``rng`` seeds the
    He draw for the new weights: an integer reproduces the exact head a
    fresh ``build_mednet(config, seed=rng)`` would hold, an ``Rng`` is used
    directly, and ``None`` defaults to the graph's own build seed.
    """
    new_num_classes = int(new_num_classes)
    if new_num_classes < 2:
        raise ConfigError(
            f"a classifier head needs at least 2 classes, got {new_num_classes}")
    if rng is None:
        rng = graph.seed
    if not isinstance(rng, Rng):
        rng = init_rng_for(int(rng), "head.fc2")
    config = with_classes(graph.config, new_num_classes)
    out = build_mednet(config, seed=graph.seed)
    for name, value in graph.named_params().items():
        if name not in HEAD_PARAM_NAMES:
            out.set_param(name, value.copy())
    fc2 = out.node("head.fc2").layer
    dtype = fc2.params["weight"].dtype
    fc2.params["weight"] = layers.he_normal(
        rng, (fc2.in_features, fc2.out_features), fc2.in_features, dtype)
    fc2.params["bias"] = np.zeros(fc2.out_features, dtype=dtype)
    return out


@dataclasses.dataclass(frozen=True)
class FreezePlan:
    """Which stages stay fixed during fine-tuning.

    ``boundary`` freezes that stage and everything before it in topological
    order, so the frozen set is prefix-closed: ``"none"`` trains everything,
    ``"block_4"`` freezes stem through block_4, ``"all_but_head"`` leaves
    only the FC head trainable.
    """

    boundary: str = "none"

    def __post_init__(self):
        if self.boundary not in FREEZE_BOUNDARIES:
            raise ConfigError(
                f"invalid freeze boundary {self.boundary!r}; "
                f"choose one of {', '.join(FREEZE_BOUNDARIES)}"
            )

    def frozen_stages(self):
        if self.boundary == "none":
            return ()
        if self.boundary == "all_but_head":
            return STAGES
        return STAGES[:STAGES.index(self.boundary) + 1]

    def frozen_names(self, graph):
        prefixes = tuple(f"{stage}." for stage in self.frozen_stages())
        if not prefixes:
            return set()
        return {name for name in graph.trainable_names()
                if name.startswith(prefixes)}


def apply_freeze(graph, plan):
    """Mark the plan's parameters as fixed; returns the same graph.

    Frozen parameters are skipped by the optimizer, and frozen batch-norm
    layers keep using their running statistics during training so small
    target batches cannot corrupt pretrained estimates.
    """
    prefixes = tuple(f"{stage}." for stage in plan.frozen_stages())
    graph.frozen = plan.frozen_names(graph)
    for node in graph.nodes:
        if isinstance(node.layer, layers.BatchNorm2d):
            node.layer.frozen = bool(prefixes) and node.name.startswith(prefixes)
    return graph


# ---------------------------------------------------------------------------
# fine-tune workflow


def _as_train_val(target_dataset, seed):
    """Accept a single dataset (split 80/20) or an explicit (train, val) pair."""
    if isinstance(target_dataset, (tuple, list)):
        if len(target_dataset) != 2:
            raise ValueError("expected (train_set, val_set), got "
                             f"{len(target_dataset)} items")
        return target_dataset[0], target_dataset[1]
    train_set, val_set = split(target_dataset, [0.8, 0.2], seed=seed)
    return train_set, val_set


def _colorspace_name(channels):
    return {1: "gray", 3: "color"}[int(channels)]


def _dataset_channels(dataset):
    colorspace = getattr(dataset, "colorspace", None)
    if colorspace in ("gray", "color"):
        return {"gray": 1, "color": 3}[colorspace]
    images, _ = dataset.arrays() if hasattr(dataset, "arrays") else dataset
    return int(images.shape[3])


def _check_colorspace(config, dataset, path):
    want = config.input_channels
    have = _dataset_channels(dataset)
    if want != have:
        raise DataError(
            f"colorspace mismatch: checkpoint {path} was trained on "
            f"{_colorspace_name(want)} images ({want} channel(s)) but the "
            f"target dataset is {_colorspace_name(have)} ({have} channel(s))"
        )


def finetune(checkpoint_path, target_dataset, new_num_classes, plan, config,
             csv_path=None, json_path=None, log=None):
    """Load -> replace_head -> apply_freeze -> train on the target task.

    ``target_dataset`` is either a single dataset, split 80/20 with the
    train config's seed, or an explicit ``(train_set, val_set)`` pair.
    Returns ``(records, graph)`` like the training loop; the graph carries a
    ``provenance`` note linking back to the source checkpoint.
    """
    checkpoint_path = os.fspath(checkpoint_path)
    header, payload = _read_checkpoint(checkpoint_path)
    source_config = MedNetConfig.from_dict(header["config"])
    train_set, val_set = _as_train_val(target_dataset, config.seed)
    _check_colorspace(source_config, train_set, checkpoint_path)
    graph = _restore(header, payload, checkpoint_path)
    graph = replace_head(graph, new_num_classes, rng=config.seed)
    apply_freeze(graph, plan)
    records, graph = train(graph, train_set, val_set, config,
                           csv_path=csv_path, log=log)
    graph.provenance = {
        "source_checkpoint": checkpoint_path,
        "source_provenance": header["provenance"],
        "freeze_boundary": plan.boundary,
        "new_num_classes": int(new_num_classes),
    }
    if json_path is not None:
        write_json_summary(json_path, records, config,
                           extra={"transfer": graph.provenance})
    return records, graph


# ---------------------------------------------------------------------------
# scratch-vs-finetune comparison


def epochs_to_threshold(records, threshold):
    """1-based count of epochs until validation accuracy first reaches
    ``threshold``; None if it never does."""
    for i, record in enumerate(records):
        if record.val_accuracy >= threshold:
            return i + 1
    return None


def _arm_summary(records, threshold):
    return {
        "best_val_accuracy": max(r.val_accuracy for r in records),
        "final_val_accuracy": records[-1].val_accuracy,
        "epochs_to_threshold": epochs_to_threshold(records, threshold),
        "epochs": len(records),
    }


def compare_transfer(source_checkpoint, target_dataset, config, n_seeds,
                     plan=None, new_num_classes=None, seeds=None,
                     json_path=None, log=None):
    """Train scratch and fine-tuned arms per seed; report both.

    For each seed the two arms share one target split and one training
    seed; the scratch arm builds a fresh model, the fine-tune arm starts
    from the checkpoint.  A seed counts as a win when the fine-tuned arm
    reaches the scratch arm's best validation accuracy in at most half the
    epochs the scratch arm needed.  Returns a JSON-serializable report.
    """
    n_seeds = int(n_seeds)
    if n_seeds < 3:
        raise ValueError(f"n_seeds must be at least 3, got {n_seeds}")
    if seeds is None:
        seeds = tuple(range(n_seeds))
    else:
        seeds = tuple(int(s) for s in seeds)
        if len(seeds) != n_seeds:
            raise ValueError(f"got {len(seeds)} seeds for n_seeds={n_seeds}")
    plan = plan if plan is not None else FreezePlan("none")
    source_checkpoint = os.fspath(source_checkpoint)
    header = read_checkpoint_header(source_checkpoint)
    source_config = MedNetConfig.from_dict(header["config"])

    probe_train, _ = _as_train_val(target_dataset, seeds[0])
    if new_num_classes is None:
        class_names = getattr(probe_train, "class_names", None)
        if class_names is None:
            raise ValueError("pass new_num_classes explicitly for datasets "
                             "without class_names")
        new_num_classes = len(class_names)

    runs = []
    wins = 0
    for seed in seeds:
        cfg = dataclasses.replace(config, seed=seed)
        train_set, val_set = _as_train_val(target_dataset, seed)
        _check_colorspace(source_config, train_set, source_checkpoint)

        scratch = build_mednet(with_classes(source_config, new_num_classes),
                               seed=seed)
        scratch_records, _ = train(scratch, train_set, val_set, cfg, log=log)
        ft_records, _ = finetune(source_checkpoint, (train_set, val_set),
                                 new_num_classes, plan, cfg, log=log)

        threshold = max(r.val_accuracy for r in scratch_records)
        scratch_epochs = epochs_to_threshold(scratch_records, threshold)
        ft_epochs = epochs_to_threshold(ft_records, threshold)
        win = ft_epochs is not None and 2 * ft_epochs <= scratch_epochs
        wins += int(win)
        runs.append({
            "seed": seed,
            "threshold": threshold,
            "scratch": _arm_summary(scratch_records, threshold),
            "finetuned": _arm_summary(ft_records, threshold),
            "finetuned_in_half_epochs": bool(win),
        })

    report = {
        "source_checkpoint": source_checkpoint,
        "freeze_boundary": plan.boundary,
        "new_num_classes": int(new_num_classes),
        "n_seeds": n_seeds,
        "seeds": list(seeds),
        "epochs_per_run": config.epochs,
        "wins": wins,
        "runs": runs,
    }
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
    return report
