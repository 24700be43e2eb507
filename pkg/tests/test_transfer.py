import json
import struct

import numpy as np
import numpy.testing as npt
import pytest

from mednet.data import DataError, split, synth_dataset
from mednet.graph import ConfigError, build_mednet, tiny_config, with_classes
from mednet.tensor import Rng
from mednet.training import TrainConfig
from mednet.transfer import (
    FREEZE_BOUNDARIES,
    CheckpointError,
    FreezePlan,
    apply_freeze,
    compare_transfer,
    epochs_to_threshold,
    finetune,
    load_checkpoint,
    read_checkpoint_header,
    replace_head,
    save_checkpoint,
)


def tiny_graph(seed=0, num_classes=3):
    return build_mednet(tiny_config(num_classes=num_classes), seed=seed)


def tiny_data(num_classes=3, per_class=6, seed=11):
    return synth_dataset("gray", num_classes, per_class, 16, seed=seed)


def fast_config(**overrides):
    base = dict(epochs=2, batch_size=4, lr=0.05, momentum=0.9,
                weight_decay=1e-4, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def repack(path, mutate_header=None, mutate_payload=None):
    """Rewrite a checkpoint with a tampered header and/or payload."""
    raw = path.read_bytes()
    version, header_len = struct.unpack("<II", raw[4:12])
    header = json.loads(raw[12:12 + header_len])
    payload = raw[12 + header_len:]
    if mutate_header is not None:
        header = mutate_header(header) or header
    if mutate_payload is not None:
        payload = mutate_payload(payload)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.write_bytes(raw[:4] + struct.pack("<II", version, len(blob))
                     + blob + payload)


class TestCheckpointFormat:
    def test_byte_layout(self, tmp_path):
        graph = tiny_graph(seed=1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(graph, path, {"created_by": "test", "seed": 1})
        raw = path.read_bytes()
        assert raw[:4] == b"MDNT"
        version, header_len = struct.unpack("<II", raw[4:12])
        assert version == 1
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
        assert set(header) == {"config", "manifest", "provenance"}
        params = graph.named_params()
        names = [row[0] for row in header["manifest"]]
        assert names == list(params)
        payload = raw[12 + header_len:]
        total = sum(int(np.prod(row[2])) * 4 for row in header["manifest"])
        assert len(payload) == total
        first = params[names[0]]
        assert payload[:first.size * 4] == \
            np.ascontiguousarray(first, dtype="<f4").tobytes()

    def test_provenance_round_trip(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_graph(), path,
                        {"created_by": "pretrain", "seed": 4,
                         "epochs_trained": 12, "source_dataset_tag": "synth8"})
        prov = read_checkpoint_header(path)["provenance"]
        assert prov == {"created_by": "pretrain", "seed": 4,
                        "epochs_trained": 12, "source_dataset_tag": "synth8"}

    def test_missing_provenance_keys_filled(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_graph(), path)
        prov = read_checkpoint_header(path)["provenance"]
        assert set(prov) == {"created_by", "seed", "epochs_trained",
                             "source_dataset_tag"}
        assert all(v is None for v in prov.values())

    def test_save_is_deterministic(self, tmp_path):
        graph = tiny_graph(seed=2)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(graph, a, {"seed": 2})
        save_checkpoint(graph, b, {"seed": 2})
        assert a.read_bytes() == b.read_bytes()

    def test_no_temp_file_left(self, tmp_path):
        save_checkpoint(tiny_graph(), tmp_path / "m.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


class TestCheckpointRoundTrip:
    def test_eval_forward_bit_identical(self, tmp_path):
        graph = tiny_graph(seed=3)
        x = Rng(5).random((2, 16, 16, 1)).astype(np.float32)
        graph.set_mode("eval")
        logits_before, probs_before = graph.forward(x)
        path = tmp_path / "m.ckpt"
        save_checkpoint(graph, path)
        loaded = load_checkpoint(path)
        loaded.set_mode("eval")
        logits_after, probs_after = loaded.forward(x)
        npt.assert_array_equal(logits_after, logits_before)
        npt.assert_array_equal(probs_after, probs_before)

    def test_every_tensor_bit_identical(self, tmp_path):
        graph = tiny_graph(seed=6)
        # perturb a running stat so restore is tested on non-init values
        graph.node("stem.bn1").layer.params["running_mean"] += 0.25
        path = tmp_path / "m.ckpt"
        save_checkpoint(graph, path)
        loaded = load_checkpoint(path)
        before = graph.named_params()
        after = loaded.named_params()
        assert list(before) == list(after)
        for name in before:
            npt.assert_array_equal(after[name], before[name], err_msg=name)

    def test_save_load_save_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(tiny_graph(seed=7), a)
        save_checkpoint(load_checkpoint(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_gray_checkpoint_reports_one_channel(self, tmp_path):
        path = tmp_path / "gray.ckpt"
        save_checkpoint(tiny_graph(), path)
        assert load_checkpoint(path).config.input_channels == 1

    def test_config_survives(self, tmp_path):
        config = tiny_config(num_classes=5)
        path = tmp_path / "m.ckpt"
        save_checkpoint(build_mednet(config, seed=0), path)
        assert load_checkpoint(path).config == config


class TestCheckpointErrors:
    def make(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_graph(), path)
        return path

    def test_bad_magic(self, tmp_path):
        path = self.make(tmp_path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = self.make(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
        with pytest.raises(CheckpointError, match="version 2"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = self.make(tmp_path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="length mismatch"):
            load_checkpoint(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        path.write_bytes(b"")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_unknown_manifest_name(self, tmp_path):
        path = self.make(tmp_path)

        def rename(header):
            header["manifest"][0][0] = "stem.conv9.kernel"

        repack(path, mutate_header=rename)
        with pytest.raises(CheckpointError, match="stem.conv9.kernel"):
            load_checkpoint(path)

    def test_manifest_missing_a_parameter(self, tmp_path):
        path = self.make(tmp_path)
        header = read_checkpoint_header(path)
        last_offset = header["manifest"][-1][3]

        def drop(header):
            header["manifest"].pop()

        repack(path, mutate_header=drop,
               mutate_payload=lambda p: p[:last_offset])
        with pytest.raises(CheckpointError, match="lacks graph parameters"):
            load_checkpoint(path)

    def test_corrupt_header_json(self, tmp_path):
        path = self.make(tmp_path)
        raw = path.read_bytes()
        header_len = struct.unpack("<I", raw[8:12])[0]
        path.write_bytes(raw[:12] + b"{" * header_len + raw[12 + header_len:])
        with pytest.raises(CheckpointError, match="corrupt header"):
            load_checkpoint(path)


class TestReplaceHead:
    def test_eight_to_two(self):
        graph = tiny_graph(num_classes=8)
        out = replace_head(graph, 2)
        assert out.config.num_classes == 2
        fc2 = out.node("head.fc2").layer
        assert fc2.out_features == 2
        assert out.node("head.softmax").layer.num_classes == 2
        x = Rng(0).random((2, 16, 16, 1)).astype(np.float32)
        out.set_mode("eval")
        logits, probs = out.forward(x)
        assert logits.shape == (2, 2)
        npt.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-6)

    def test_four_class_biopsy_shape(self):
        out = replace_head(tiny_graph(num_classes=8), 4)
        assert out.node("head.fc2").layer.out_features == 4

    def test_changed_names_exactly_head(self):
        graph = tiny_graph(num_classes=3, seed=4)
        out = replace_head(graph, 3, rng=Rng(99))
        before = graph.named_params()
        after = out.named_params()
        assert list(before) == list(after)
        changed = {name for name in before
                   if not np.array_equal(before[name], after[name])}
        assert changed == {"head.fc2.weight", "head.fc2.bias"} or \
            changed == {"head.fc2.weight"}  # bias is zeros on both sides
        assert not np.array_equal(after["head.fc2.weight"],
                                  before["head.fc2.weight"])

    def test_fc1_retained(self):
        graph = tiny_graph(num_classes=3, seed=4)
        out = replace_head(graph, 2, rng=Rng(99))
        npt.assert_array_equal(out.named_params()["head.fc1.weight"],
                               graph.named_params()["head.fc1.weight"])

    def test_copy_does_not_alias(self):
        graph = tiny_graph()
        out = replace_head(graph, 2)
        out.node("stem.conv1").layer.params["kernel"][...] = 0.0
        assert graph.node("stem.conv1").layer.params["kernel"].any()

    def test_head_init_matches_fresh_build(self):
        config = tiny_config(num_classes=8)
        pretrained = build_mednet(config, seed=3)
        swapped = replace_head(pretrained, 5, rng=3)
        fresh = build_mednet(with_classes(config, 5), seed=3)
        a, b = swapped.named_params(), fresh.named_params()
        assert list(a) == list(b)
        for name in a:
            npt.assert_array_equal(a[name], b[name], err_msg=name)

    def test_too_few_classes_rejected(self):
        with pytest.raises(ConfigError, match="at least 2"):
            replace_head(tiny_graph(), 1)


class TestFreezePlan:
    def test_none_trains_everything(self):
        graph = tiny_graph()
        plan = FreezePlan("none")
        assert plan.frozen_names(graph) == set()
        apply_freeze(graph, plan)
        assert graph.frozen == set()
        assert not any(getattr(n.layer, "frozen", False) for n in graph.nodes)

    def test_all_but_head_leaves_only_fc(self):
        graph = tiny_graph()
        apply_freeze(graph, FreezePlan("all_but_head"))
        trainable = set(graph.trainable_names()) - graph.frozen
        assert trainable == {"head.fc1.weight", "head.fc1.bias",
                             "head.fc2.weight", "head.fc2.bias"}

    def test_block_boundary_freezes_prefix(self):
        graph = tiny_graph()
        frozen = FreezePlan("block_4").frozen_names(graph)
        assert "stem.conv1.kernel" in frozen
        assert "block_4.branch3x3.conv.kernel" in frozen
        assert "block_3.short_proj.conv.kernel" in frozen
        assert not any(name.startswith(("block_5.", "head.")) for name in frozen)

    def test_prefix_closed_in_order(self):
        graph = tiny_graph()
        previous = set()
        for boundary in FREEZE_BOUNDARIES[:-1]:  # none, stem, block_1..8
            current = FreezePlan(boundary).frozen_names(graph)
            assert previous <= current
            previous = current
        assert previous <= FreezePlan("all_but_head").frozen_names(graph)

    def test_frozen_batchnorm_flagged(self):
        graph = tiny_graph()
        apply_freeze(graph, FreezePlan("block_2"))
        assert graph.node("stem.bn1").layer.frozen
        assert graph.node("block_2.branch1x1.bn").layer.frozen
        assert not graph.node("block_3.branch1x1.bn").layer.frozen
        # reapplying a smaller plan thaws previously frozen layers
        apply_freeze(graph, FreezePlan("stem"))
        assert not graph.node("block_2.branch1x1.bn").layer.frozen

    def test_invalid_boundary_rejected(self):
        with pytest.raises(ConfigError, match="invalid freeze boundary"):
            FreezePlan("block_9")


class TestFinetune:
    def test_smoke_emits_records_and_provenance(self, tmp_path):
        path = tmp_path / "src.ckpt"
        save_checkpoint(tiny_graph(num_classes=3, seed=1), path,
                        {"source_dataset_tag": "synth3"})
        data = tiny_data(num_classes=2, per_class=8, seed=12)
        records, graph = finetune(path, data, 2, FreezePlan("none"),
                                  fast_config(epochs=1, seed=5))
        assert len(records) == 1
        assert graph.config.num_classes == 2
        assert graph.provenance["source_checkpoint"] == str(path)
        assert graph.provenance["source_provenance"]["source_dataset_tag"] == \
            "synth3"
        assert graph.provenance["freeze_boundary"] == "none"

    def test_colorspace_mismatch_names_both(self, tmp_path):
        path = tmp_path / "gray.ckpt"
        save_checkpoint(tiny_graph(num_classes=3), path)
        color = synth_dataset("color", 2, 6, 16, seed=2)
        with pytest.raises(DataError, match="gray.*color"):
            finetune(path, color, 2, FreezePlan("none"), fast_config())

    def test_lr_zero_preserves_non_head(self, tmp_path):
        path = tmp_path / "src.ckpt"
        source = tiny_graph(num_classes=3, seed=1)
        save_checkpoint(source, path)
        data = tiny_data(num_classes=3, per_class=8, seed=13)
        _, graph = finetune(path, data, 3, FreezePlan("none"),
                            fast_config(epochs=1, lr=0.0, seed=9))
        before = source.named_params()
        after = graph.named_params()
        for name in graph.trainable_names():
            if not name.startswith("head.fc2."):
                npt.assert_array_equal(after[name], before[name], err_msg=name)

    def test_frozen_block4_params_match_checkpoint_after_steps(self, tmp_path):
        path = tmp_path / "src.ckpt"
        source = tiny_graph(num_classes=3, seed=2)
        save_checkpoint(source, path)
        data = tiny_data(num_classes=3, per_class=8, seed=14)
        plan = FreezePlan("block_4")
        # 24 samples at batch 4 is 6 steps/epoch; 2 epochs is 12 steps
        _, graph = finetune(path, (split(data, [0.8, 0.2], seed=0)), 3, plan,
                            fast_config(epochs=2, batch_size=4, seed=3))
        before = source.named_params()
        after = graph.named_params()
        prefixes = tuple(f"{s}." for s in plan.frozen_stages())
        frozen_names = [n for n in before if n.startswith(prefixes)]
        assert len(frozen_names) > 50
        for name in frozen_names:  # running stats stay put too: BN is frozen
            npt.assert_array_equal(after[name], before[name], err_msg=name)
        moved = [n for n in graph.trainable_names()
                 if not n.startswith(prefixes)
                 and not np.array_equal(after[n], before.get(n, after[n]))]
        assert any(n.startswith("block_5.") for n in moved)
        assert any(n.startswith("head.fc1.") for n in moved)

    def test_json_summary_links_source(self, tmp_path):
        path = tmp_path / "src.ckpt"
        save_checkpoint(tiny_graph(num_classes=2, seed=1), path)
        data = tiny_data(num_classes=2, per_class=8, seed=15)
        out = tmp_path / "summary.json"
        finetune(path, data, 2, FreezePlan("all_but_head"),
                 fast_config(epochs=1), json_path=out)
        summary = json.loads(out.read_text())
        assert summary["transfer"]["source_checkpoint"] == str(path)
        assert summary["transfer"]["freeze_boundary"] == "all_but_head"
        assert summary["epochs"] == 1


class TestCompareTransfer:
    def test_requires_three_seeds(self, tmp_path):
        path = tmp_path / "src.ckpt"
        save_checkpoint(tiny_graph(num_classes=2), path)
        with pytest.raises(ValueError, match="at least 3"):
            compare_transfer(path, tiny_data(2, 6), fast_config(), n_seeds=2)

    def test_report_shape(self, tmp_path):
        path = tmp_path / "src.ckpt"
        save_checkpoint(tiny_graph(num_classes=2, seed=0), path)
        data = tiny_data(num_classes=2, per_class=10, seed=16)
        report = compare_transfer(path, data, fast_config(epochs=1),
                                  n_seeds=3, json_path=tmp_path / "r.json")
        assert report["n_seeds"] == 3
        assert len(report["runs"]) == 3
        for run in report["runs"]:
            for arm in ("scratch", "finetuned"):
                assert set(run[arm]) == {"best_val_accuracy",
                                         "final_val_accuracy",
                                         "epochs_to_threshold", "epochs"}
            assert run["scratch"]["epochs"] == 1
        on_disk = json.loads((tmp_path / "r.json").read_text())
        assert on_disk["wins"] == report["wins"]

    def test_degenerate_control_arms_identical(self, tmp_path):
        """An untrained seed-matched checkpoint makes both arms start from
        bit-identical parameters, so their metrics must coincide."""
        seed = 7
        config = tiny_config(num_classes=3)
        path = tmp_path / "control.ckpt"
        save_checkpoint(build_mednet(config, seed=seed), path)
        data = tiny_data(num_classes=3, per_class=10, seed=17)
        fixed_split = tuple(split(data, [0.8, 0.2], seed=1))
        report = compare_transfer(path, fixed_split,
                                  fast_config(epochs=2, batch_size=4),
                                  n_seeds=3, seeds=(seed, seed, seed))
        for run in report["runs"]:
            assert run["scratch"] == run["finetuned"]
            assert run["finetuned_in_half_epochs"] is False

    def test_epochs_to_threshold_helper(self):
        class R:
            def __init__(self, acc):
                self.val_accuracy = acc

        records = [R(0.2), R(0.5), R(0.5), R(0.9)]
        assert epochs_to_threshold(records, 0.5) == 2
        assert epochs_to_threshold(records, 0.9) == 4
        assert epochs_to_threshold(records, 0.95) is None
