import numpy as np
import numpy.testing as npt
import pytest

from mednet.graph import (
    BlockSpec,
    ConfigError,
    ConnectionSpec,
    MedNetConfig,
    ModelGraph,
    StemSpec,
    build_mednet,
    build_stem_only,
    canonical_config,
    canonical_connections,
    canonical_small_config,
    count_conv_layers,
    format_summary,
    slim_config,
    summary,
    tiny_config,
)
from mednet.layers import Conv2d, softmax_cross_entropy
from mednet.tensor import Rng, ShapeError

from oracles import finite_diff, max_rel_err


def all_projection_connections():
    return tuple(
        ConnectionSpec(c.source, c.target, "conv1x1") for c in canonical_connections()
    )


class TestConfig:
    def test_canonical_passes_validation(self):
        canonical_config().validate()
        canonical_small_config().validate()
        tiny_config().validate()
        slim_config().validate()

    def test_one_by_one_stem_rejected(self):
        cfg = MedNetConfig(stem=(StemSpec(1, 32), StemSpec(5, 64)))
        with pytest.raises(ConfigError, match="stem"):
            cfg.validate()
        with pytest.raises(ConfigError):
            build_mednet(cfg)

    def test_wrong_block_count_rejected(self):
        cfg = MedNetConfig(blocks=tuple(BlockSpec(16, 1) for _ in range(7)))
        with pytest.raises(ConfigError, match="8 blocks"):
            cfg.validate()

    def test_wrong_kernel_vocabulary_rejected(self):
        cfg = MedNetConfig(branch_kernels=(1, 3, 5, 9))
        with pytest.raises(ConfigError, match="kernels"):
            cfg.validate()

    def test_connection_count_enforced(self):
        cfg = MedNetConfig(connections=canonical_connections()[:11])
        with pytest.raises(ConfigError, match="12 connections"):
            cfg.validate()

    def test_conv_count_arithmetic_enforced(self):
        cfg = MedNetConfig(connections=all_projection_connections())
        with pytest.raises(ConfigError, match="44"):
            cfg.validate()

    def test_small_input_sizes(self):
        with pytest.raises(ConfigError):
            MedNetConfig(input_h=15, input_w=64).validate()
        with pytest.raises(ConfigError):
            MedNetConfig(input_h=64, input_w=40).validate()
        MedNetConfig(input_h=16, input_w=16).validate()

    def test_channels_restricted(self):
        with pytest.raises(ConfigError):
            MedNetConfig(input_channels=2).validate()

    def test_round_trip_through_dict(self):
        cfg = slim_config(input_channels=3, num_classes=5)
        assert MedNetConfig.from_dict(cfg.to_dict()) == cfg


class TestBuilder:
    def test_canonical_counts_44_convs(self):
        g = build_mednet(canonical_config(), seed=0)
        assert count_conv_layers(g) == 44

    def test_eight_blocks_with_kernel_vocabulary(self):
        g = build_mednet(canonical_config(), seed=0)
        for k in range(1, 9):
            kernels = set()
            for node in g.nodes:
                prefix = f"block_{k}.branch"
                if node.name.startswith(prefix) and node.name.endswith(".conv"):
                    layer = node.layer
                    assert layer.kernel_h == layer.kernel_w
                    kernels.add(layer.kernel_h)
            assert kernels == {1, 3, 5, 7}

    def test_twelve_connections_as_add_nodes(self):
        g = build_mednet(canonical_config(), seed=0)
        adds = [n.name for n in g.nodes if n.name.split(".")[-1].startswith("add_")]
        assert len(adds) == 12
        assert sum(1 for a in adds if a.endswith("add_short")) == 8
        assert sum(1 for a in adds if a.endswith("add_long")) == 4

    def test_ten_projection_convs_two_identities(self):
        g = build_mednet(canonical_config(), seed=0)
        projs = [n.name for n in g.nodes
                 if "_proj.conv" in n.name and isinstance(n.layer, Conv2d)]
        assert len(projs) == 10
        assert not any(p.startswith(("block_1.", "block_2.short")) for p in projs)

    def test_switched_identity_skips_count_46(self):
        # negative control for the conv-count law
        cfg = MedNetConfig(connections=all_projection_connections())
        with pytest.raises(ConfigError):
            build_mednet(cfg)
        g = build_mednet(cfg, enforce_conv_count=False)
        assert count_conv_layers(g) == 46

    def test_stem_only_counts_two(self):
        g = build_stem_only(canonical_config(), seed=0)
        assert count_conv_layers(g) == 2
        x = Rng(0).normal(size=(1, 64, 64, 1)).astype(np.float32)
        y, _ = g.forward(x)
        assert y.shape == (1, 16, 16, 64)

    def test_identity_connection_shape_mismatch_rejected(self):
        # forcing identity where a projection is required must fail at build;
        # block_1's skip flips to conv1x1 so 10 projections remain and the
        # count check is not what trips
        conns = list(canonical_connections())
        assert conns[0].target == "block_1" and conns[2].target == "block_3"
        conns[0] = ConnectionSpec("stem", "block_1", "conv1x1")
        conns[2] = ConnectionSpec("block_2", "block_3", "identity")
        cfg = MedNetConfig(connections=tuple(conns))
        cfg.validate()
        with pytest.raises(ConfigError, match="matching shapes"):
            build_mednet(cfg)

    def test_same_seed_same_init(self):
        a = build_mednet(slim_config(), seed=11)
        b = build_mednet(slim_config(), seed=11)
        for name, value in a.named_params().items():
            npt.assert_array_equal(value, b.named_params()[name])

    def test_different_seed_different_init(self):
        a = build_mednet(tiny_config(), seed=1)
        b = build_mednet(tiny_config(), seed=2)
        assert any(
            not np.array_equal(v, b.named_params()[k])
            for k, v in a.named_params().items() if k.endswith(".kernel")
        )


class TestSummary:
    def test_stem_output_shape(self):
        g = build_mednet(canonical_config(), seed=0)
        rows, _ = summary(g)
        shapes = {name: shape for name, shape, _ in rows}
        assert shapes["stem.relu2"] == (1, 16, 16, 64)

    def test_block8_and_gap_shapes(self):
        # stem /4 then stride-2 blocks 3, 5, 7: 64 -> 16 -> 8 -> 4 -> 2
        g = build_mednet(canonical_config(), seed=0)
        rows, _ = summary(g)
        shapes = {name: shape for name, shape, _ in rows}
        assert shapes[g.stage_out["block_8"]] == (1, 2, 2, 256)
        assert shapes["head.gap"] == (1, 256)

    def test_total_equals_sum_over_table(self):
        g = build_mednet(canonical_config(), seed=0)
        rows, total = summary(g)
        assert total == sum(count for _, _, count in rows)
        assert total == g.trainable_param_count()

    def test_formatted_table_ends_with_conv_count(self):
        text = format_summary(build_mednet(canonical_config(), seed=0))
        assert text.splitlines()[-1] == "conv layers: 44"

    def test_deterministic(self):
        g = build_mednet(slim_config(), seed=0)
        assert format_summary(g) == format_summary(g)


class TestForward:
    def test_zero_weight_model_uniform_softmax(self):
        g = build_mednet(tiny_config(num_classes=3), seed=0)
        for name, value in g.named_params().items():
            if not name.endswith(("running_mean", "running_var")):
                g.set_param(name, np.zeros_like(value))
        x = Rng(1).normal(size=(2, 16, 16, 1)).astype(np.float32)
        g.set_mode("eval")
        _, probs = g.forward(x)
        npt.assert_allclose(probs, np.full((2, 3), 1.0 / 3.0), atol=1e-7)

    def test_eval_forward_bit_deterministic(self):
        g = build_mednet(tiny_config(), seed=3)
        g.set_mode("eval")
        x = Rng(4).normal(size=(2, 16, 16, 1)).astype(np.float32)
        la, pa = g.forward(x)
        lb, pb = g.forward(x)
        npt.assert_array_equal(la, lb)
        npt.assert_array_equal(pa, pb)

    def test_eval_forward_mutates_nothing(self):
        g = build_mednet(tiny_config(), seed=5)
        g.set_mode("eval")
        before = {k: v.copy() for k, v in g.named_params().items()}
        g.forward(Rng(6).normal(size=(2, 16, 16, 1)).astype(np.float32))
        for name, value in g.named_params().items():
            npt.assert_array_equal(value, before[name])

    def test_train_rate0_equals_eval_with_synced_stats(self):
        # momentum 0 makes running stats equal the last batch statistics,
        # so a second train pass and an eval pass see identical normalization
        g = build_mednet(tiny_config(), seed=7, dtype=np.float64)
        for node in g.nodes:
            if hasattr(node.layer, "momentum"):
                node.layer.momentum = 0.0
        x = Rng(8).normal(size=(4, 16, 16, 1))
        g.set_mode("train")
        g.forward(x, rng=Rng(9))
        train_logits, _ = g.forward(x, rng=Rng(10))
        g.set_mode("eval")
        eval_logits, _ = g.forward(x)
        npt.assert_allclose(train_logits, eval_logits, rtol=1e-9, atol=1e-9)

    def test_wrong_input_shape_rejected(self):
        g = build_mednet(tiny_config(), seed=0)
        with pytest.raises(ShapeError):
            g.forward(np.zeros((1, 32, 32, 1), np.float32))
        with pytest.raises(ShapeError):
            g.forward(np.zeros((1, 16, 16, 3), np.float32))

    def test_nonfinite_activation_names_node(self):
        from mednet.tensor import NonFiniteError

        g = build_mednet(tiny_config(), seed=0)
        g.set_mode("eval")
        g.node("stem.conv1").layer.params["kernel"][:] = 1e38
        x = np.abs(Rng(0).normal(size=(2, 16, 16, 1))).astype(np.float32) + 10.0
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFiniteError, match="stem.conv1"):
                g.forward(x)


class TestBackward:
    def test_zero_loss_grad_zero_param_grads(self):
        g = build_mednet(tiny_config(), seed=1)
        x = Rng(2).normal(size=(2, 16, 16, 1)).astype(np.float32)
        g.set_mode("train")
        logits, _ = g.forward(x, rng=Rng(3))
        g.backward(np.zeros_like(logits))
        for name, grad in g.named_grads().items():
            npt.assert_array_equal(grad, np.zeros_like(grad), err_msg=name)

    def test_end_to_end_param_gradients_match_finite_differences(self):
        # ten randomly chosen scalar parameters, float64, tiny 16x16 net
        g = build_mednet(tiny_config(num_classes=3), seed=42, dtype=np.float64)
        rng = Rng(43)
        x = rng.child(0).normal(size=(2, 16, 16, 1))
        labels = np.array([0, 2])

        def run_loss():
            g.set_mode("train")
            logits, _ = g.forward(x)
            return softmax_cross_entropy(logits, labels)

        loss, _, grad_logits = run_loss()
        g.backward(grad_logits)
        grads = {k: v.copy() for k, v in g.named_grads().items()}

        params = g.named_params()
        names = [n for n in g.trainable_names()]
        pick = rng.child(1)
        h = 1e-5
        for trial in range(10):
            name = names[int(pick.integers(0, len(names)))]
            arr = params[name]
            flat_index = int(pick.integers(0, arr.size))
            orig = arr.flat[flat_index]
            arr.flat[flat_index] = orig + h
            loss_plus = run_loss()[0]
            arr.flat[flat_index] = orig - h
            loss_minus = run_loss()[0]
            arr.flat[flat_index] = orig
            numeric = (loss_plus - loss_minus) / (2 * h)
            analytic = grads[name].flat[flat_index]
            err = max_rel_err(np.array([analytic]), np.array([numeric]))
            assert err < 1e-3, f"{name}[{flat_index}]: {analytic} vs {numeric}"

    def test_detached_branch_gets_zero_grad_others_unchanged(self):
        # zeroing one branch's path gradient isolates that branch
        def grads_with_branch_detached(detach):
            g = build_mednet(tiny_config(), seed=9, dtype=np.float64)
            if detach is not None:
                bn = g.node(f"block_3.branch{detach}x{detach}.bn").layer
                original = bn.backward
                bn.backward = lambda grad_out: np.zeros_like(original(grad_out))
            x = Rng(10).normal(size=(2, 16, 16, 1))
            g.set_mode("train")
            logits, _ = g.forward(x)
            _, _, grad = softmax_cross_entropy(logits, np.array([0, 1]))
            g.backward(grad)
            return {
                k: np.array(v.layer.grads["kernel"])
                for k, v in ((n.name, n) for n in g.nodes)
                if k.startswith("block_3.branch") and k.endswith(".conv")
            }

        full = grads_with_branch_detached(None)
        cut = grads_with_branch_detached(5)
        name = "block_3.branch5x5.conv"
        npt.assert_array_equal(cut[name], np.zeros_like(cut[name]))
        assert np.abs(full[name]).sum() > 0
        for other, grad in full.items():
            if other != name:
                npt.assert_array_equal(cut[other], grad)
