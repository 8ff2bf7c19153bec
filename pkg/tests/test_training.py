"""Network assembly, forward/backward through the classifier head, the
optimizers, the training loop with constraint enforcement, evaluation
metrics, and the binary model format."""

import numpy as np
import pytest

from expconv.augment import AugmentSpec
from expconv.constraints import ConstraintPolicy, effective_payload, payload_arrays
from expconv.dataset import WindowedDataset, gen_synthetic
from expconv.layers import LayerParams, Standard
from expconv.numerics import make_rng
from expconv.training import (
    Network,
    TrainConfig,
    _forward_trace,
    _param_grad_pairs,
    _Sgd,
    build_network,
    cross_entropy,
    evaluate,
    forward_network,
    load_model,
    network_loss_grads,
    network_param_arrays,
    predict,
    save_model,
    train,
    write_history_csv,
)

NONLINEAR_VARIANTS = ("elementwise", "row_shared", "col_shared",
                      "bilinear", "full_matrix")


def tiny_net(variant="elementwise", seed=0, input_shape=(4, 3), n_classes=2,
             policy=None, activation="identity", k=(2, 2), out_channels=1):
    spec = {"variant": variant, "k_h": k[0], "k_w": k[1],
            "out_channels": out_channels, "activation": activation}
    return build_network(input_shape, n_classes, [spec], policy=policy,
                         seed=seed)


def labeled_windows(seed, n=12, shape=(4, 3), n_classes=2):
    rng = make_rng(seed)
    windows = rng.uniform(0.3, 2.0, size=(n,) + shape) \
        * np.where(rng.uniform(size=(n,) + shape) < 0.5, -1.0, 1.0)
    labels = rng.integers(0, n_classes, size=n)
    return WindowedDataset(windows, labels, win_len=shape[0], stride=shape[0])


def params_bytes(net):
    return b"".join(a.tobytes() for a in network_param_arrays(net))


class TestNetworkConstruction:
    def test_intermediate_layers_must_be_single_channel(self):
        specs = [{"variant": "standard", "k_h": 2, "k_w": 2,
                  "out_channels": 3},
                 {"variant": "standard", "k_h": 1, "k_w": 1}]
        with pytest.raises(ValueError, match="one channel"):
            build_network((4, 3), 2, specs)

    def test_multi_channel_last_layer_allowed(self):
        net = tiny_net(out_channels=3)
        assert net.layers[-1].out_channels == 3
        assert net.n_features == 3 * 2 * 3  # (rows, cols, channels)

    def test_head_shape_checked(self):
        net = tiny_net()
        with pytest.raises(ValueError, match="classifier"):
            Network(net.layers, np.zeros((5, 2)), np.zeros(2),
                    policies=net.policies, input_shape=(4, 3), n_classes=2)

    def test_one_policy_per_layer(self):
        net = tiny_net()
        with pytest.raises(ValueError, match="policy"):
            Network(net.layers, net.head_w, net.head_b, policies=[],
                    input_shape=(4, 3), n_classes=2)

    @pytest.mark.parametrize("variant", NONLINEAR_VARIANTS)
    def test_variants_share_initialization_with_standard(self, variant):
        base = tiny_net("standard", seed=11)
        other = tiny_net(variant, seed=11)
        np.testing.assert_array_equal(base.layers[0].weights,
                                      other.layers[0].weights)
        np.testing.assert_array_equal(base.head_w, other.head_w)

    def test_glorot_bounds(self):
        net = tiny_net(seed=3)
        limit = np.sqrt(6.0 / (2 * 2 + 1))
        assert np.max(np.abs(net.layers[0].weights)) <= limit


class TestForward:
    def test_hand_computed_logits(self):
        # one whole-input standard unit: value = sum(W1 * x) + b = 16.5,
        # so logits are [16.5 * 0.1 + 0.2, 16.5 * -0.05 - 0.1]
        layer = LayerParams(np.array([[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]]),
                            np.array([0.5]), [Standard()],
                            activation="identity")
        net = Network([layer], np.array([[0.1, -0.05]]),
                      np.array([0.2, -0.1]), policies=[ConstraintPolicy()],
                      input_shape=(3, 2), n_classes=2)
        x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        _, _, _, logits = _forward_trace(net, x[None])
        np.testing.assert_allclose(logits[0], [1.85, -0.925], atol=1e-12)
        probs = forward_network(net, x)
        want = np.exp([1.85, -0.925])
        np.testing.assert_allclose(probs, want / want.sum(), atol=1e-12)

    def test_zero_weight_classifier_is_uniform(self):
        net = tiny_net(n_classes=4)
        net.head_w[:] = 0.0
        net.head_b[:] = 0.0
        probs = forward_network(net, labeled_windows(0).windows[0])
        np.testing.assert_allclose(probs, 0.25, atol=1e-15)

    def test_probabilities_sum_to_one(self):
        net = tiny_net(seed=5, activation="tanh")
        probs = forward_network(net, labeled_windows(1, n=20).windows)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="does not match"):
            forward_network(tiny_net(), np.zeros((5, 5)))

    @pytest.mark.parametrize("variant", NONLINEAR_VARIANTS)
    def test_reduction_at_init_logits(self, variant):
        base = tiny_net("standard", seed=7, activation="tanh")
        other = tiny_net(variant, seed=7, activation="tanh")
        x = labeled_windows(2, n=6).windows
        _, _, _, logits_a = _forward_trace(base, x)
        _, _, _, logits_b = _forward_trace(other, x)
        assert np.max(np.abs(logits_a - logits_b)) <= 1e-10


class TestCrossEntropy:
    def test_symmetric_two_class(self):
        assert cross_entropy(np.array([[0.0, 0.0]]), np.array([0])) \
            == pytest.approx(np.log(2.0), abs=1e-15)

    def test_extreme_logits_stay_finite(self):
        logits = np.array([[1000.0, 0.0]])
        assert cross_entropy(logits, np.array([0])) == pytest.approx(0.0)
        assert cross_entropy(logits, np.array([1])) == pytest.approx(1000.0)


class TestNetworkGradients:
    def _fd_check(self, net, windows, labels, tol):
        loss0, grads = network_loss_grads(net, windows, labels)
        analytic = [g.copy() for _, g in _param_grad_pairs(net, grads)]
        params = [p for p, _ in _param_grad_pairs(net, grads)]
        h = 1e-6
        worst = 0.0
        for arr, an in zip(params, analytic):
            flat = arr.reshape(-1)
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + h
                up, _ = network_loss_grads(net, windows, labels)
                flat[j] = keep - h
                dn, _ = network_loss_grads(net, windows, labels)
                flat[j] = keep
                fd = (up - dn) / (2 * h)
                denom = max(abs(fd), abs(an.reshape(-1)[j]), 1e-6)
                worst = max(worst, abs(fd - an.reshape(-1)[j]) / denom)
        assert worst <= tol

    def test_full_gradient_matches_finite_differences(self):
        net = tiny_net("elementwise", seed=13)
        ds = labeled_windows(3, n=3)
        self._fd_check(net, ds.windows, ds.labels, tol=2e-6)

    def test_reparam_gradient_chains_through_map(self):
        pol = ConstraintPolicy(mode="reparam", kind="sigmoid")
        net = tiny_net("row_shared", seed=14, policy=pol)
        ds = labeled_windows(4, n=3)
        self._fd_check(net, ds.windows, ds.labels, tol=2e-6)

    def test_single_sgd_step_decreases_loss(self):
        for seed in range(20):
            net = tiny_net("elementwise", seed=seed, activation="tanh")
            ds = labeled_windows(100 + seed, n=1)
            loss0, grads = network_loss_grads(net, ds.windows, ds.labels)
            _Sgd(1e-4).step(_param_grad_pairs(net, grads))
            loss1, _ = network_loss_grads(net, ds.windows, ds.labels)
            assert loss1 < loss0


class TestTrainLoop:
    def test_zero_epochs_is_a_no_op(self):
        net = tiny_net(seed=20)
        before = params_bytes(net)
        _, history = train(net, labeled_windows(5),
                           TrainConfig(epochs=0))
        assert history == []
        assert params_bytes(net) == before

    def test_loss_trend_decreases_on_learnable_task(self):
        task = gen_synthetic(win_len=6, channels=3, exponent=2.0,
                             noise=0.05, count=80, seed=40)
        ds = task.as_windowed()
        net = build_network((6, 3), 2,
                            [{"variant": "elementwise", "k_h": 2, "k_w": 2,
                              "activation": "tanh"}], seed=41)
        _, history = train(net, ds, TrainConfig(epochs=14, batch_size=16,
                                                learning_rate=1e-2, seed=42,
                                                eval_every=14))
        losses = [rec["loss"] for rec in history]
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_clip_projection_bounds_exponents_after_training(self):
        net = tiny_net("elementwise", seed=22)
        config = TrainConfig(epochs=3, batch_size=4, learning_rate=0.5,
                             optimizer="sgd", seed=23, eval_every=3)
        train(net, labeled_windows(6, n=16), config)
        for layer, policy in zip(net.layers, net.policies):
            for ewm in layer.ewms:
                for arr in payload_arrays(effective_payload(ewm, policy)):
                    assert arr.max() <= policy.v_max
                    assert arr.min() >= policy.v_min

    def test_reparam_training_never_leaves_bounds(self):
        pol = ConstraintPolicy(mode="reparam", kind="tanh")
        net = tiny_net("elementwise", seed=24, policy=pol)
        config = TrainConfig(epochs=3, batch_size=4, learning_rate=0.5,
                             optimizer="sgd", seed=25, eval_every=3)
        train(net, labeled_windows(7, n=16), config)
        for ewm in net.layers[0].ewms:
            for arr in payload_arrays(effective_payload(ewm, pol)):
                assert arr.max() <= pol.v_max and arr.min() >= pol.v_min

    def test_deterministic_across_runs(self):
        augments = (AugmentSpec("flip_lr", probability=0.5),
                    AugmentSpec("exp_augment", probability=0.5,
                                lo=0.8, hi=1.2))
        config = TrainConfig(epochs=4, batch_size=8, seed=31,
                             augments=augments, eval_every=2)
        results = []
        for _ in range(2):
            net = tiny_net(seed=30, activation="tanh")
            _, history = train(net, labeled_windows(8, n=24), config)
            results.append((params_bytes(net), history))
        assert results[0][0] == results[1][0]
        assert results[0][1] == results[1][1]

    def test_policy_mismatch_rejected(self):
        net = tiny_net(seed=32)  # built under the default clip policy
        config = TrainConfig(
            epochs=1, policy=ConstraintPolicy(mode="reparam"))
        with pytest.raises(ValueError, match="policy"):
            train(net, labeled_windows(9), config)

    def test_matching_policy_accepted(self):
        pol = ConstraintPolicy(mode="reparam", kind="sigmoid")
        net = tiny_net(seed=33, policy=pol)
        _, history = train(net, labeled_windows(10),
                           TrainConfig(epochs=1, policy=pol))
        assert len(history) == 1

    def test_non_finite_loss_reported_with_location(self):
        net = tiny_net(seed=34)
        net.head_w[:] = np.array([[1e308, -1e308]] * net.n_features)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(FloatingPointError, match="epoch 0"):
                train(net, labeled_windows(11), TrainConfig(epochs=1))

    def test_empty_dataset_rejected(self):
        empty = WindowedDataset(np.zeros((0, 4, 3)), np.zeros(0),
                                win_len=4, stride=4)
        with pytest.raises(ValueError):
            train(tiny_net(), empty, TrainConfig(epochs=1))

    def test_history_evaluation_cadence(self):
        net = tiny_net(seed=35)
        _, history = train(net, labeled_windows(12),
                           TrainConfig(epochs=3, eval_every=2))
        assert "accuracy" not in history[0]
        assert "accuracy" in history[1]  # epoch 1: (1+1) % 2 == 0
        assert "accuracy" in history[2]  # final epoch always evaluated


class TestTrainConfigValidation:
    def test_negative_epochs(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=-1)

    def test_unknown_optimizer(self):
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")

    def test_beta_range(self):
        with pytest.raises(ValueError):
            TrainConfig(beta1=1.0)

    def test_augment_type_checked(self):
        with pytest.raises(TypeError):
            TrainConfig(augments=({"op": "flip_lr"},))


class TestEvaluate:
    @staticmethod
    def sign_net():
        # 1x1 standard unit with weight 1 feeding head [-1, +1]: argmax is
        # class 1 exactly when the (single) input value is positive
        layer = LayerParams(np.ones((1, 1, 1)), np.zeros(1), [Standard()],
                            activation="identity")
        return Network([layer], np.array([[-1.0, 1.0]]), np.zeros(2),
                       policies=[ConstraintPolicy()], input_shape=(1, 1),
                       n_classes=2)

    @staticmethod
    def sign_dataset(n=20, seed=50, flip_labels=False):
        rng = make_rng(seed)
        values = rng.uniform(0.5, 2.0, size=n) * np.where(
            np.arange(n) % 2 == 0, 1.0, -1.0)
        labels = (values > 0).astype(np.int64)
        if flip_labels:
            labels = 1 - labels
        return WindowedDataset(values[:, None, None], labels,
                               win_len=1, stride=1)

    def test_perfect_predictor(self):
        m = evaluate(self.sign_net(), self.sign_dataset())
        assert m.accuracy == 1.0
        assert m.false_alarm == 0.0
        np.testing.assert_array_equal(m.detection, [1.0, 1.0])

    def test_always_wrong_predictor(self):
        m = evaluate(self.sign_net(), self.sign_dataset(flip_labels=True))
        assert m.accuracy == 0.0
        assert m.false_alarm == 1.0

    def test_constant_predictor_on_balanced_set(self):
        net = self.sign_net()
        net.head_w[:] = 0.0
        net.head_b[:] = [0.0, 1.0]  # always predicts class 1
        m = evaluate(net, self.sign_dataset(n=20))
        assert m.accuracy == 0.5
        assert m.false_alarm == 1.0
        np.testing.assert_array_equal(m.detection, [0.0, 1.0])

    def test_confusion_totals(self):
        ds = self.sign_dataset(n=17)
        m = evaluate(self.sign_net(), ds)
        assert int(m.confusion.sum()) == 17
        for k in range(2):
            assert int(m.confusion[k].sum()) == int(np.sum(ds.labels == k))

    def test_detection_zero_for_absent_class(self):
        ds = self.sign_dataset(n=10)
        only_normal = WindowedDataset(ds.windows[ds.labels == 0],
                                      ds.labels[ds.labels == 0],
                                      win_len=1, stride=1)
        m = evaluate(self.sign_net(), only_normal)
        assert m.detection[1] == 0.0
        assert m.false_alarm == 0.0

    def test_empty_dataset_rejected(self):
        empty = WindowedDataset(np.zeros((0, 1, 1)), np.zeros(0),
                                win_len=1, stride=1)
        with pytest.raises(ValueError):
            evaluate(self.sign_net(), empty)

    def test_predict_chunks_large_batches(self):
        ds = self.sign_dataset(n=600)
        preds = predict(self.sign_net(), ds.windows)
        np.testing.assert_array_equal(preds, ds.labels)


class TestHistoryCsv:
    def test_layout_and_blanks(self, tmp_path):
        net = tiny_net(seed=36)
        _, history = train(net, labeled_windows(13),
                           TrainConfig(epochs=3, eval_every=2))
        path = tmp_path / "metrics.csv"
        write_history_csv(history, path, n_classes=2)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,loss,accuracy,false_alarm,det_0,det_1"
        assert len(lines) == 4
        first = lines[1].split(",")
        assert first[0] == "0" and first[2] == "" and first[3] == ""
        last = lines[3].split(",")
        assert last[0] == "2" and last[2] != ""
        # loss values survive a text round trip exactly
        assert float(first[1]) == history[0]["loss"]


class TestModelFormat:
    @pytest.mark.parametrize("variant", ["standard", "elementwise",
                                         "bilinear"])
    def test_round_trip_exact(self, tmp_path, variant):
        pol = ConstraintPolicy(mode="reparam", kind="tanh") \
            if variant == "elementwise" else None
        net = tiny_net(variant, seed=60, policy=pol, out_channels=2,
                       activation="tanh")
        path = tmp_path / "model.bin"
        save_model(net, path)
        back = load_model(path)
        for a, b in zip(network_param_arrays(net),
                        network_param_arrays(back)):
            np.testing.assert_array_equal(a, b)
        assert back.input_shape == net.input_shape
        assert back.policies == net.policies
        assert back.layers[0].activation == "tanh"
        x = labeled_windows(14, n=4).windows
        np.testing.assert_array_equal(forward_network(net, x),
                                      forward_network(back, x))

    def test_resave_is_byte_identical(self, tmp_path):
        net = tiny_net("full_matrix", seed=61)
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        save_model(net, a)
        save_model(load_model(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "model.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_model(path)

    def test_bad_version_rejected(self, tmp_path):
        net = tiny_net(seed=62)
        path = tmp_path / "model.bin"
        save_model(net, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="version"):
            load_model(path)

    def test_trailing_data_rejected(self, tmp_path):
        net = tiny_net(seed=63)
        path = tmp_path / "model.bin"
        save_model(net, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ValueError, match="trailing"):
            load_model(path)

    def test_truncation_rejected(self, tmp_path):
        net = tiny_net(seed=64)
        path = tmp_path / "model.bin"
        save_model(net, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_model(path)

    def test_param_array_order(self):
        net = tiny_net("bilinear", seed=65, out_channels=2)
        arrays = network_param_arrays(net)
        # weights, biases, two mixes per channel, head weights, head bias
        assert len(arrays) == 2 + 2 * 2 + 2
        assert arrays[0].shape == (2, 2, 2)
        assert arrays[-1].shape == (2,)
