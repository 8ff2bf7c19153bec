"""Network assembly, loss, optimizers, training loop, evaluation.

A network is a chain of nonlinear convolution layers followed by a dense
softmax classifier over the flattened last feature map. Layers between
the input and the last convolution must emit a single channel so their
output is again a (time, channel) matrix.

Exponent payloads are stored in the representation their constraint
policy dictates: bounded values for clip/project (kept inside the bounds
by projection after every optimizer step), unconstrained values for
reparam (mapped through the policy's monotone function on the forward
pass). The training gradient for a reparameterized exponent is chained
through the unclamped map derivative, so a hard-sigmoid exponent parked
beyond the linear core still receives a small pull back.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .augment import AugmentSpec, apply_pipeline
from .constraints import (
    ConstraintPolicy,
    clip_params_inplace,
    effective_payload,
    init_exponents,
    payload_arrays,
    reparam_grad,
)
from .dataset import WindowedDataset
from .gradients import layer_backward
from .layers import LayerParams, layer_forward, output_grid
from .numerics import make_rng

FORMAT_MAGIC = b"EXPC"
FORMAT_VERSION = 1

OPTIMIZERS = ("sgd", "adam")

BOUND_SLACK = 1e-9  # tolerance for the post-step bound assertion


@dataclass
class Network:
    layers: list
    head_w: np.ndarray  # (n_features, n_classes)
    head_b: np.ndarray  # (n_classes,)
    policies: list
    input_shape: tuple
    n_classes: int

    def __post_init__(self):
        self.head_w = np.asarray(self.head_w, dtype=np.float64)
        self.head_b = np.asarray(self.head_b, dtype=np.float64)
        if not self.layers:
            raise ValueError("need at least one convolution layer")
        if len(self.policies) != len(self.layers):
            raise ValueError("one constraint policy per layer required")
        rows, cols = self.input_shape
        for i, layer in enumerate(self.layers):
            rows, cols = output_grid(layer, rows, cols)
            last = i == len(self.layers) - 1
            if not last and layer.out_channels != 1:
                raise ValueError(
                    "layers before the last must emit one channel "
                    f"(layer {i} emits {layer.out_channels})")
        n_features = rows * cols * self.layers[-1].out_channels
        if self.head_w.shape != (n_features, self.n_classes):
            raise ValueError(
                f"classifier expects ({n_features}, {self.n_classes}) "
                f"weights, got {self.head_w.shape}")
        if self.head_b.shape != (self.n_classes,):
            raise ValueError("classifier bias shape mismatch")

    @property
    def n_features(self) -> int:
        return self.head_w.shape[0]


def glorot_uniform(rng: np.random.Generator, shape: tuple,
                   fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_network(input_shape: tuple, n_classes: int, layer_specs,
                  policy: ConstraintPolicy | None = None,
                  seed: int = 0) -> Network:
    """Assemble a network with fresh weights and neutral exponents.

    Each layer spec is a dict with keys variant, out_channels, k_h, k_w
    and optional stride_t, stride_c, activation. Exponent payloads are
    initialized without consuming random draws, so networks differing
    only in variant share their filter and classifier initialization.
    """
    if policy is None:
        policy = ConstraintPolicy()
    rng = make_rng(seed)
    layers = []
    rows, cols = input_shape
    for spec in layer_specs:
        k_h, k_w = int(spec["k_h"]), int(spec["k_w"])
        out_ch = int(spec.get("out_channels", 1))
        fan = k_h * k_w
        weights = glorot_uniform(rng, (out_ch, k_h, k_w), fan, out_ch)
        biases = np.zeros(out_ch)
        ewms = [init_exponents(spec["variant"], k_h, k_w, policy)
                for _ in range(out_ch)]
        layer = LayerParams(weights, biases, ewms,
                            stride_t=int(spec.get("stride_t", 1)),
                            stride_c=int(spec.get("stride_c", 1)),
                            activation=spec.get("activation", "tanh"))
        layers.append(layer)
        rows, cols = output_grid(layer, rows, cols)
    n_features = rows * cols * layers[-1].out_channels
    head_w = glorot_uniform(rng, (n_features, n_classes),
                            n_features, n_classes)
    head_b = np.zeros(n_classes)
    return Network(layers, head_w, head_b,
                   policies=[policy] * len(layers),
                   input_shape=tuple(input_shape), n_classes=n_classes)


# --------------------------------------------------------------------------
# Forward pass

def materialized_layer(layer: LayerParams,
                       policy: ConstraintPolicy) -> LayerParams:
    """The layer actually evaluated: stored payloads mapped to effective
    exponents when the policy trains a reparameterized value."""
    if policy.mode != "reparam":
        return layer
    eff = [effective_payload(e, policy) for e in layer.ewms]
    return replace(layer, ewms=eff)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expz = np.exp(shifted)
    return expz / expz.sum(axis=-1, keepdims=True)


def _forward_trace(net: Network, x: np.ndarray):
    """Run the conv stack, keeping per-layer inputs and raw outputs."""
    inputs = []
    outputs = []
    cur = np.asarray(x, dtype=np.float64)
    for layer, policy in zip(net.layers, net.policies):
        inputs.append(cur)
        out = layer_forward(cur, materialized_layer(layer, policy))
        outputs.append(out)
        cur = out[..., 0]  # single channel between layers
    feats = outputs[-1].reshape(x.shape[0], -1)
    logits = feats @ net.head_w + net.head_b
    return inputs, outputs, feats, logits


def forward_network(net: Network, windows: np.ndarray) -> np.ndarray:
    """Class probabilities for a batch of windows (n, T, C) or one (T, C)."""
    windows = np.asarray(windows, dtype=np.float64)
    single = windows.ndim == 2
    if single:
        windows = windows[None]
    if windows.shape[1:] != tuple(net.input_shape):
        raise ValueError(
            f"window shape {windows.shape[1:]} does not match "
            f"declared input {tuple(net.input_shape)}")
    _, _, _, logits = _forward_trace(net, windows)
    probs = softmax(logits)
    return probs[0] if single else probs


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood, computed through log-sum-exp."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(len(labels)), labels]
    return float(np.mean(lse - picked))


@dataclass
class NetGrads:
    layers: list  # GradBundle per layer, payload grads w.r.t. stored values
    d_head_w: np.ndarray
    d_head_b: np.ndarray


def _chain_payload_grads(layer: LayerParams, policy: ConstraintPolicy,
                         bundles_d_ewms: list) -> list:
    """Convert effective-exponent gradients to stored-value gradients."""
    if policy.mode != "reparam":
        return bundles_d_ewms
    chained = []
    for raw, d_eff in zip(layer.ewms, bundles_d_ewms):
        if d_eff is None:
            chained.append(None)
            continue
        for g_arr, r_arr in zip(payload_arrays(d_eff), payload_arrays(raw)):
            g_arr *= reparam_grad(r_arr, policy)
        chained.append(d_eff)
    return chained


def network_loss_grads(net: Network, windows: np.ndarray,
                       labels: np.ndarray):
    """Mean cross-entropy over the batch and gradients for every tensor."""
    windows = np.asarray(windows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = windows.shape[0]
    inputs, outputs, feats, logits = _forward_trace(net, windows)
    loss = cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")

    probs = softmax(logits)
    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    d_head_w = feats.T @ d_logits
    d_head_b = d_logits.sum(axis=0)
    upstream = (d_logits @ net.head_w.T).reshape(outputs[-1].shape)

    layer_grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer, policy = net.layers[i], net.policies[i]
        bundle = layer_backward(inputs[i], materialized_layer(layer, policy),
                                upstream)
        bundle.d_ewms = _chain_payload_grads(layer, policy, bundle.d_ewms)
        layer_grads[i] = bundle
        if i > 0:
            upstream = bundle.d_input[..., None]
    return loss, NetGrads(layer_grads, d_head_w, d_head_b)


# --------------------------------------------------------------------------
# Optimizers

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augments: tuple = ()
    policy: ConstraintPolicy | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, eval_every >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        for spec in self.augments:
            if not isinstance(spec, AugmentSpec):
                raise TypeError("augments must be AugmentSpec instances")


def _param_grad_pairs(net: Network, grads: NetGrads):
    """Stored tensors paired with their gradients, in a fixed order."""
    pairs = []
    for layer, bundle in zip(net.layers, grads.layers):
        pairs.append((layer.weights, bundle.d_weights))
        pairs.append((layer.biases, bundle.d_biases))
        for ewm, d_ewm in zip(layer.ewms, bundle.d_ewms):
            if d_ewm is None:
                continue
            for p_arr, g_arr in zip(payload_arrays(ewm),
                                    payload_arrays(d_ewm)):
                pairs.append((p_arr, g_arr))
    pairs.append((net.head_w, grads.d_head_w))
    pairs.append((net.head_b, grads.d_head_b))
    return pairs


def network_param_arrays(net: Network) -> list:
    arrays = []
    for layer in net.layers:
        arrays.append(layer.weights)
        arrays.append(layer.biases)
        for ewm in layer.ewms:
            arrays.extend(payload_arrays(ewm))
    arrays.append(net.head_w)
    arrays.append(net.head_b)
    return arrays


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, pairs):
        for param, grad in pairs:
            param -= self.lr * grad


class _Adam:
    def __init__(self, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, pairs):
        if self.m is None:
            self.m = [np.zeros_like(p) for p, _ in pairs]
            self.v = [np.zeros_like(p) for p, _ in pairs]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for (param, grad), m, v in zip(pairs, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            param -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return _Sgd(config.learning_rate)
    return _Adam(config.learning_rate, config.beta1, config.beta2,
                 config.adam_eps)


def enforce_constraints(net: Network) -> None:
    """Project stored exponents back into bounds, then assert that every
    effective exponent respects them (a cheap internal postcondition)."""
    for layer, policy in zip(net.layers, net.policies):
        if policy.mode in ("clip", "project"):
            for ewm in layer.ewms:
                clip_params_inplace(ewm, policy)
        for ewm in layer.ewms:
            for arr in payload_arrays(effective_payload(ewm, policy)):
                lo, hi = arr.min(), arr.max()
                if lo < policy.v_min - BOUND_SLACK or hi > policy.v_max + BOUND_SLACK:
                    raise RuntimeError(
                        f"effective exponent escaped [{policy.v_min}, "
                        f"{policy.v_max}]: range [{lo}, {hi}]")


# --------------------------------------------------------------------------
# Metrics

@dataclass
class Metrics:
    confusion: np.ndarray  # (n_classes, n_classes), rows = true labels
    accuracy: float
    detection: np.ndarray  # per-class recall; 0 for absent classes
    false_alarm: float     # normal windows predicted faulty

    @property
    def n_classes(self) -> int:
        return self.confusion.shape[0]


EVAL_CHUNK = 256


def predict(net: Network, windows: np.ndarray) -> np.ndarray:
    out = []
    for start in range(0, len(windows), EVAL_CHUNK):
        probs = forward_network(net, windows[start:start + EVAL_CHUNK])
        out.append(np.argmax(probs, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(net: Network, dataset: WindowedDataset) -> Metrics:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(net, dataset.windows)
    true = dataset.labels
    k = net.n_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (true, preds), 1)
    accuracy = float(np.trace(confusion) / len(dataset))
    row_sums = confusion.sum(axis=1)
    detection = np.where(row_sums > 0,
                         np.diag(confusion) / np.maximum(row_sums, 1), 0.0)
    normal = row_sums[0]
    false_alarm = float((normal - confusion[0, 0]) / normal) if normal else 0.0
    return Metrics(confusion, accuracy, detection, false_alarm)


# --------------------------------------------------------------------------
# Training loop

def train(net: Network, dataset: WindowedDataset, config: TrainConfig,
          eval_dataset: WindowedDataset | None = None):
    """Minibatch cross-entropy training with constraint enforcement.

    Returns the trained network and a per-epoch history list of dicts
    (epoch, loss, and evaluation fields on eval_every epochs). Shuffling
    and augmentation draw from streams spawned off config.seed, so a
    fixed config reproduces the run exactly.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if config.policy is not None:
        for pol in net.policies:
            if pol != config.policy:
                raise ValueError(
                    "config constraint policy differs from the network's; "
                    "build the network with the policy you train under")
    history = []
    if config.epochs == 0:
        return net, history
    shuffle_rng, aug_rng = make_rng(config.seed).spawn(2)
    optimizer = make_optimizer(config)
    eval_set = eval_dataset if eval_dataset is not None else dataset
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(dataset))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = dataset.windows[idx]
            yb = dataset.labels[idx]
            if config.augments:
                xb = np.stack([apply_pipeline(w, config.augments, aug_rng)
                               for w in xb])
            try:
                loss, grads = network_loss_grads(net, xb, yb)
            except FloatingPointError as exc:
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, "
                    f"batch {start // config.batch_size}") from exc
            optimizer.step(_param_grad_pairs(net, grads))
            enforce_constraints(net)
            batch_losses.append(loss)
        record = {"epoch": epoch, "loss": float(np.mean(batch_losses))}
        last = epoch == config.epochs - 1
        if (epoch + 1) % config.eval_every == 0 or last:
            m = evaluate(net, eval_set)
            record["accuracy"] = m.accuracy
            record["false_alarm"] = m.false_alarm
            record["detection"] = m.detection.tolist()
        history.append(record)
    return net, history


def write_history_csv(history, path, n_classes: int) -> None:
    """epoch, loss, accuracy, false_alarm, det_<k>... with blanks on
    epochs that were not evaluated."""
    import csv

    det_cols = [f"det_{k}" for k in range(n_classes)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy", "false_alarm"]
                        + det_cols)
        for rec in history:
            row = [rec["epoch"], repr(rec["loss"])]
            if "accuracy" in rec:
                row += [repr(rec["accuracy"]), repr(rec["false_alarm"])]
                row += [repr(v) for v in rec["detection"]]
            else:
                row += ["", ""] + [""] * n_classes
            writer.writerow(row)


# --------------------------------------------------------------------------
# Model serialization: magic, version, JSON metadata, then the tensors of
# network_param_arrays in order as row-major float64 little-endian.

def _net_metadata(net: Network) -> dict:
    layers = []
    for layer, policy in zip(net.layers, net.policies):
        layers.append({
            "variant": layer.variant,
            "out_channels": layer.out_channels,
            "k_h": layer.k_h,
            "k_w": layer.k_w,
            "stride_t": layer.stride_t,
            "stride_c": layer.stride_c,
            "activation": layer.activation,
            "policy": {"v_min": policy.v_min, "v_max": policy.v_max,
                       "mode": policy.mode, "kind": policy.kind},
        })
    return {
        "input_shape": list(net.input_shape),
        "n_classes": net.n_classes,
        "layers": layers,
        "tensor_shapes": [list(a.shape) for a in network_param_arrays(net)],
    }


def save_model(net: Network, path) -> None:
    meta = json.dumps(_net_metadata(net), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        for arr in network_param_arrays(net):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FORMAT_MAGIC:
            raise ValueError(f"{path}: not a model file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        tensors = []
        for shape in meta["tensor_shapes"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated tensor data")
            tensors.append(np.frombuffer(buf, dtype="<f8").reshape(shape)
                           .astype(np.float64))
        if fh.read(1):
            raise ValueError(f"{path}: trailing data")

    layers = []
    policies = []
    pos = 0
    for spec in meta["layers"]:
        weights = tensors[pos]
        biases = tensors[pos + 1]
        pos += 2
        ewms = []
        for _ in range(spec["out_channels"]):
            ewms.append(_payload_from_tensors(spec["variant"], tensors, pos))
            pos += _payload_tensor_count(spec["variant"])
        layers.append(LayerParams(weights, biases, ewms,
                                  stride_t=spec["stride_t"],
                                  stride_c=spec["stride_c"],
                                  activation=spec["activation"]))
        pol = spec["policy"]
        policies.append(ConstraintPolicy(v_min=pol["v_min"],
                                         v_max=pol["v_max"],
                                         mode=pol["mode"], kind=pol["kind"]))
    head_w, head_b = tensors[pos], tensors[pos + 1]
    return Network(layers, head_w, head_b, policies=policies,
                   input_shape=tuple(meta["input_shape"]),
                   n_classes=meta["n_classes"])


def _payload_tensor_count(variant: str) -> int:
    return {"standard": 0, "elementwise": 1, "row_shared": 1,
            "col_shared": 1, "bilinear": 2, "full_matrix": 1}[variant]


def _payload_from_tensors(variant: str, tensors: list, pos: int):
    from .layers import (Bilinear, ColShared, Elementwise, FullMatrix,
                         RowShared, Standard)

    if variant == "standard":
        return Standard()
    if variant == "elementwise":
        return Elementwise(tensors[pos])
    if variant == "row_shared":
        return RowShared(tensors[pos])
    if variant == "col_shared":
        return ColShared(tensors[pos])
    if variant == "bilinear":
        return Bilinear(tensors[pos], tensors[pos + 1])
    if variant == "full_matrix":
        return FullMatrix(tensors[pos])
    raise ValueError(f"unknown variant {variant!r}")
