"""Deterministic small-scale training engine for chain MLPs.

Supports dense / ReLU / batch-norm / softmax chains with backprop,
SGD or Adam, L1 regularization, pruning masks, and quantization-aware
training via the straight-through estimator: the forward pass applies
the weight quantizer, the backward pass treats it as identity, and the
gradient is clipped to zero where the master weight falls outside the
quantizer's representable range.

Training arithmetic is binary64 throughout; only the forward weights are
quantized. Master weights stay real-valued. All randomness flows from a
Philox counter-based generator keyed by the config seed, and summation
order is fixed, so identical seeds give bit-identical trajectories.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .fixed_point import FixedPointSpec
from .model_ir import LayerNode, ModelGraph, PrecisionSet, Tensor, topo_order
from . import kernels

BN_MOMENTUM = 0.9


class TrainingDivergedError(RuntimeError):
    pass


class EvaluationError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based 64-bit generator; streams are stable across platforms."""
    return np.random.Generator(np.random.Philox(key=seed & (2**64 - 1)))


@dataclass(frozen=True)
class QuantizerSpec:
    """Weight quantizer: values live on alpha * fixed<bits,integer_bits> grid.

    binary maps to {-alpha, +alpha} (sign(0) = +1) and ternary to
    {-alpha, 0, +alpha} with a dead band of alpha/2 around zero; their bit
    counts are fixed at 1 and 2.
    """

    bits: int
    integer_bits: int = 1
    alpha: float = 1.0
    mode: str = "fixed"

    def __post_init__(self):
        if self.mode not in ("fixed", "binary", "ternary"):
            raise ValueError(f"unknown quantizer mode {self.mode!r}")
        if self.mode == "binary":
            object.__setattr__(self, "bits", 1)
        elif self.mode == "ternary":
            object.__setattr__(self, "bits", 2)
        if self.bits < 1:
            raise ValueError("quantizer bits must be >= 1")
        if self.alpha <= 0:
            raise ValueError("quantizer alpha must be > 0")

    def grid_limits(self):
        """(min, max) representable weight values."""
        if self.mode in ("binary", "ternary"):
            return -self.alpha, self.alpha
        step = 2.0 ** (self.integer_bits - self.bits)
        max_raw = 2 ** (self.bits - 1) - 1
        min_raw = -(2 ** (self.bits - 1))
        return self.alpha * min_raw * step, self.alpha * max_raw * step

    def apply(self, w: np.ndarray) -> np.ndarray:
        if self.mode == "binary":
            return np.where(w >= 0, self.alpha, -self.alpha)
        if self.mode == "ternary":
            band = self.alpha / 2
            return np.where(w >= band, self.alpha, np.where(w <= -band, -self.alpha, 0.0))
        step = 2.0 ** (self.integer_bits - self.bits)
        max_raw = 2 ** (self.bits - 1) - 1
        min_raw = -(2 ** (self.bits - 1))
        raw = np.clip(np.floor(w / (self.alpha * step) + 0.5), min_raw, max_raw)
        return raw * (self.alpha * step)

    def in_range(self, w: np.ndarray) -> np.ndarray:
        lo, hi = self.grid_limits()
        return (w >= lo) & (w <= hi)

    def precision_spec(self) -> FixedPointSpec:
        """Matching deployment spec (round to nearest, saturating)."""
        bits = 2 if self.mode == "ternary" else max(self.bits, 2)
        integer = 2 if self.mode in ("binary", "ternary") else self.integer_bits
        return FixedPointSpec(bits, integer, signed=True,
                              rounding="round_half_up", overflow="saturate")


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.01
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 64
    l1_lambda: float = 0.0
    seed: int = 0
    quantizers: object = None  # QuantizerSpec or {layer name: QuantizerSpec}
    activation_quantizers: dict = None  # {layer name: QuantizerSpec} on outputs
    masks: dict = None  # {layer name: 0/1 array shaped like the weight}

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.l1_lambda < 0:
            raise ValueError("l1_lambda must be >= 0")

    def quantizer_for(self, layer_name: str):
        if self.quantizers is None:
            return None
        if isinstance(self.quantizers, QuantizerSpec):
            return self.quantizers
        return self.quantizers.get(layer_name)


@dataclass
class Dataset:
    features: np.ndarray  # [N, d] float64
    labels: np.ndarray  # [N] int
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.labels) != len(self.features):
            raise ValueError("features must be [N, d] with matching labels")
        if self.labels.size and not (0 <= self.labels.min() and self.labels.max() < self.class_count):
            raise ValueError("labels must lie in [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)


def load_csv_dataset(path) -> Dataset:
    """CSV with a header row, feature columns, then an integer label column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1].strip() != "label":
            raise ValueError(f"{path}: last column must be named 'label'")
        feats, labels = [], []
        for row in reader:
            if not row:
                continue
            feats.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
    features = np.array(feats, dtype=np.float64)
    labels = np.array(labels, dtype=np.int64)
    return Dataset(features, labels, int(labels.max()) + 1 if labels.size else 0)


def save_csv_dataset(dataset: Dataset, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dataset.features.shape[1])] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def synthetic_task(seed: int = 7, n_samples: int = 2000, n_features: int = 16,
                   n_classes: int = 5, separation: float = 1.0,
                   sample_seed: int = None) -> Dataset:
    """Gaussian-blob classification shaped like the bundled 16-feature task.

    ``seed`` fixes the task itself (class means, per-feature scales);
    ``sample_seed`` fixes the draw, so train/test splits share one task.
    Per-feature scales span several octaves so useful weights cover a wide
    dynamic range, which is what makes narrow post-training quantization
    visibly lossy on this task.
    """
    task_rng = make_rng(seed)
    means = task_rng.normal(0.0, 1.0, (n_classes, n_features)) * separation
    feature_scale = 2.0 ** task_rng.uniform(-2.0, 2.0, n_features)
    draw_rng = make_rng(seed if sample_seed is None else sample_seed)
    labels = draw_rng.integers(0, n_classes, n_samples)
    noise = draw_rng.normal(0.0, 1.0, (n_samples, n_features))
    features = (means[labels] + noise) * feature_scale
    return Dataset(features, labels, n_classes)


def init_dense_params(rng: np.random.Generator, n_out: int, n_in: int):
    """Glorot-uniform weights in +/- sqrt(6/(fan_in+fan_out)), zero bias."""
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, (n_out, n_in)), np.zeros(n_out)


def build_classifier(n_features: int, hidden, n_classes: int, seed: int = 0,
                     precision: str = "fixed<16,6>", batch_norm: bool = False) -> ModelGraph:
    """Initialized dense/ReLU classifier chain ending in softmax."""
    rng = make_rng(seed)
    prec = PrecisionSet.uniform(precision)
    nodes = [LayerNode("input", "input", precision=prec)]
    widths = list(hidden) + [n_classes]
    in_width = n_features
    for i, width in enumerate(widths):
        w, b = init_dense_params(rng, width, in_width)
        nodes.append(LayerNode(
            f"dense{i}", "dense",
            {"weight": Tensor.from_numpy(w), "bias": Tensor.from_numpy(b)},
            precision=prec,
        ))
        if batch_norm and i < len(widths) - 1:
            c = width
            nodes.append(LayerNode(f"bn{i}", "batch_norm", {
                "gamma": Tensor.from_numpy(np.ones(c)),
                "beta": Tensor.from_numpy(np.zeros(c)),
                "moving_mean": Tensor.from_numpy(np.zeros(c)),
                "moving_variance": Tensor.from_numpy(np.ones(c)),
                "epsilon": Tensor.scalar(1e-3),
            }, precision=prec))
        if i < len(widths) - 1:
            nodes.append(LayerNode(f"relu{i}", "relu", precision=prec))
        in_width = width
    nodes.append(LayerNode("softmax", "softmax", precision=prec))
    return ModelGraph.chain(nodes, (n_features,))


class _Dense:
    def __init__(self, node: LayerNode, quantizer, mask):
        self.name = node.name
        self.w = node.param("weight").to_numpy()
        self.b = node.param("bias").to_numpy()
        self.quantizer = quantizer
        self.mask = None if mask is None else np.asarray(mask, dtype=np.float64)
        if self.mask is not None:
            if self.mask.shape != self.w.shape:
                raise ValueError(f"{self.name}: mask shape {self.mask.shape} != weight shape {self.w.shape}")
            self.w *= self.mask  # pruned masters are pinned at zero

    def effective_weight(self):
        w = self.w if self.quantizer is None else self.quantizer.apply(self.w)
        return w if self.mask is None else w * self.mask

    def forward(self, x, training):
        self._x = x
        self._w_eff = self.effective_weight()
        return x @ self._w_eff.T + self.b

    def backward(self, dy):
        dw = dy.T @ self._x
        if self.quantizer is not None:
            dw *= self.quantizer.in_range(self.w)  # STE with range clipping
        if self.mask is not None:
            dw *= self.mask
        self.dw, self.db = dw, dy.sum(axis=0)
        return dy @ self._w_eff

    def params(self):
        return [("w", self.w, lambda: self.dw), ("b", self.b, lambda: self.db)]


class _BatchNorm:
    def __init__(self, node: LayerNode):
        self.name = node.name
        if "scale" in node.params:
            raise ValueError(f"{self.name}: cannot train a constant-folded batch_norm")
        self.gamma = node.param("gamma").to_numpy().reshape(-1)
        self.beta = node.param("beta").to_numpy().reshape(-1)
        self.moving_mean = node.param("moving_mean").to_numpy().reshape(-1)
        self.moving_var = node.param("moving_variance").to_numpy().reshape(-1)
        self.eps = float(node.param("epsilon").data[0])

    def forward(self, x, training):
        if training:
            mean = x.mean(axis=0)
            var = x.var(axis=0)  # biased, matching the inference-time estimate
            self.moving_mean = BN_MOMENTUM * self.moving_mean + (1 - BN_MOMENTUM) * mean
            self.moving_var = BN_MOMENTUM * self.moving_var + (1 - BN_MOMENTUM) * var
        else:
            mean, var = self.moving_mean, self.moving_var
        self._istd = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean) * self._istd
        return self.gamma * self._xhat + self.beta

    def backward(self, dy):
        n = dy.shape[0]
        self.dgamma = (dy * self._xhat).sum(axis=0)
        self.dbeta = dy.sum(axis=0)
        dxhat = dy * self.gamma
        return self._istd * (
            dxhat - dxhat.mean(axis=0) - self._xhat * (dxhat * self._xhat).mean(axis=0)
        ) if n > 0 else dy

    def params(self):
        return [("gamma", self.gamma, lambda: self.dgamma), ("beta", self.beta, lambda: self.dbeta)]


class _Relu:
    def __init__(self, node):
        self.name = node.name

    def forward(self, x, training):
        self._pos = x > 0
        return x * self._pos

    def backward(self, dy):
        return dy * self._pos

    def params(self):
        return []


class _FakeQuant:
    """STE fake-quantization of a layer output (activation grid)."""

    def __init__(self, name, quantizer):
        self.name = f"{name}.quant"
        self.quantizer = quantizer

    def forward(self, x, training):
        self._mask = self.quantizer.in_range(x)
        return self.quantizer.apply(x)

    def backward(self, dy):
        return dy * self._mask

    def params(self):
        return []


class _Net:
    """Numpy mirror of a chain graph; softmax+cross-entropy handled jointly."""

    def __init__(self, graph: ModelGraph, cfg: TrainingConfig):
        self.layers = []
        self.has_softmax = False
        order = topo_order(graph)
        act_quant = cfg.activation_quantizers or {}
        for node in order:
            if node.kind == "input":
                if node.name in act_quant:
                    self.layers.append(_FakeQuant(node.name, act_quant[node.name]))
                continue
            if node.kind == "dense":
                self.layers.append(_Dense(node, cfg.quantizer_for(node.name),
                                          None if cfg.masks is None else cfg.masks.get(node.name)))
            elif node.kind == "batch_norm":
                self.layers.append(_BatchNorm(node))
            elif node.kind == "relu":
                self.layers.append(_Relu(node))
            elif node.kind == "softmax":
                if node.name != order[-1].name:
                    raise ValueError("softmax is only supported as the final layer")
                self.has_softmax = True
                continue
            else:
                raise ValueError(f"layer {node.name!r}: kind {node.kind!r} is not trainable")
            if node.name in act_quant:
                self.layers.append(_FakeQuant(node.name, act_quant[node.name]))

    def logits(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def loss_and_grads(self, x, y, l1_lambda):
        """Mean softmax cross-entropy plus l1_lambda * sum |w|; fills grads."""
        logits = self.logits(x, training=True)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        probs = np.exp(shifted - log_z[:, None])
        n = len(y)
        data_loss = float((log_z - shifted[np.arange(n), y]).mean())
        penalty = 0.0
        dlogits = (probs - np.eye(probs.shape[1])[y]) / n
        grad = dlogits
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        if l1_lambda > 0:
            for layer in self.layers:
                if isinstance(layer, _Dense):
                    penalty += float(np.abs(layer.w).sum())
                    layer.dw += l1_lambda * np.sign(layer.w)
                    if layer.mask is not None:
                        layer.dw *= layer.mask
        return data_loss + l1_lambda * penalty, probs

    def dense_layers(self):
        return [l for l in self.layers if isinstance(l, _Dense)]

    def write_back(self, graph: ModelGraph) -> ModelGraph:
        by_name = {l.name: l for l in self.layers}
        nodes = []
        for node in topo_order(graph):
            layer = by_name.get(node.name)
            if isinstance(layer, _Dense):
                nodes.append(node.with_params(
                    weight=Tensor.from_numpy(layer.w), bias=Tensor.from_numpy(layer.b)
                ))
            elif isinstance(layer, _BatchNorm):
                nodes.append(node.with_params(
                    gamma=Tensor.from_numpy(layer.gamma),
                    beta=Tensor.from_numpy(layer.beta),
                    moving_mean=Tensor.from_numpy(layer.moving_mean),
                    moving_variance=Tensor.from_numpy(layer.moving_var),
                    epsilon=Tensor.scalar(layer.eps),
                ))
            else:
                nodes.append(node)
        return graph.replace_nodes(nodes)


class _Optimizer:
    def __init__(self, cfg: TrainingConfig, net: _Net):
        self.cfg = cfg
        self.step_count = 0
        if cfg.optimizer == "adam":
            self.m = {}
            self.v = {}
            for i, layer in enumerate(net.layers):
                for pname, value, _ in layer.params():
                    self.m[(i, pname)] = np.zeros_like(value)
                    self.v[(i, pname)] = np.zeros_like(value)

    def step(self, net: _Net):
        cfg = self.cfg
        self.step_count += 1
        for i, layer in enumerate(net.layers):
            for pname, value, grad_fn in layer.params():
                g = grad_fn()
                if cfg.optimizer == "sgd":
                    value -= cfg.learning_rate * g
                else:
                    m = self.m[(i, pname)]
                    v = self.v[(i, pname)]
                    m *= cfg.adam_beta1
                    m += (1 - cfg.adam_beta1) * g
                    v *= cfg.adam_beta2
                    v += (1 - cfg.adam_beta2) * g * g
                    mhat = m / (1 - cfg.adam_beta1 ** self.step_count)
                    vhat = v / (1 - cfg.adam_beta2 ** self.step_count)
                    value -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        for layer in net.dense_layers():
            if layer.mask is not None:
                layer.w *= layer.mask


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


def write_loss_trace(trace, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy"])
        for row in trace:
            writer.writerow([row.epoch, repr(row.loss), repr(row.accuracy)])


def train(model: ModelGraph, data: Dataset, cfg: TrainingConfig):
    """Train the chain; returns (graph with learned params, loss trace)."""
    if data.features.shape[1] != model.input_width:
        raise ValueError(
            f"dataset has {data.features.shape[1]} features, model expects {model.input_width}"
        )
    net = _Net(model, cfg)
    opt = _Optimizer(cfg, net)
    rng = make_rng(cfg.seed)
    n = len(data)
    batch = max(1, min(cfg.batch_size, n))
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, hits = [], 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            x, y = data.features[idx], data.labels[idx]
            loss, probs = net.loss_and_grads(x, y, cfg.l1_lambda)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}")
            opt.step(net)
            losses.append(loss * len(idx))
            hits += int((probs.argmax(axis=1) == y).sum())
        trace.append(EpochStats(epoch, sum(losses) / n, hits / n))
    return net.write_back(model), trace


def train_qat(model: ModelGraph, data: Dataset, cfg: TrainingConfig):
    """Quantization-aware training; every dense layer must have a quantizer."""
    if cfg.quantizers is None:
        raise ValueError("train_qat requires cfg.quantizers")
    if not isinstance(cfg.quantizers, QuantizerSpec):
        dense_names = [n.name for n in model.nodes if n.kind == "dense"]
        missing = [name for name in dense_names if name not in cfg.quantizers]
        if missing:
            raise ValueError(f"train_qat: no quantizer for dense layers {missing}")
    return train(model, data, cfg)


def quantize_model_weights(model: ModelGraph, quantizer) -> ModelGraph:
    """Snap dense weights onto the quantizer grid (the PTQ step and the
    deployment step after QAT). Accepts one spec or a per-layer map."""
    nodes = []
    for node in model.nodes:
        q = quantizer if isinstance(quantizer, QuantizerSpec) else quantizer.get(node.name)
        if node.kind == "dense" and q is not None:
            w = q.apply(node.param("weight").to_numpy())
            nodes.append(node.with_params(weight=Tensor.from_numpy(w)))
        else:
            nodes.append(node)
    return model.replace_nodes(nodes)


def forward_real(model: ModelGraph, features: np.ndarray) -> np.ndarray:
    """Inference-mode real-arithmetic forward over a batch."""
    x = np.asarray(features, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    for node in topo_order(model):
        if node.kind == "input":
            continue
        if node.kind == "dense":
            x = x @ node.param("weight").to_numpy().T + node.param("bias").to_numpy()
        elif node.kind == "relu":
            x = np.maximum(x, 0.0)
        elif node.kind == "batch_norm":
            scale, shift = kernels.batch_norm_scale_shift(node.params)
            x = x * np.asarray(scale) + np.asarray(shift)
        elif node.kind == "binary_tanh":
            x = _binary_tanh_real(node, x)
        elif node.kind == "ternary_tanh":
            x = _ternary_tanh_real(node, x)
        elif node.kind == "softmax":
            shifted = x - x.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            x = e / e.sum(axis=1, keepdims=True)
        else:
            raise ValueError(f"layer {node.name!r}: unsupported kind {node.kind!r}")
    return x[0] if squeeze else x


def _tanh_params(node, width):
    t = node.params.get("threshold")
    m = node.params.get("mode")
    thresholds = t.to_numpy().reshape(-1) if t is not None else np.zeros(width)
    modes = m.to_numpy().reshape(-1).astype(int) if m is not None else np.zeros(width, dtype=int)
    return thresholds, modes


def _binary_tanh_real(node, x):
    t, modes = _tanh_params(node, x.shape[1])
    out = np.where(x >= t, 1.0, -1.0)
    flipped = np.where(x <= t, 1.0, -1.0)
    out = np.where(modes == 1, flipped, out)
    out = np.where(modes == 2, 1.0, out)
    return np.where(modes == 3, -1.0, out)


def _ternary_tanh_real(node, x):
    t, modes = _tanh_params(node, x.shape[1])
    d = np.where(modes == 1, t - x, x - t)
    out = np.where(d >= 0.5, 1.0, np.where(d <= -0.5, -1.0, 0.0))
    out = np.where(modes == 2, 1.0, out)
    return np.where(modes == 3, -1.0, out)


def _rank_auc(scores: np.ndarray, is_positive: np.ndarray) -> float:
    """One-vs-rest AUC by the Mann-Whitney rank statistic with midranks."""
    n = len(scores)
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    p = int(is_positive.sum())
    q = n - p
    if p == 0 or q == 0:
        raise EvaluationError("AUC undefined: class has no positives or no negatives")
    return float((ranks[is_positive].sum() - p * (p + 1) / 2) / (p * q))


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    auc: tuple  # one-vs-rest, per class
    mean_auc: float


def evaluate(model: ModelGraph, data: Dataset, arithmetic: str = "real") -> EvalReport:
    """Accuracy and per-class one-vs-rest AUC under real or fixed arithmetic."""
    if data.class_count < 2 or len(np.unique(data.labels)) < 2:
        raise EvaluationError("AUC undefined on a single-class dataset")
    if arithmetic == "real":
        scores = forward_real(model, data.features)
    elif arithmetic == "fixed":
        scores = emulate_batch(model, data.features)
    else:
        raise ValueError(f"unknown arithmetic {arithmetic!r}")
    preds = scores.argmax(axis=1)
    accuracy = float((preds == data.labels).mean())
    aucs = tuple(
        _rank_auc(scores[:, c], data.labels == c) for c in range(data.class_count)
    )
    return EvalReport(accuracy, aucs, float(np.mean(aucs)))


def emulate_batch(model: ModelGraph, features: np.ndarray) -> np.ndarray:
    """Bit-accurate per-sample emulation; rows of real-valued outputs."""
    model = kernels.materialize_quantized(model)
    rows = []
    for x in np.asarray(features, dtype=np.float64):
        out, _ = kernels.run_inference(model, Tensor.from_numpy(x))
        rows.append([
            v.to_float() if hasattr(v, "to_float") else float(v) for v in out.data
        ])
    return np.array(rows, dtype=np.float64)


@dataclass(frozen=True)
class ScanRow:
    bits: int
    ptq_rel_acc: float
    qat_rel_acc: float


def _int_bits_for(max_abs: float) -> int:
    return max(1, math.ceil(math.log2(max_abs + 1e-12)) + 1)


def _layer_output_ranges(model: ModelGraph, features: np.ndarray) -> dict:
    """Max |output| per layer under real inference, for range selection."""
    x = np.asarray(features, dtype=np.float64)
    ranges = {}
    for node in topo_order(model):
        if node.kind == "dense":
            x = x @ node.param("weight").to_numpy().T + node.param("bias").to_numpy()
        elif node.kind == "relu":
            x = np.maximum(x, 0.0)
        elif node.kind == "batch_norm":
            scale, shift = kernels.batch_norm_scale_shift(node.params)
            x = x * np.asarray(scale) + np.asarray(shift)
        elif node.kind not in ("input", "softmax"):
            raise ValueError(f"layer {node.name!r}: kind {node.kind!r} not supported in scans")
        ranges[node.name] = float(np.abs(x).max()) if x.size else 1.0
    return ranges


def scan_precisions(model: ModelGraph, features: np.ndarray, bits: int) -> ModelGraph:
    """Assign a uniform-width fixed-point configuration to every layer.

    This is the scan's range convention: integer bits cover the observed
    weight and activation extremes of this model on the given data;
    accumulators are wide enough that the dot product itself never rounds
    (all precision loss happens at weights and stored layer outputs);
    everything rounds to nearest and saturates.
    """
    ranges = _layer_output_ranges(model, features)
    nodes = []
    in_int = None
    for node in topo_order(model):
        act_int = _int_bits_for(ranges[node.name])
        act_spec = FixedPointSpec(bits, act_int, rounding="round_half_up", overflow="saturate")
        if node.kind == "dense":
            w = node.param("weight").to_numpy()
            b = node.param("bias").to_numpy()
            w_int = _int_bits_for(max(np.abs(w).max(), np.abs(b).max(), 2.0 ** -bits))
            w_spec = FixedPointSpec(bits, w_int, rounding="round_half_up", overflow="saturate")
            guard = math.ceil(math.log2(w.shape[1])) + 1
            acc_width = min(2 * bits + guard + 2, 60)
            acc_int = min(w_int + in_int + guard, acc_width)
            acc_spec = FixedPointSpec(acc_width, acc_int, overflow="saturate")
            prec = PrecisionSet(w_spec, w_spec, acc_spec, act_spec)
        else:
            prec = PrecisionSet(act_spec, act_spec, act_spec, act_spec)
        nodes.append(replace(node, precision=prec))
        in_int = act_int
    return model.replace_nodes(nodes)


def ptq_qat_scan(model: ModelGraph, train_data: Dataset, eval_data: Dataset,
                 bit_widths, cfg: TrainingConfig, fixed_eval_limit: int = 1000,
                 float_model: ModelGraph = None):
    """Post-training vs quantization-aware accuracy across bit widths.

    The float baseline trains once from the given initialized model
    (pass ``float_model`` to reuse an existing one). At each width, PTQ
    assigns the scan precision configuration to the baseline and
    evaluates it under bit-accurate fixed arithmetic; QAT fine-tunes the
    baseline with per-layer weight quantizers matching the weight grid
    (half the epochs, half the learning rate), snaps the weights, and is
    evaluated the same way. Accuracies are relative to the
    real-arithmetic float baseline on the same samples. Returns
    (baseline EvalReport, [ScanRow ...]).
    """
    if float_model is None:
        float_model, _ = train(model, train_data, cfg)
    subset = Dataset(eval_data.features[:fixed_eval_limit],
                     eval_data.labels[:fixed_eval_limit], eval_data.class_count)
    baseline = evaluate(float_model, subset)
    qat_cfg_base = TrainingConfig(
        learning_rate=cfg.learning_rate / 2, optimizer=cfg.optimizer,
        adam_beta1=cfg.adam_beta1, adam_beta2=cfg.adam_beta2, adam_eps=cfg.adam_eps,
        epochs=max(1, cfg.epochs // 2), batch_size=cfg.batch_size,
        l1_lambda=cfg.l1_lambda, seed=cfg.seed, masks=cfg.masks,
    )
    rows = []
    for bits in bit_widths:
        bits = int(bits)
        ptq_model = scan_precisions(float_model, train_data.features, bits)
        ptq = evaluate(ptq_model, subset, arithmetic="fixed")
        quantizers = {
            node.name: QuantizerSpec(bits, node.precision.weight.integer_bits)
            for node in ptq_model.nodes if node.kind == "dense"
        }
        # Training sees the same activation grids the deployment applies.
        act_quantizers = {
            node.name: QuantizerSpec(bits, node.precision.result.integer_bits)
            for node in ptq_model.nodes if node.kind != "softmax"
        }
        qat_cfg = replace(qat_cfg_base, quantizers=quantizers,
                          activation_quantizers=act_quantizers)
        qat_model, _ = train_qat(float_model, train_data, qat_cfg)
        # Deploy under the same per-layer assignment the quantizers came from.
        snapped = quantize_model_weights(qat_model, quantizers)
        deployed = snapped.replace_nodes([
            replace(node, precision=ptq_model.node(node.name).precision)
            for node in snapped.nodes
        ])
        qat = evaluate(deployed, subset, arithmetic="fixed")
        rows.append(ScanRow(bits, ptq.accuracy / baseline.accuracy,
                            qat.accuracy / baseline.accuracy))
    return baseline, rows


def replace_quantizers(cfg: TrainingConfig, quantizers) -> TrainingConfig:
    return replace(cfg, quantizers=quantizers)


def write_scan_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bits", "ptq_rel_acc", "qat_rel_acc"])
        for row in rows:
            writer.writerow([row.bits, repr(row.ptq_rel_acc), repr(row.qat_rel_acc)])
