"""Feed-forward classifier over batch x channel x length feature maps.

Channel-mixing (1x1) linear layers interleaved with normalization layers,
a global mean pool over the length axis, and a linear head. During source
pretraining every weight trains under cross-entropy; during streaming
adaptation only the normalization layers' per-channel scale and shift
move, driven by prediction-entropy minimization.

Normalization statistics come from one of four sources per forward pass:
live batch statistics, memory statistics with shrinkage correction,
an exponential moving average of test batches, or the frozen source
running statistics tracked during pretraining.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .normalization import (
    ChannelStats,
    EmaNormState,
    MemoryNormState,
    StateError,
    batch_channel_stats,
    normalize,
)
from .numerics import ShapeError, Tape, Tensor, Var

NORM_SOURCES = ("batch", "iobmn", "ema", "frozen")

LAYER_KINDS = ("channel_mix", "norm", "relu", "global_mean_pool", "classifier_head")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


class ChannelMixLayer:
    kind = "channel_mix"

    def __init__(self, weight: np.ndarray) -> None:
        self.weight = np.asarray(weight, dtype=np.float64)  # out_channels x in_channels


class NormLayer:
    """Per-channel scale/shift with selectable statistics source.

    `gamma` and `beta` are the adaptation targets. `running_mean/var` are
    the source statistics accumulated during pretraining (used by the
    frozen source). `memory_norm` and `ema` host the inference-time
    statistics providers.
    """

    kind = "norm"

    def __init__(self, channels: int, epsilon: float = 1e-5,
                 alpha: float = 4.0, ema_momentum: float = 0.9) -> None:
        if epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        self.channels = int(channels)
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.epsilon = float(epsilon)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.memory_norm = MemoryNormState(alpha=alpha)
        self.ema = EmaNormState(momentum=ema_momentum)


class ReluLayer:
    kind = "relu"


class GlobalMeanPoolLayer:
    kind = "global_mean_pool"


class ClassifierHeadLayer:
    kind = "classifier_head"

    def __init__(self, weight: np.ndarray, bias: np.ndarray) -> None:
        self.weight = np.asarray(weight, dtype=np.float64)  # in_channels x classes
        self.bias = np.asarray(bias, dtype=np.float64)


@dataclass
class ForwardResult:
    """Logits plus the statistics observed on the way through the network."""

    logits: Tensor | Var
    early_mean: np.ndarray   # per sample, per channel: mean over length
    early_sigma: np.ndarray  # per sample, per channel: std over length
    layer_stats: list[ChannelStats]  # per norm layer: input batch statistics
    layer_extents: list[int]         # per norm layer: input spatial extent


class Model:
    """Ordered layers; input is batch x in_channels x length."""

    def __init__(self, layers: list, in_channels: int, num_classes: int) -> None:
        if not layers or layers[-1].kind != "classifier_head":
            raise ValueError("model must end with exactly one classifier head")
        if any(l.kind == "classifier_head" for l in layers[:-1]):
            raise ValueError("classifier head must be unique and last")
        self.layers = layers
        self.in_channels = int(in_channels)
        self.num_classes = int(num_classes)

    @property
    def norm_layers(self) -> list[NormLayer]:
        return [l for l in self.layers if l.kind == "norm"]

    def clone(self) -> "Model":
        return load_model_dict(model_dict(self))

    def reset_inference_stats(self, alpha: float | None = None,
                              ema_momentum: float | None = None) -> None:
        """Clear memory/EMA statistics (fresh stream), keeping weights."""
        for layer in self.norm_layers:
            a = layer.memory_norm.alpha if alpha is None else alpha
            m = layer.ema.momentum if ema_momentum is None else ema_momentum
            layer.memory_norm = MemoryNormState(alpha=a)
            layer.ema = EmaNormState(momentum=m)


def default_layer_specs(channels: int = 16, num_classes: int = 3, blocks: int = 3) -> list[LayerSpec]:
    specs: list[LayerSpec] = []
    for _ in range(blocks):
        specs.append(LayerSpec("channel_mix", channels, channels))
        specs.append(LayerSpec("norm", channels, channels))
        specs.append(LayerSpec("relu", channels, channels))
    specs.append(LayerSpec("global_mean_pool", channels, channels))
    specs.append(LayerSpec("classifier_head", channels, num_classes))
    return specs


def build_model(specs: list[LayerSpec], seed: int = 0, epsilon: float = 1e-5,
                alpha: float = 4.0, ema_momentum: float = 0.9) -> Model:
    """Construct a model with seeded Gaussian weight init (deterministic)."""
    if not specs:
        raise ValueError("empty layer specs")
    for prev, cur in zip(specs, specs[1:]):
        if prev.out_channels != cur.in_channels:
            raise ValueError(
                f"channel extents do not chain: {prev.kind}({prev.out_channels}) -> {cur.kind}({cur.in_channels})")
    rng = np.random.default_rng(seed)
    layers: list = []
    for spec in specs:
        if spec.kind == "channel_mix":
            scale = 1.0 / math.sqrt(spec.in_channels)
            layers.append(ChannelMixLayer(rng.normal(0.0, scale, size=(spec.out_channels, spec.in_channels))))
        elif spec.kind == "norm":
            layers.append(NormLayer(spec.out_channels, epsilon, alpha, ema_momentum))
        elif spec.kind == "relu":
            layers.append(ReluLayer())
        elif spec.kind == "global_mean_pool":
            layers.append(GlobalMeanPoolLayer())
        else:
            scale = 1.0 / math.sqrt(spec.in_channels)
            layers.append(ClassifierHeadLayer(
                rng.normal(0.0, scale, size=(spec.in_channels, spec.out_channels)),
                np.zeros(spec.out_channels)))
    return Model(layers, specs[0].in_channels, specs[-1].out_channels)


def default_model(channels: int = 16, num_classes: int = 3, blocks: int = 3,
                  seed: int = 0, **kwargs) -> Model:
    return build_model(default_layer_specs(channels, num_classes, blocks), seed=seed, **kwargs)


# ---------------------------------------------------------------------------
# forward


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x.data


def _mix(x, weight):
    # batch x c_in x length -> batch x c_out x length via a 2-D product
    b, c, length = _val(x).shape
    cols = nm.reshape(nm.transpose(x, (1, 0, 2)), (c, b * length))
    mixed = nm.matmul(weight, cols)
    c_out = _val(mixed).shape[0]
    return nm.transpose(nm.reshape(mixed, (c_out, b, length)), (1, 0, 2))


def _norm_batch(x, gamma, beta, epsilon):
    shape = _val(x).shape
    mean = nm.reduce_mean(x, (0, 2))
    var = nm.reduce_var(x, (0, 2))
    inv = nm.rsqrt(nm.add_scalar(var, epsilon))
    centered = nm.sub(x, nm.expand(mean, shape, (1,)))
    scaled = nm.mul(centered, nm.expand(inv, shape, (1,)))
    return nm.add(nm.mul(scaled, nm.expand(gamma, shape, (1,))), nm.expand(beta, shape, (1,)))


def forward(model: Model, x, norm_source: str = "batch",
            norm_params: dict[int, tuple] | None = None) -> ForwardResult:
    """Run the network, collecting early per-sample and per-layer statistics.

    `x` may be a Tensor (pure evaluation) or a tape Var (differentiable;
    batch statistics only). `norm_params` substitutes (gamma, beta) nodes
    for norm layers by layer index; the training paths use it to inject
    trainable tape variables.

    Early statistics are each sample's per-channel (mean, std over length)
    of the input to the first norm layer; `layer_stats` are the live batch
    statistics of every norm layer's input. With the `ema` source, each
    norm layer folds the live statistics into its moving average as the
    pass reaches it.
    """
    if norm_source not in NORM_SOURCES:
        raise ValueError(f"unknown norm source {norm_source!r}")
    xv = _val(x) if isinstance(x, (Tensor, Var)) else np.asarray(x, dtype=np.float64)
    if not isinstance(x, (Tensor, Var)):
        x = Tensor(xv)
    if xv.ndim != 3 or xv.shape[1] != model.in_channels:
        raise ShapeError(f"expected batch x {model.in_channels} x length input, got {xv.shape}")
    if xv.shape[0] < 1:
        raise ShapeError("empty batch")
    if norm_source != "batch" and isinstance(x, Var):
        raise ValueError("recorded forwards support batch statistics only")

    early_mean = early_sigma = None
    layer_stats: list[ChannelStats] = []
    layer_extents: list[int] = []
    norm_index = 0
    out = x
    for layer_index, layer in enumerate(model.layers):
        if layer.kind == "channel_mix":
            out = _mix(out, Tensor._wrap(layer.weight))
        elif layer.kind == "norm":
            value = _val(out)
            stats = batch_channel_stats(value)
            layer_stats.append(stats)
            layer_extents.append(value.shape[2])
            if norm_index == 0:
                early_mean = value.mean(axis=2)
                centered = value - early_mean[:, :, None]
                early_sigma = np.sqrt(np.mean(centered * centered, axis=2))
            if norm_params and layer_index in norm_params:
                gamma, beta = norm_params[layer_index]
            else:
                gamma, beta = Tensor._wrap(layer.gamma), Tensor._wrap(layer.beta)
            if norm_source == "batch":
                out = _norm_batch(out, gamma, beta, layer.epsilon)
            elif norm_source == "iobmn":
                if not layer.memory_norm.populated:
                    raise StateError("memory normalization state not populated; run an adaptation first")
                out = Tensor._wrap(normalize(layer.memory_norm, value, _val(gamma), _val(beta), layer.epsilon))
            elif norm_source == "ema":
                blended = layer.ema.update(stats)
                out = Tensor._wrap(_affine_normalize(value, blended.mean, blended.var,
                                                     _val(gamma), _val(beta), layer.epsilon))
            else:  # frozen source statistics
                out = Tensor._wrap(_affine_normalize(value, layer.running_mean, layer.running_var,
                                                     _val(gamma), _val(beta), layer.epsilon))
            norm_index += 1
        elif layer.kind == "relu":
            out = nm.relu(out)
        elif layer.kind == "global_mean_pool":
            out = nm.reduce_mean(out, (2,))
        else:  # classifier head
            out = nm.add(nm.matmul(out, Tensor._wrap(layer.weight)),
                         nm.expand(Tensor._wrap(layer.bias), _val(out).shape[:1] + layer.bias.shape, (1,)))
    if early_mean is None:
        raise ValueError("model has no norm layer")
    return ForwardResult(out, early_mean, early_sigma, layer_stats, layer_extents)


def _affine_normalize(f, mean, var, gamma, beta, epsilon):
    scale = 1.0 / np.sqrt(var + epsilon)
    return gamma.reshape(1, -1, 1) * (f - mean.reshape(1, -1, 1)) * scale.reshape(1, -1, 1) + beta.reshape(1, -1, 1)


# ---------------------------------------------------------------------------
# losses


def entropy_loss(logits):
    """Mean over the batch of the prediction entropy (natural log)."""
    shape = _val(logits).shape if isinstance(logits, (Tensor, Var)) else np.shape(logits)
    if len(shape) != 2 or shape[0] < 1:
        raise ShapeError(f"expected batch x classes logits, got {shape}")
    p = nm.softmax(logits)
    ls = nm.log_softmax(logits)
    per_sample = nm.neg(nm.reduce_sum(nm.mul(p, ls), (1,)))
    return nm.reduce_mean(per_sample, (0,))


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood of integer labels."""
    ls = nm.log_softmax(logits)
    picked = nm.take_per_row(ls, labels)
    return nm.neg(nm.reduce_mean(picked, (0,)))


def per_sample_entropy(probabilities: np.ndarray) -> np.ndarray:
    """Entropy of each probability row, natural log; 0 log 0 treated as 0."""
    p = np.asarray(probabilities, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logp = np.where(p > 0.0, np.log(np.maximum(p, 1e-300)), 0.0)
    return -(p * logp).sum(axis=-1)


# ---------------------------------------------------------------------------
# parameter updates


def adapt_step(model: Model, memory_batch, lr: float) -> ForwardResult | None:
    """One entropy-minimization SGD step on every norm layer's scale/shift.

    The batch is forwarded with live batch statistics; all other weights
    stay untouched. Returns the forward result (whose `layer_stats` seed
    the memory-statistics normalization), or None when the batch is empty.
    """
    if memory_batch is None:
        return None
    batch = memory_batch if isinstance(memory_batch, Tensor) else Tensor(memory_batch)
    if batch.data.shape[0] == 0:
        return None
    tape = Tape()
    norm_params: dict[int, tuple] = {}
    slots: list[tuple[NormLayer, Var, Var]] = []
    for layer_index, layer in enumerate(model.layers):
        if layer.kind == "norm":
            g = tape.variable(Tensor._wrap(layer.gamma), trainable=True)
            b = tape.variable(Tensor._wrap(layer.beta), trainable=True)
            norm_params[layer_index] = (g, b)
            slots.append((layer, g, b))
    x = tape.variable(batch)
    result = forward(model, x, "batch", norm_params)
    loss = entropy_loss(result.logits)
    grads = nm.backward(tape, loss)
    for layer, g, b in slots:
        layer.gamma = layer.gamma - lr * grads[g].data
        layer.beta = layer.beta - lr * grads[b].data
    return result


@dataclass
class PretrainResult:
    model: Model
    source_accuracy: float
    final_loss: float


def pretrain(model: Model, inputs, labels, epochs: int = 100, lr: float = 1e-2, seed: int = 0,
             batch_size: int = 32, running_momentum: float = 0.1) -> PretrainResult:
    """Cross-entropy SGD over all weights on labeled source data.

    Deterministic under the seed (shuffling is the only randomness). Norm
    layers accumulate running source statistics for the frozen source.
    """
    x = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if x.ndim != 3 or x.shape[0] != y.shape[0]:
        raise ValueError(f"inputs {x.shape} and labels {y.shape} do not line up")
    if y.size and (y.min() < 0 or y.max() >= model.num_classes):
        raise ValueError("class labels out of range")
    rng = np.random.default_rng(seed)
    final_loss = math.nan
    for _ in range(epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], batch_size):
            take = order[start:start + batch_size]
            final_loss = _pretrain_minibatch(model, x[take], y[take], lr, running_momentum)
    accuracy = evaluate_accuracy(model, x, y, batch_size=batch_size)
    return PretrainResult(model, accuracy, final_loss)


def _pretrain_minibatch(model: Model, xb: np.ndarray, yb: np.ndarray, lr: float,
                        running_momentum: float) -> float:
    tape = Tape()
    norm_params: dict[int, tuple] = {}
    trained: list[tuple] = []  # (object, attribute, var)
    for layer_index, layer in enumerate(model.layers):
        if layer.kind == "channel_mix":
            w = tape.variable(Tensor._wrap(layer.weight), trainable=True)
            trained.append((layer, "weight", w))
        elif layer.kind == "norm":
            g = tape.variable(Tensor._wrap(layer.gamma), trainable=True)
            b = tape.variable(Tensor._wrap(layer.beta), trainable=True)
            norm_params[layer_index] = (g, b)
            trained.append((layer, "gamma", g))
            trained.append((layer, "beta", b))
        elif layer.kind == "classifier_head":
            w = tape.variable(Tensor._wrap(layer.weight), trainable=True)
            b = tape.variable(Tensor._wrap(layer.bias), trainable=True)
            trained.append((layer, "weight", w))
            trained.append((layer, "bias", b))
    x = tape.variable(Tensor._wrap(xb))
    result = forward(model, x, "batch", norm_params)
    loss = cross_entropy_loss(result.logits, yb)
    grads = nm.backward(tape, loss)
    for obj, attr, var in trained:
        setattr(obj, attr, getattr(obj, attr) - lr * grads[var].data)
    m = running_momentum
    for layer, stats in zip(model.norm_layers, result.layer_stats):
        layer.running_mean = (1.0 - m) * layer.running_mean + m * stats.mean
        layer.running_var = (1.0 - m) * layer.running_var + m * stats.var
    return float(_val(loss))


def evaluate_accuracy(model: Model, inputs, labels, batch_size: int = 64,
                      norm_source: str = "batch") -> float:
    x = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if x.shape[0] == 0:
        return 0.0
    correct = 0
    for start in range(0, x.shape[0], batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        result = forward(model, Tensor._wrap(xb), norm_source)
        correct += int((_val(result.logits).argmax(axis=1) == yb).sum())
    return correct / x.shape[0]


# ---------------------------------------------------------------------------
# checkpoints

MODEL_FORMAT = "stta-model"
MODEL_VERSION = 1


def _stats_dict(stats: ChannelStats | None):
    if stats is None:
        return None
    return {"mean": stats.mean.tolist(), "var": stats.var.tolist()}


def _stats_from(d) -> ChannelStats | None:
    return None if d is None else ChannelStats(d["mean"], d["var"])


def model_dict(model: Model) -> dict:
    layers = []
    for layer in model.layers:
        if layer.kind == "channel_mix":
            layers.append({"kind": layer.kind, "weight": layer.weight.tolist()})
        elif layer.kind == "norm":
            mn = layer.memory_norm
            layers.append({
                "kind": layer.kind,
                "gamma": layer.gamma.tolist(),
                "beta": layer.beta.tolist(),
                "epsilon": layer.epsilon,
                "running_mean": layer.running_mean.tolist(),
                "running_var": layer.running_var.tolist(),
                "memory_norm": {
                    "alpha": mn.alpha,
                    "stats": _stats_dict(mn.memory_stats),
                    "spatial_extent": mn.spatial_extent,
                    "sample_count": mn.sample_count,
                },
                "ema": {"momentum": layer.ema.momentum, "stats": _stats_dict(layer.ema.stats)},
            })
        elif layer.kind == "classifier_head":
            layers.append({"kind": layer.kind, "weight": layer.weight.tolist(), "bias": layer.bias.tolist()})
        else:
            layers.append({"kind": layer.kind})
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "in_channels": model.in_channels,
        "num_classes": model.num_classes,
        "layers": layers,
    }


def load_model_dict(payload: dict) -> Model:
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError("not a model checkpoint")
    if payload.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model checkpoint version {payload.get('version')!r}")
    layers: list = []
    for entry in payload["layers"]:
        kind = entry["kind"]
        if kind == "channel_mix":
            layers.append(ChannelMixLayer(np.array(entry["weight"])))
        elif kind == "norm":
            gamma = np.array(entry["gamma"])
            layer = NormLayer(gamma.shape[0], entry["epsilon"],
                              entry["memory_norm"]["alpha"], entry["ema"]["momentum"])
            layer.gamma = gamma
            layer.beta = np.array(entry["beta"])
            layer.running_mean = np.array(entry["running_mean"])
            layer.running_var = np.array(entry["running_var"])
            stats = _stats_from(entry["memory_norm"]["stats"])
            if stats is not None:
                layer.memory_norm.populate(stats, entry["memory_norm"]["spatial_extent"],
                                           entry["memory_norm"]["sample_count"])
            layer.ema.stats = _stats_from(entry["ema"]["stats"])
            layers.append(layer)
        elif kind == "relu":
            layers.append(ReluLayer())
        elif kind == "global_mean_pool":
            layers.append(GlobalMeanPoolLayer())
        elif kind == "classifier_head":
            layers.append(ClassifierHeadLayer(np.array(entry["weight"]), np.array(entry["bias"])))
        else:
            raise ValueError(f"unknown layer kind {kind!r} in checkpoint")
    return Model(layers, payload["in_channels"], payload["num_classes"])


def save_model(model: Model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_dict(model), fh)


def load_model(path) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        return load_model_dict(json.load(fh))
