"""Probe architectures over per-layer embeddings.

Two strategies pick what the head sees:

* ``last``: the final layer only (conv layers flattened to time x feature);
* ``all``: every layer, each mapped by an adapter (feature projection followed
  by temporal interpolation) to a common ``(T_max, F_max)`` grid and mixed by
  softmax-normalized learnable layer weights.

Two heads map a ``(T, F)`` sequence to ``C`` logits:

* ``linear``: time-mean then one affine map;
* ``attention``: single-head self-attention, residual, layer norm, mean over
  time, classifier, with dropout after the attention block and before the
  classifier.

Everything is batched over a leading sample axis. :func:`forward` returns the
logits and, on request, a cache that :func:`backward` turns into parameter
gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .bank import LayerSpec

STRATEGIES = ("last", "all")
HEADS = ("linear", "attention")


def flatten_conv(x: np.ndarray) -> np.ndarray:
    """``(..., C, H, W) -> (..., W, C*H)``: width becomes time, channel-major features."""
    if x.ndim < 3:
        raise ValueError(f"flatten_conv expects (channel, height, width) axes, got shape {x.shape}")
    *lead, d1, d2, d3 = x.shape
    return np.swapaxes(x.reshape(*lead, d1 * d2, d3), -1, -2)


def flatten_conv_backward(grad: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    d1, d2, d3 = shape
    return np.swapaxes(grad, -1, -2).reshape(*grad.shape[:-2], d1, d2, d3)


def adapt_layer(h: np.ndarray, weight: np.ndarray | None, bias: np.ndarray | None, t_max: int) -> np.ndarray:
    """Project features then interpolate time; ``weight=None`` is the identity adapter."""
    if weight is None:
        if h.shape[-2] != t_max:
            raise ValueError(f"identity adapter needs {t_max} time steps, got {h.shape[-2]}")
        return h
    return nx.interpolate_time(nx.linear(h, weight, bias), t_max)


def aggregate_layers(adapted, scores: np.ndarray) -> np.ndarray:
    """Convex combination ``sum_l softmax(scores)_l * adapted[l]``."""
    if len(adapted) != scores.shape[0]:
        raise ValueError(f"{len(adapted)} layers but {scores.shape[0]} layer weights")
    shape = adapted[0].shape
    for a in adapted:
        if a.shape != shape:
            raise ValueError(f"aggregate_layers needs equal shapes, got {a.shape} and {shape}")
    alpha = nx.softmax(scores)
    out = np.zeros(shape)
    for a_l, h in zip(alpha, adapted):
        out += a_l * h
    return out


def linear_head(h: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if h.shape[-2] < 1:
        raise ValueError("linear head needs at least one time step")
    return nx.linear(h.mean(axis=-2), weight, bias)


def _attention_head(h, p, rate, rng, training):
    y, attn_cache = nx.self_attention(h, {k: p[k] for k in nx.ATTENTION_KEYS})
    y_drop, drop1 = nx.dropout(y, rate, rng, training)
    z, norm = nx.layernorm(h + y_drop, p["norm.gamma"], p["norm.beta"])
    pooled, drop2 = nx.dropout(z.mean(axis=-2), rate, rng, training)
    logits = nx.linear(pooled, p["fc.weight"], p["fc.bias"])
    return logits, {"attn": attn_cache, "drop1": drop1, "norm": norm, "drop2": drop2, "pooled": pooled}


def attention_head(h: np.ndarray, params: dict[str, np.ndarray], dropout: float = 0.0,
                   rng: np.random.Generator | None = None, training: bool = False) -> np.ndarray:
    """Self-attention, residual, layer norm, time-mean and classifier.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``, ``norm.gamma``,
    ``norm.beta``, ``fc.weight`` and ``fc.bias``. Dropout (rate ``dropout``)
    follows the attention block and precedes the classifier in training mode.
    """
    if h.shape[-2] < 1:
        raise ValueError("attention head needs at least one time step")
    return _attention_head(h, params, dropout, rng, training)[0]


@dataclass
class ProbeModel:
    """Architecture plus parameters of one (strategy, head) probe.

    ``params`` may be empty for a model that is only described (e.g. to count
    parameters of a very large configuration); :func:`init_probe` fills it.
    """

    strategy: str
    head: str
    layers: tuple[LayerSpec, ...]
    num_classes: int
    dropout: float = 0.1
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.layers = tuple(self.layers)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if not self.layers:
            raise ValueError("a probe needs at least one layer")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def used_layers(self) -> list[int]:
        return [len(self.layers) - 1] if self.strategy == "last" else list(range(len(self.layers)))

    @property
    def t_max(self) -> int:
        return max(self.layers[l].time_feature[0] for l in self.used_layers)

    @property
    def f_max(self) -> int:
        return max(self.layers[l].time_feature[1] for l in self.used_layers)

    @property
    def adapted_layers(self) -> list[int]:
        if self.strategy == "last":
            return []
        grid = (self.t_max, self.f_max)
        return [l for l in self.used_layers if self.layers[l].time_feature != grid]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        f, c = self.f_max, self.num_classes
        shapes: dict[str, tuple[int, ...]] = {}
        for l in self.adapted_layers:
            shapes[f"adapter.{l}.weight"] = (self.layers[l].time_feature[1], f)
            shapes[f"adapter.{l}.bias"] = (f,)
        if self.strategy == "all":
            shapes["layer_weights"] = (len(self.layers),)
        if self.head == "attention":
            for k in nx.ATTENTION_KEYS:
                shapes[f"attn.{k}"] = (f,) if k.startswith("b") else (f, f)
            shapes["norm.gamma"] = (f,)
            shapes["norm.beta"] = (f,)
        shapes["fc.weight"] = (f, c)
        shapes["fc.bias"] = (c,)
        return shapes

    def layer_alpha(self) -> np.ndarray | None:
        if self.strategy != "all":
            return None
        return nx.softmax(self.params["layer_weights"])

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "head": self.head,
            "num_classes": self.num_classes,
            "dropout": self.dropout,
            "t_max": self.t_max,
            "f_max": self.f_max,
            "layers": [s.to_json() for s in self.layers],
            "params": {k: v.tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "ProbeModel":
        model = cls(strategy=d["strategy"], head=d["head"],
                    layers=tuple(LayerSpec.from_json(s) for s in d["layers"]),
                    num_classes=int(d["num_classes"]), dropout=float(d["dropout"]))
        shapes = model.param_shapes()
        if set(d["params"]) != set(shapes):
            raise ValueError("checkpoint parameters do not match the architecture")
        for name, shape in shapes.items():
            arr = np.array(d["params"][name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            model.params[name] = arr
        return model


class IncompatibleError(ValueError):
    """A bank does not fit the model it is paired with."""


def check_compatible(bank, model: ProbeModel) -> None:
    m = bank.manifest
    if tuple(m.layers) != tuple(model.layers):
        raise IncompatibleError("bank layers do not match the model's layers")
    if m.num_classes != model.num_classes:
        raise IncompatibleError(f"bank has {m.num_classes} classes, model predicts {model.num_classes}")


def init_probe(specs, strategy: str, head: str, num_classes: int, rng: np.random.Generator,
               dropout: float = 0.1) -> ProbeModel:
    """Fan-in uniform weights, zero biases, zero layer scores, unit layer-norm gain."""
    model = ProbeModel(strategy=strategy, head=head, layers=tuple(specs), num_classes=num_classes, dropout=dropout)
    for name, shape in model.param_shapes().items():
        if name == "norm.gamma":
            model.params[name] = np.ones(shape)
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            model.params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            model.params[name] = np.zeros(shape)
    return model


def count_parameters(model: ProbeModel) -> int:
    return sum(math.prod(s) for s in model.param_shapes().values())


def _as_batch(model: ProbeModel, layers):
    """Add a batch axis when given one sample; returns (layers, squeezed?)."""
    if len(layers) != len(model.layers):
        raise ValueError(f"expected {len(model.layers)} layer tensors, got {len(layers)}")
    last = model.layers[-1]
    single = np.ndim(layers[-1]) == len(last.shape)
    used = set(model.used_layers)
    out = []
    for l, (spec, x) in enumerate(zip(model.layers, layers)):
        if x is None:
            if l in used:
                raise ValueError(f"layer {spec.name!r} is used by the probe but was not given")
            out.append(None)
            continue
        x = np.asarray(x, dtype=np.float64)
        if single:
            x = x[None]
        if x.shape[1:] != spec.shape:
            raise ValueError(f"layer {spec.name!r} has shape {x.shape[1:]}, expected {spec.shape}")
        out.append(x)
    return out, single


def _sequence_view(spec: LayerSpec, x: np.ndarray) -> np.ndarray:
    return flatten_conv(x) if spec.kind == "conv" else x


def forward(model: ProbeModel, layers, rng: np.random.Generator | None = None, training: bool = False,
            return_cache: bool = False):
    """Logits ``(B, C)`` (or ``(C,)`` for a single unbatched sample).

    ``layers`` holds one tensor per manifest layer; layers the strategy does not
    use may be None.
    Training mode draws dropout masks from ``rng``; eval mode never touches it.
    """
    p = model.params
    batch, single = _as_batch(model, layers)
    cache: dict = {}

    if model.strategy == "last":
        l = model.used_layers[0]
        h = _sequence_view(model.layers[l], batch[l])
    else:
        t_max = model.t_max
        adapted, pre = [], {}
        for l, spec in enumerate(model.layers):
            x = _sequence_view(spec, batch[l])
            if f"adapter.{l}.weight" in p:
                pre[l] = x
                x = adapt_layer(x, p[f"adapter.{l}.weight"], p[f"adapter.{l}.bias"], t_max)
            adapted.append(x)
        alpha = nx.softmax(p["layer_weights"])
        h = aggregate_layers(adapted, p["layer_weights"])
        cache.update(adapted=adapted, pre=pre, alpha=alpha)
    cache["h"] = h

    if model.head == "linear":
        pooled = h.mean(axis=-2)
        logits = nx.linear(pooled, p["fc.weight"], p["fc.bias"])
    else:
        head_params = {k[len("attn."):] if k.startswith("attn.") else k: v for k, v in p.items()}
        logits, head_cache = _attention_head(h, head_params, model.dropout, rng, training)
        cache.update(head_cache)
        pooled = head_cache["pooled"]
    cache["pooled"] = pooled
    nx.check_finite(logits, "logits")

    if single:
        logits = logits[0]
    if return_cache:
        cache["single"] = single
        return logits, cache
    return logits


def backward(model: ProbeModel, cache: dict, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_logits * logits)`` for every parameter."""
    p = model.params
    g: dict[str, np.ndarray] = {}
    if cache["single"]:
        grad_logits = grad_logits[None]
    h = cache["h"]
    t = h.shape[-2]

    gpooled, g["fc.weight"], g["fc.bias"] = nx.linear_backward(cache["pooled"], p["fc.weight"], grad_logits)
    if model.head == "linear":
        gh = np.repeat(gpooled[:, None, :], t, axis=1) / t
    else:
        gpooled = nx.dropout_backward(cache["drop2"], gpooled)
        gz = np.repeat(gpooled[:, None, :], t, axis=1) / t
        gr, g["norm.gamma"], g["norm.beta"] = nx.layernorm_backward(cache["norm"], gz)
        gy = nx.dropout_backward(cache["drop1"], gr)
        attn = {k: p[f"attn.{k}"] for k in nx.ATTENTION_KEYS}
        gx, gattn = nx.self_attention_backward(cache["attn"], attn, gy)
        for k, v in gattn.items():
            g[f"attn.{k}"] = v
        gh = gr + gx

    if model.strategy == "all":
        alpha = cache["alpha"]
        galpha = np.array([np.sum(gh * a) for a in cache["adapted"]])
        g["layer_weights"] = nx.softmax_backward(alpha, galpha)
        for l, x in cache["pre"].items():
            gproj = nx.interpolate_time_backward(alpha[l] * gh, x.shape[-2])
            _, g[f"adapter.{l}.weight"], g[f"adapter.{l}.bias"] = nx.linear_backward(
                x, p[f"adapter.{l}.weight"], gproj)
    return {k: g[k] for k in p}
