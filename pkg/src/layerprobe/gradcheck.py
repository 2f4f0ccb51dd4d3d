"""Finite-difference verification of every backward pass in the package.

Each component is checked on ``instances`` fixed-seed random problems with
entries in [-1, 1]: the scalar ``sum(u * op(x))`` for a random cotangent ``u``
(ops), or the task loss of a batch (probes). Backward functions are looked up
on their modules at call time, so a patched implementation is what gets
checked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from . import numerics as nx
from . import training
from .bank import LayerSpec

OP_TOLERANCE = 1e-6
PROBE_TOLERANCE = 1e-5
DEFAULT_INSTANCES = 20


@dataclass
class CheckResult:
    component: str
    worst: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def _u(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _check_matmul(rng):
    a, b = _u(rng, 2, 3, 4), _u(rng, 4, 2)
    u = _u(rng, 2, 3, 2)
    ga, gb = nx.matmul_backward(a, b, u)
    return nx.gradcheck(lambda: float(np.sum(u * nx.matmul(a, b))), {"a": a, "b": b}, {"a": ga, "b": gb})


def _check_softmax(rng):
    v = _u(rng, 3, 5)
    u = _u(rng, 3, 5)
    g = nx.softmax_backward(nx.softmax(v), u)
    return nx.gradcheck(lambda: float(np.sum(u * nx.softmax(v))), v, g)


def _check_layernorm(rng):
    x, gamma, beta = _u(rng, 2, 3), _u(rng, 3), _u(rng, 3)
    u = _u(rng, 2, 3)
    _, cache = nx.layernorm(x, gamma, beta)
    gx, gg, gb = nx.layernorm_backward(cache, u)

    def f():
        return float(np.sum(u * nx.layernorm(x, gamma, beta)[0]))

    return nx.gradcheck(f, {"x": x, "gamma": gamma, "beta": beta}, {"x": gx, "gamma": gg, "beta": gb})


def _check_interpolate(rng):
    t_in, t_out = int(rng.integers(1, 7)), int(rng.integers(1, 9))
    x = _u(rng, 2, t_in, 3)
    u = _u(rng, 2, t_out, 3)
    g = nx.interpolate_time_backward(u, t_in)
    return nx.gradcheck(lambda: float(np.sum(u * nx.interpolate_time(x, t_out))), x, g)


def _check_dropout(rng):
    x = _u(rng, 4, 5)
    u = _u(rng, 4, 5)
    seed = int(rng.integers(0, 2**31))
    _, scale = nx.dropout(x, 0.3, nx.make_rng(seed), True)
    g = nx.dropout_backward(scale, u)
    return nx.gradcheck(lambda: float(np.sum(u * nx.dropout(x, 0.3, nx.make_rng(seed), True)[0])), x, g)


def _check_attention(rng):
    f = 4
    x = _u(rng, 2, 3, f)
    p = {k: _u(rng, f) if k.startswith("b") else _u(rng, f, f) for k in nx.ATTENTION_KEYS}
    u = _u(rng, 2, 3, f)
    _, cache = nx.self_attention(x, p)
    gx, gp = nx.self_attention_backward(cache, p, u)
    gp["x"] = gx
    return nx.gradcheck(lambda: float(np.sum(u * nx.self_attention(x, p)[0])), {"x": x, **p}, gp)


def _check_ce(rng):
    z = _u(rng, 3, 5) * 3
    y = rng.integers(0, 5, size=3)
    _, g = training.ce_loss(z, y)
    return nx.gradcheck(lambda: float(np.sum(training.ce_loss(z, y)[0])), z, g)


def _check_bce(rng):
    z = _u(rng, 3, 5) * 3
    y = rng.integers(0, 2, size=(3, 5))
    _, g = training.bce_loss(z, y)
    return nx.gradcheck(lambda: float(np.sum(training.bce_loss(z, y)[0])), z, g)


PROBE_LAYERS = (
    LayerSpec("seq_a", "sequence", (3, 4)),
    LayerSpec("conv_b", "conv", (2, 2, 5)),
    LayerSpec("seq_c", "sequence", (4, 3)),
)


def random_probe(rng, strategy: str, head: str, num_classes: int = 3, dropout: float = 0.2,
                 specs=PROBE_LAYERS) -> models.ProbeModel:
    """A probe whose every parameter is drawn from U(-1, 1)."""
    model = models.init_probe(specs, strategy, head, num_classes, rng, dropout=dropout)
    for k, v in model.params.items():
        model.params[k] = _u(rng, *v.shape)
    return model


def probe_loss_check(model: models.ProbeModel, layers, labels, task: str, seed: int) -> float:
    """Worst relative error of the batch-mean task loss gradient, dropout active."""

    def loss():
        logits = models.forward(model, layers, nx.make_rng(seed), training=True)
        return float(np.mean(training.task_loss(task, logits, labels)[0]))

    logits, cache = models.forward(model, layers, nx.make_rng(seed), training=True, return_cache=True)
    _, glogits = training.task_loss(task, logits, labels)
    grads = models.backward(model, cache, glogits / len(labels))
    return nx.gradcheck(loss, model.params, grads)


def _probe_checker(strategy: str, head: str):
    def check(rng):
        model = random_probe(rng, strategy, head)
        layers = [_u(rng, 2, *s.shape) for s in model.layers]
        if rng.random() < 0.5:
            labels, task = rng.integers(0, model.num_classes, size=2), "single_label"
        else:
            labels, task = rng.integers(0, 2, size=(2, model.num_classes)), "multi_label"
        return probe_loss_check(model, layers, labels, task, int(rng.integers(0, 2**31)))

    return check


OP_CHECKS = {
    "matmul": _check_matmul,
    "softmax": _check_softmax,
    "layernorm": _check_layernorm,
    "interpolate_time": _check_interpolate,
    "dropout": _check_dropout,
    "self_attention": _check_attention,
    "ce_loss": _check_ce,
    "bce_loss": _check_bce,
}

PROBE_CHECKS = {f"probe[{s}+{h}]": _probe_checker(s, h) for s in models.STRATEGIES for h in models.HEADS}


def run_suite(instances: int = DEFAULT_INSTANCES, seed: int = 0) -> list[CheckResult]:
    results = []
    for i, (name, check) in enumerate([*OP_CHECKS.items(), *PROBE_CHECKS.items()]):
        tol = OP_TOLERANCE if name in OP_CHECKS else PROBE_TOLERANCE
        rng = nx.make_rng(seed, 1000 + i)
        worst = max(check(rng) for _ in range(instances))
        results.append(CheckResult(name, worst, tol, instances))
    return results
