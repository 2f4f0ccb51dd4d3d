"""Objectives, AdamW, the warmup-cosine schedule and the epoch loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import models
from . import numerics as nx
from .bank import EmbeddingBank
from .models import check_compatible


class CheckpointError(ValueError):
    """A checkpoint file is truncated, malformed or inconsistent."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    warmup_epochs: int = 5
    peak_lr: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- objectives -------------------------------------------------------------


def ce_loss(logits: np.ndarray, target) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy and its gradient wrt the logits.

    Works on ``(C,)`` with a scalar target or ``(B, C)`` with ``(B,)`` targets.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    c = logits.shape[-1]
    if np.any(target < 0) or np.any(target >= c):
        raise ValueError(f"target out of range [0, {c})")
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    loss = nx.logsumexp(logits) - np.sum(logits * onehot, axis=-1)
    return loss, nx.softmax(logits) - onehot


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_loss(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class-averaged binary cross-entropy with logits and its gradient."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets)
    if y.shape != z.shape:
        raise ValueError(f"targets shape {y.shape} does not match logits {z.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce targets must be 0 or 1")
    y = y.astype(np.float64)
    c = z.shape[-1]
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return per.mean(axis=-1), (sigmoid(z) - y) / c


def task_loss(task: str, logits, labels):
    return ce_loss(logits, labels) if task == "single_label" else bce_loss(logits, labels)


# -- schedule and optimizer -------------------------------------------------


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` over ``warmup_epochs``, then half-cosine decay."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.peak_lr * (epoch + 1) / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def to_json(self) -> dict:
        return {"t": self.t,
                "m": {k: a.tolist() for k, a in self.m.items()},
                "v": {k: a.tolist() for k, a in self.v.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "OptimState":
        return cls(m={k: np.array(a, dtype=np.float64) for k, a in d["m"].items()},
                   v={k: np.array(a, dtype=np.float64) for k, a in d["v"].items()},
                   t=int(d["t"]))


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
               lr: float, cfg: TrainConfig) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update, in place; returns ``params``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {theta.shape}")
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * cfg.weight_decay * theta
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params


# -- run state --------------------------------------------------------------


@dataclass
class RunState:
    model: models.ProbeModel
    optim: OptimState
    config: TrainConfig
    rng: np.random.Generator
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def finished(self) -> bool:
        return self.epoch >= self.config.epochs

    def to_json(self) -> dict:
        return {
            "format": "layerprobe-checkpoint",
            "version": 1,
            "epoch": self.epoch,
            "config": self.config.to_json(),
            "model": self.model.to_json(),
            "optimizer": self.optim.to_json(),
            "rng_state": self.rng.bit_generator.state,
            "history": self.history,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RunState":
        rng = np.random.Generator(np.random.PCG64(0))
        rng.bit_generator.state = d["rng_state"]
        return cls(model=models.ProbeModel.from_json(d["model"]), optim=OptimState.from_json(d["optimizer"]),
                   config=TrainConfig.from_json(d["config"]), rng=rng, epoch=int(d["epoch"]),
                   history=list(d["history"]))


def dumps_json(doc) -> str:
    """Canonical JSON text: sorted keys, shortest round-trip floats, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def checkpoint(run: RunState, path) -> None:
    Path(path).write_text(dumps_json(run.to_json()), encoding="utf-8", newline="\n")


def restore(path) -> RunState:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != "layerprobe-checkpoint":
            raise CheckpointError(f"{path}: not a checkpoint file")
        return RunState.from_json(doc)
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


# -- training loop ----------------------------------------------------------

INIT_STREAM = 10
TRAIN_STREAM = 11


def new_run(bank: EmbeddingBank, strategy: str, head: str, cfg: TrainConfig) -> RunState:
    """Fresh model (initialized from ``cfg.seed``) and optimizer state."""
    model = models.init_probe(bank.manifest.layers, strategy, head, bank.manifest.num_classes,
                              nx.make_rng(cfg.seed, INIT_STREAM), dropout=cfg.dropout)
    return RunState(model=model, optim=OptimState(), config=cfg, rng=nx.make_rng(cfg.seed, TRAIN_STREAM))


def run_epochs(run: RunState, bank: EmbeddingBank, stop_after: int | None = None, callback=None) -> RunState:
    """Continue ``run`` on ``bank`` until ``stop_after`` epochs (default: all) are done."""
    check_compatible(bank, run.model)
    cfg = run.config
    end = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    n = bank.num_samples
    task = bank.manifest.task
    used = run.model.used_layers
    data = [bank.layer(l) if l in used else None for l in range(bank.num_layers)]
    labels = np.asarray(bank.labels)
    while run.epoch < end:
        lr = lr_at(run.epoch, cfg)
        order = run.rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [None if d is None else d[idx] for d in data]
            logits, cache = models.forward(run.model, batch, run.rng, training=True, return_cache=True)
            loss, glogits = task_loss(task, logits, labels[idx])
            total += float(np.sum(loss))
            grads = models.backward(run.model, cache, glogits / len(idx))
            adamw_step(run.model.params, grads, run.optim, lr, cfg)
        run.history.append({"epoch": run.epoch, "lr": lr, "loss": total / n})
        run.epoch += 1
        if callback is not None:
            callback(run)
    return run


def train(bank: EmbeddingBank, model: models.ProbeModel, cfg: TrainConfig, stop_after: int | None = None,
          callback=None) -> RunState:
    """Train ``model`` (updated in place) on ``bank`` with ``cfg``."""
    check_compatible(bank, model)
    if model.dropout != cfg.dropout:
        model.dropout = cfg.dropout
    run = RunState(model=model, optim=OptimState(), config=cfg, rng=nx.make_rng(cfg.seed, TRAIN_STREAM))
    return run_epochs(run, bank, stop_after=stop_after, callback=callback)
