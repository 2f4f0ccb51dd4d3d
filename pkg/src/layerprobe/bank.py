"""On-disk embedding banks: per-layer activations of a frozen encoder plus labels.

A bank is a directory::

    manifest.json   version, num_samples, layers, task, num_classes, dtype
    layer_<i>.bin   little-endian float32, row-major, samples concatenated
    labels.bin      uint32 class index per sample (single_label) or
                    N x C bytes in {0, 1} (multi_label)
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import make_rng

MANIFEST = "manifest.json"
LABELS = "labels.bin"
FORMAT_VERSION = 1
DTYPE = "f32le"
TASKS = ("single_label", "multi_label")
KINDS = ("sequence", "conv")

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


class BankError(ValueError):
    """A bank directory is missing, malformed or inconsistent with its manifest."""


def layer_file(i: int) -> str:
    return f"layer_{i}.bin"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if self.kind not in KINDS:
            raise ValueError(f"layer {self.name!r}: kind must be one of {KINDS}, got {self.kind!r}")
        arity = 2 if self.kind == "sequence" else 3
        if len(self.shape) != arity:
            raise ValueError(f"layer {self.name!r}: {self.kind} layers need {arity} dims, got {list(self.shape)}")
        if any(d < 1 for d in self.shape):
            raise ValueError(f"layer {self.name!r}: all dims must be >= 1, got {list(self.shape)}")

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def time_feature(self) -> tuple[int, int]:
        """(time, feature) after conv flattening: width is time, channel x height is feature."""
        if self.kind == "sequence":
            return self.shape[0], self.shape[1]
        d1, d2, d3 = self.shape
        return d3, d1 * d2

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind, "shape": list(self.shape)}

    @classmethod
    def from_json(cls, d: dict) -> "LayerSpec":
        return cls(name=str(d["name"]), kind=d["kind"], shape=tuple(d["shape"]))


@dataclass(frozen=True)
class BankManifest:
    num_samples: int
    layers: tuple[LayerSpec, ...]
    task: str
    num_classes: int
    version: int = FORMAT_VERSION
    dtype: str = DTYPE

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.version != FORMAT_VERSION:
            raise ValueError(f"unsupported bank version {self.version}")
        if self.dtype != DTYPE:
            raise ValueError(f"unsupported dtype {self.dtype!r}, expected {DTYPE!r}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if not self.layers:
            raise ValueError("a bank needs at least one layer")
        names = [s.name for s in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique, got {names}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "num_samples": self.num_samples,
            "layers": [s.to_json() for s in self.layers],
            "task": self.task,
            "num_classes": self.num_classes,
            "dtype": self.dtype,
        }

    @classmethod
    def from_json(cls, d: dict) -> "BankManifest":
        return cls(
            num_samples=int(d["num_samples"]),
            layers=tuple(LayerSpec.from_json(s) for s in d["layers"]),
            task=d["task"],
            num_classes=int(d["num_classes"]),
            version=int(d["version"]),
            dtype=d["dtype"],
        )

    def label_bytes(self) -> int:
        return self.num_samples * (4 if self.task == "single_label" else self.num_classes)


class EmbeddingBank:
    """Per-layer activations and labels, in memory or memory-mapped from disk.

    ``layers[l]`` has shape ``(N, *manifest.layers[l].shape)`` and may be
    float32 (on disk) or float64 (in memory); every accessor upcasts to float64.
    """

    def __init__(self, manifest: BankManifest, layers, labels: np.ndarray, path: Path | None = None):
        self.manifest = manifest
        self._layers = list(layers)
        self.labels = labels
        self.path = path

    @classmethod
    def from_arrays(cls, arrays, labels, task: str | None = None, num_classes: int | None = None,
                    names=None, kinds=None) -> "EmbeddingBank":
        arrays = [np.ascontiguousarray(a, dtype=np.float64) for a in arrays]
        labels = np.asarray(labels)
        if task is None:
            task = "multi_label" if labels.ndim == 2 else "single_label"
        if num_classes is None:
            num_classes = labels.shape[1] if task == "multi_label" else int(labels.max()) + 1
        names = names or [f"layer{i}" for i in range(len(arrays))]
        kinds = kinds or ["conv" if a.ndim == 4 else "sequence" for a in arrays]
        specs = tuple(LayerSpec(n, k, a.shape[1:]) for n, k, a in zip(names, kinds, arrays))
        manifest = BankManifest(num_samples=len(labels), layers=specs, task=task, num_classes=int(num_classes))
        _check_conformance(manifest, arrays, labels)
        return cls(manifest, arrays, labels)

    @property
    def num_samples(self) -> int:
        return self.manifest.num_samples

    @property
    def num_layers(self) -> int:
        return len(self.manifest.layers)

    def get(self, i: int, l: int) -> np.ndarray:
        return np.array(self._layers[l][i], dtype=np.float64)

    def layer(self, l: int, index=None) -> np.ndarray:
        """Layer ``l`` for all samples (or ``index``) as a float64 array."""
        src = self._layers[l] if index is None else self._layers[l][index]
        return np.array(src, dtype=np.float64)

    def batch(self, index) -> list[np.ndarray]:
        return [self.layer(l, index) for l in range(self.num_layers)]

    def subset(self, index) -> "EmbeddingBank":
        index = np.asarray(index)
        m = self.manifest
        manifest = BankManifest(num_samples=len(index), layers=m.layers, task=m.task, num_classes=m.num_classes)
        return EmbeddingBank(manifest, [a[index] for a in self._layers], self.labels[index])


def _check_conformance(manifest: BankManifest, tensors, labels) -> None:
    n = manifest.num_samples
    if len(tensors) != len(manifest.layers):
        raise ValueError(f"{len(tensors)} layer tensors for {len(manifest.layers)} manifest layers")
    for i, (spec, t) in enumerate(zip(manifest.layers, tensors)):
        want = (n, *spec.shape)
        if tuple(t.shape) != want:
            raise ValueError(f"layer {i} ({spec.name}) has shape {tuple(t.shape)}, expected {want}")
        if not np.all(np.isfinite(t)):
            raise ValueError(f"layer {i} ({spec.name}) contains non-finite values")
    labels = np.asarray(labels)
    if manifest.task == "single_label":
        if labels.shape != (n,):
            raise ValueError(f"single_label labels must have shape ({n},), got {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= manifest.num_classes):
            raise ValueError(f"labels must lie in [0, {manifest.num_classes})")
    else:
        if labels.shape != (n, manifest.num_classes):
            raise ValueError(f"multi_label labels must have shape ({n}, {manifest.num_classes}), got {labels.shape}")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("multi_label labels must be 0 or 1")


def write_bank(manifest: BankManifest, tensors, labels, path) -> None:
    """Write a bank directory; tensors are cast to little-endian float32."""
    _check_conformance(manifest, tensors, labels)
    f32 = [np.ascontiguousarray(t, dtype=_F32) for t in tensors]
    for i, t in enumerate(f32):
        if not np.all(np.isfinite(t)):
            raise ValueError(f"layer {i} overflows float32")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / MANIFEST, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest.to_json(), fh, indent=2)
        fh.write("\n")
    for i, t in enumerate(f32):
        (path / layer_file(i)).write_bytes(t.tobytes(order="C"))
    lab = np.asarray(labels)
    if manifest.task == "single_label":
        raw = lab.astype(_U32).tobytes()
    else:
        raw = lab.astype(np.uint8).tobytes()
    (path / LABELS).write_bytes(raw)


def _load_manifest(path: Path) -> BankManifest:
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise BankError(f"{mpath}: missing manifest")
    try:
        with open(mpath, encoding="utf-8") as fh:
            return BankManifest.from_json(json.load(fh))
    except (KeyError, TypeError, ValueError) as exc:
        raise BankError(f"{mpath}: invalid manifest: {exc}") from exc


def _scan(path: Path, manifest: BankManifest) -> list[str]:
    """All invariant violations, each naming the file (and offset where useful)."""
    problems = []
    n = manifest.num_samples
    for i, spec in enumerate(manifest.layers):
        fpath = path / layer_file(i)
        if not fpath.is_file():
            problems.append(f"{fpath}: missing layer file")
            continue
        want = n * spec.size * 4
        got = os.path.getsize(fpath)
        if got != want:
            problems.append(f"{fpath}: size mismatch, expected {want} bytes, found {got}")
            continue
        data = np.memmap(fpath, dtype=_F32, mode="r") if want else np.zeros(0, _F32)
        bad = np.flatnonzero(~np.isfinite(data))
        if bad.size:
            problems.append(f"{fpath}: non-finite value at byte offset {int(bad[0]) * 4}")
        del data
    lpath = path / LABELS
    if not lpath.is_file():
        problems.append(f"{lpath}: missing labels file")
        return problems
    want = manifest.label_bytes()
    got = os.path.getsize(lpath)
    if got != want:
        problems.append(f"{lpath}: size mismatch, expected {want} bytes, found {got}")
        return problems
    if manifest.task == "single_label":
        lab = np.fromfile(lpath, dtype=_U32)
        bad = np.flatnonzero(lab >= manifest.num_classes)
        if bad.size:
            problems.append(f"{lpath}: label {int(lab[bad[0]])} out of range [0, {manifest.num_classes}) "
                            f"at byte offset {int(bad[0]) * 4}")
    else:
        lab = np.fromfile(lpath, dtype=np.uint8)
        bad = np.flatnonzero(lab > 1)
        if bad.size:
            problems.append(f"{lpath}: label byte {int(lab[bad[0]])} is not 0/1 at byte offset {int(bad[0])}")
    return problems


def validate_bank(path) -> list[str]:
    """Human-readable violations; an empty list means the bank is valid."""
    path = Path(path)
    try:
        manifest = _load_manifest(path)
    except BankError as exc:
        return [str(exc)]
    return _scan(path, manifest)


def read_bank(path) -> EmbeddingBank:
    """Open a bank after checking every invariant; layer payloads stay memory-mapped."""
    path = Path(path)
    manifest = _load_manifest(path)
    problems = _scan(path, manifest)
    if problems:
        raise BankError("; ".join(problems))
    n = manifest.num_samples
    layers = [np.memmap(path / layer_file(i), dtype=_F32, mode="r", shape=(n, *spec.shape))
              for i, spec in enumerate(manifest.layers)]
    if manifest.task == "single_label":
        labels = np.fromfile(path / LABELS, dtype=_U32).astype(np.int64)
    else:
        labels = np.fromfile(path / LABELS, dtype=np.uint8).reshape(n, manifest.num_classes).astype(np.int64)
    return EmbeddingBank(manifest, layers, labels, path=path)


# -- synthetic banks --------------------------------------------------------

_PROTOTYPE_STREAM = 1
_NOISE_STREAM = 2


@dataclass(frozen=True)
class SynthSpec:
    """Planted-signal bank: unit-norm class prototypes, scaled by ``snr``, are
    added to one layer inside ``[t0, t1)`` of its time axis on top of N(0, 1)
    noise everywhere.

    ``prototype_seed`` (defaults to ``seed``) lets a train and a test bank share
    prototypes while drawing independent noise.
    """

    layers: tuple[LayerSpec, ...]
    num_samples: int
    num_classes: int
    task: str
    informative_layer: int
    snr: float
    seed: int
    time_window: tuple[int, int] | None = None
    prototype_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("layers: at least one layer is required")
        if self.num_samples < 1:
            raise ValueError("num_samples: must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes: must be >= 2")
        if self.task not in TASKS:
            raise ValueError(f"task: must be one of {TASKS}")
        if not 0 <= self.informative_layer < len(self.layers):
            raise ValueError(f"informative_layer: {self.informative_layer} is not a layer index "
                             f"(bank has {len(self.layers)} layers)")
        if not (self.snr >= 0 and math.isfinite(self.snr)):
            raise ValueError("snr: must be a finite non-negative number")
        if self.seed < 0 or (self.prototype_seed is not None and self.prototype_seed < 0):
            raise ValueError("seed: must be non-negative")
        t_len = self.layers[self.informative_layer].time_feature[0]
        if self.time_window is None:
            object.__setattr__(self, "time_window", (0, t_len))
        t0, t1 = (int(v) for v in self.time_window)
        object.__setattr__(self, "time_window", (t0, t1))
        if not 0 <= t0 < t1 <= t_len:
            raise ValueError(f"time_window: [{t0}, {t1}) is not a non-empty window within [0, {t_len})")

    @classmethod
    def from_json(cls, d: dict) -> "SynthSpec":
        known = {"layers", "num_samples", "num_classes", "task", "informative_layer", "snr", "seed",
                 "time_window", "prototype_seed"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"{unknown[0]}: unknown field")
        missing = sorted({"layers", "num_samples", "num_classes", "task", "informative_layer", "snr", "seed"} - set(d))
        if missing:
            raise ValueError(f"{missing[0]}: required field is missing")
        window = d.get("time_window")
        return cls(
            layers=tuple(LayerSpec.from_json(s) for s in d["layers"]),
            num_samples=int(d["num_samples"]),
            num_classes=int(d["num_classes"]),
            task=d["task"],
            informative_layer=int(d["informative_layer"]),
            snr=float(d["snr"]),
            seed=int(d["seed"]),
            time_window=None if window is None else tuple(window),
            prototype_seed=None if d.get("prototype_seed") is None else int(d["prototype_seed"]),
        )

    def to_json(self) -> dict:
        doc = {"layers": [s.to_json() for s in self.layers], "num_samples": self.num_samples,
               "num_classes": self.num_classes, "task": self.task, "informative_layer": self.informative_layer,
               "snr": self.snr, "seed": self.seed, "time_window": list(self.time_window)}
        if self.prototype_seed is not None:
            doc["prototype_seed"] = self.prototype_seed
        return doc

    def manifest(self) -> BankManifest:
        return BankManifest(num_samples=self.num_samples, layers=self.layers, task=self.task,
                            num_classes=self.num_classes)


def class_prototypes(spec: SynthSpec) -> np.ndarray:
    """``(C, F)`` unit-norm prototypes for the informative layer's feature axis."""
    seed = spec.seed if spec.prototype_seed is None else spec.prototype_seed
    rng = make_rng(seed, _PROTOTYPE_STREAM)
    feat = spec.layers[spec.informative_layer].time_feature[1]
    protos = rng.standard_normal((spec.num_classes, feat))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def synth_arrays(spec: SynthSpec) -> tuple[list[np.ndarray], np.ndarray]:
    """Float64 layer tensors and labels for ``spec`` (before float32 storage)."""
    n, c = spec.num_samples, spec.num_classes
    protos = class_prototypes(spec)
    rng = make_rng(spec.seed, _NOISE_STREAM)
    classes = np.arange(n) % c
    tensors = [rng.standard_normal((n, *s.shape)) for s in spec.layers]
    t0, t1 = spec.time_window
    target = spec.layers[spec.informative_layer]
    shift = spec.snr * protos[classes]  # (N, F)
    x = tensors[spec.informative_layer]
    if target.kind == "sequence":
        x[:, t0:t1, :] += shift[:, None, :]
    else:
        d1, d2, _ = target.shape
        x[:, :, :, t0:t1] += shift.reshape(n, d1, d2)[..., None]
    if spec.task == "single_label":
        labels = classes
    else:
        labels = np.zeros((n, c), dtype=np.int64)
        labels[np.arange(n), classes] = 1
    return tensors, labels


def synth_bank(spec: SynthSpec, path) -> None:
    tensors, labels = synth_arrays(spec)
    write_bank(spec.manifest(), tensors, labels, path)
