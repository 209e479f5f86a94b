"""Declarative tiny networks: specs, deterministic init, forward, checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import DataError, DimensionError, SpecError
from .tensor import Tensor

INPUT_KINDS = ("image2d", "waveform1d", "flat")
LAYER_KINDS = ("dense", "conv2d", "conv1d", "relu", "maxpool", "flatten", "globalavgpool")


@dataclass(frozen=True)
class Layer:
    kind: str
    out: int = 0  # dense units or conv filters
    k: int = 0
    stride: int = 1
    pad: int = 0

    @classmethod
    def dense(cls, out: int) -> "Layer":
        return cls("dense", out=out)

    @classmethod
    def conv2d(cls, filters: int, k: int, stride: int = 1, pad: int = 0) -> "Layer":
        return cls("conv2d", out=filters, k=k, stride=stride, pad=pad)

    @classmethod
    def conv1d(cls, filters: int, k: int, stride: int = 1, pad: int = 0) -> "Layer":
        return cls("conv1d", out=filters, k=k, stride=stride, pad=pad)

    @classmethod
    def relu(cls) -> "Layer":
        return cls("relu")

    @classmethod
    def maxpool(cls, k: int) -> "Layer":
        return cls("maxpool", k=k)

    @classmethod
    def flatten(cls) -> "Layer":
        return cls("flatten")

    @classmethod
    def globalavgpool(cls) -> "Layer":
        return cls("globalavgpool")


@dataclass(frozen=True)
class ModelSpec:
    input_kind: str
    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    num_classes: int
    init_seed: int = 0
    name: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["layers"] = [asdict(layer) for layer in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_kind=d["input_kind"],
            input_shape=tuple(int(s) for s in d["input_shape"]),
            layers=tuple(Layer(**layer) for layer in d["layers"]),
            num_classes=int(d["num_classes"]),
            init_seed=int(d.get("init_seed", 0)),
            name=d.get("name", ""),
        )


def infer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-layer output shapes (without batch axis); raises SpecError on any mismatch."""
    if spec.input_kind not in INPUT_KINDS:
        raise SpecError(f"unknown input_kind {spec.input_kind!r}")
    expected_rank = {"image2d": 3, "waveform1d": 2, "flat": 1}[spec.input_kind]
    shape = tuple(spec.input_shape)
    if len(shape) != expected_rank or any(s <= 0 for s in shape):
        raise SpecError(f"{spec.input_kind} input needs {expected_rank} positive dims, got {shape}")
    if spec.num_classes < 1:
        raise SpecError("num_classes must be positive")
    shapes = []
    for i, layer in enumerate(spec.layers):
        where = f"layer {i} ({layer.kind})"
        if layer.kind not in LAYER_KINDS:
            raise SpecError(f"{where}: unknown layer kind")
        if layer.kind == "dense":
            if len(shape) != 1:
                raise SpecError(f"{where}: needs flat input, got {shape}; add flatten/globalavgpool")
            if layer.out < 1:
                raise SpecError(f"{where}: out must be positive")
            shape = (layer.out,)
        elif layer.kind in ("conv2d", "conv1d"):
            rank = 3 if layer.kind == "conv2d" else 2
            if len(shape) != rank:
                raise SpecError(f"{where}: expects rank-{rank} feature map, got {shape}")
            if layer.out < 1 or layer.k < 1 or layer.stride < 1 or layer.pad < 0:
                raise SpecError(f"{where}: invalid filters/k/stride/pad")
            spatial = []
            for s in shape[1:]:
                if layer.k > s + 2 * layer.pad:
                    raise SpecError(f"{where}: kernel {layer.k} larger than padded input {s + 2 * layer.pad}")
                spatial.append((s + 2 * layer.pad - layer.k) // layer.stride + 1)
            shape = (layer.out, *spatial)
        elif layer.kind == "maxpool":
            if len(shape) not in (2, 3) or layer.k < 1 or any(layer.k > s for s in shape[1:]):
                raise SpecError(f"{where}: window {layer.k} does not fit {shape}")
            shape = (shape[0], *(s // layer.k for s in shape[1:]))
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "globalavgpool":
            if len(shape) < 2:
                raise SpecError(f"{where}: needs a spatial feature map, got {shape}")
            shape = (shape[0],)
        shapes.append(shape)
    if shape != (spec.num_classes,):
        raise SpecError(f"network output {shape} != ({spec.num_classes},) logits")
    return shapes


def _param_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter, in layer order."""
    out = []
    shape = tuple(spec.input_shape)
    for i, (layer, next_shape) in enumerate(zip(spec.layers, infer_shapes(spec))):
        if layer.kind == "dense":
            out.append((f"{i}.weight", (shape[0], layer.out), shape[0]))
            out.append((f"{i}.bias", (layer.out,), 0))
        elif layer.kind == "conv2d":
            out.append((f"{i}.weight", (layer.out, shape[0], layer.k, layer.k), shape[0] * layer.k * layer.k))
            out.append((f"{i}.bias", (layer.out,), 0))
        elif layer.kind == "conv1d":
            out.append((f"{i}.weight", (layer.out, shape[0], layer.k), shape[0] * layer.k))
            out.append((f"{i}.bias", (layer.out,), 0))
        shape = next_shape
    return out


class Network:
    """An instantiated :class:`ModelSpec` with named parameter tensors."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.spec.input_shape)

    def __call__(self, x) -> Tensor:
        return forward(self, x)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool = True) -> "Network":
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self, requires_grad: bool | None = None) -> "Network":
        params = {}
        for name, p in self.params.items():
            flag = p.requires_grad if requires_grad is None else requires_grad
            params[name] = Tensor(p.data, requires_grad=flag)
        return Network(self.spec, params)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise SpecError("state keys do not match network parameters")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise DimensionError(f"{name}: shape {state[name].shape} != {p.shape}")
            self.params[name] = Tensor(state[name], requires_grad=p.requires_grad)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def build(spec: ModelSpec) -> Network:
    """Instantiate ``spec`` with He-normal weights (std sqrt(2/fan_in)) and zero biases."""
    gen = rngmod.stream(spec.init_seed, rngmod.INIT)
    params = {}
    for name, shape, fan_in in _param_shapes(spec):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = gen.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        params[name] = Tensor(data, requires_grad=True)
    return Network(spec, params)


def forward(net: Network, x) -> Tensor:
    x = T.as_tensor(x)
    want = net.input_shape
    if x.ndim != len(want) + 1 or tuple(x.shape[1:]) != want:
        raise DimensionError(f"input shape {x.shape} does not match N×{want}")
    h = x
    for i, layer in enumerate(net.spec.layers):
        kind = layer.kind
        if kind == "dense":
            h = T.add(T.matmul(h, net.params[f"{i}.weight"]), net.params[f"{i}.bias"])
        elif kind == "conv2d":
            h = T.conv2d(h, net.params[f"{i}.weight"], net.params[f"{i}.bias"], layer.stride, layer.pad)
        elif kind == "conv1d":
            h = T.conv1d(h, net.params[f"{i}.weight"], net.params[f"{i}.bias"], layer.stride, layer.pad)
        elif kind == "relu":
            h = T.relu(h)
        elif kind == "maxpool":
            h = T.max_pool2d(h, layer.k) if h.ndim == 4 else T.max_pool1d(h, layer.k)
        elif kind == "flatten":
            h = T.flatten(h)
        elif kind == "globalavgpool":
            h = T.global_avg_pool(h)
    return h


def predict(net: Network, x, batch_size: int = 256) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(forward(net, x[start : start + batch_size]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# -- presets --------------------------------------------------------------
def student2d(num_classes: int, image_side: int = 32, channels: int = 3, seed: int = 0) -> ModelSpec:
    return ModelSpec(
        "image2d",
        (channels, image_side, image_side),
        (
            Layer.conv2d(8, 3, pad=1),
            Layer.relu(),
            Layer.maxpool(2),
            Layer.conv2d(12, 3, pad=1),
            Layer.relu(),
            Layer.maxpool(2),
            Layer.conv2d(16, 3, pad=1),
            Layer.relu(),
            Layer.globalavgpool(),
            Layer.dense(num_classes),
        ),
        num_classes,
        seed,
        "student2d",
    )


def teacher2d(num_classes: int, image_side: int = 32, channels: int = 3, seed: int = 0) -> ModelSpec:
    side = image_side // 8
    return ModelSpec(
        "image2d",
        (channels, image_side, image_side),
        (
            Layer.conv2d(16, 3, pad=1),
            Layer.relu(),
            Layer.maxpool(2),
            Layer.conv2d(32, 3, pad=1),
            Layer.relu(),
            Layer.maxpool(2),
            Layer.conv2d(32, 3, pad=1),
            Layer.relu(),
            Layer.maxpool(2),
            Layer.flatten(),
            Layer.dense(48 if side >= 4 else 64),
            Layer.relu(),
            Layer.dense(num_classes),
        ),
        num_classes,
        seed,
        "teacher2d",
    )


def student1d(num_classes: int, length: int = 256, channels: int = 1, seed: int = 0) -> ModelSpec:
    return ModelSpec(
        "waveform1d",
        (channels, length),
        (
            Layer.conv1d(8, 9, stride=2, pad=4),
            Layer.relu(),
            Layer.maxpool(4),
            Layer.conv1d(16, 3, pad=1),
            Layer.relu(),
            Layer.globalavgpool(),
            Layer.dense(num_classes),
        ),
        num_classes,
        seed,
        "student1d",
    )


def teacher1d(num_classes: int, length: int = 256, channels: int = 1, seed: int = 0) -> ModelSpec:
    return ModelSpec(
        "waveform1d",
        (channels, length),
        (
            Layer.conv1d(32, 9, stride=2, pad=4),
            Layer.relu(),
            Layer.maxpool(2),
            Layer.conv1d(64, 3, pad=1),
            Layer.relu(),
            Layer.maxpool(2),
            Layer.conv1d(64, 3, pad=1),
            Layer.relu(),
            Layer.globalavgpool(),
            Layer.dense(64),
            Layer.relu(),
            Layer.dense(num_classes),
        ),
        num_classes,
        seed,
        "teacher1d",
    )


PRESETS = {
    "student2d": student2d,
    "teacher2d": teacher2d,
    "student1d": student1d,
    "teacher1d": teacher1d,
}


def preset(name: str, num_classes: int, input_shape: tuple[int, ...], seed: int = 0) -> ModelSpec:
    if name not in PRESETS:
        raise SpecError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if name.endswith("2d"):
        channels, side, _ = input_shape
        return PRESETS[name](num_classes, image_side=side, channels=channels, seed=seed)
    channels, length = input_shape
    return PRESETS[name](num_classes, length=length, channels=channels, seed=seed)


def with_seed(spec: ModelSpec, seed: int) -> ModelSpec:
    return replace(spec, init_seed=seed)


# -- checkpoints ----------------------------------------------------------
def save_checkpoint(net: Network, directory) -> Path:
    """Write ``manifest.json`` plus one ODT1 blob per parameter."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in net.params.items():
        fname = f"{name}.odt"
        T.save_tensor(d / fname, p)
        entries.append({"name": name, "shape": list(p.shape), "file": fname})
    manifest = {"format": "okd-forge-checkpoint/1", "spec": net.spec.to_dict(), "params": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory, requires_grad: bool = False) -> Network:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {d}: {exc}") from None
    spec = ModelSpec.from_dict(manifest["spec"])
    expected = {name: shape for name, shape, _ in _param_shapes(spec)}
    params = {}
    for entry in manifest["params"]:
        t = T.load_tensor(d / entry["file"])
        if tuple(t.shape) != tuple(entry["shape"]) or expected.get(entry["name"]) != tuple(t.shape):
            raise SpecError(f"checkpoint parameter {entry['name']} has unexpected shape {t.shape}")
        params[entry["name"]] = Tensor(t.data, requires_grad=requires_grad)
    if set(params) != set(expected):
        raise SpecError("checkpoint parameters do not match its spec")
    return Network(spec, {name: params[name] for name in expected})
