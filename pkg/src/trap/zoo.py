"""Small CNN architectures, training, feature taps and checkpoint files."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from trap import engine
from trap.engine import ComputeGraph, GraphError

CHECKPOINT_MAGIC = b"TRAPCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message, record=None):
        self.record = record
        where = "" if record is None else f"record {record}: "
        super().__init__(where + message)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"training loss became non-finite in epoch {epoch}")


@dataclass
class LayerSpec:
    layer_id: str
    kind: str
    hyperparams: dict = field(default_factory=dict)


@dataclass
class ArchDescriptor:
    name: str
    layers: list
    input_shape: tuple = (1, 28, 28)
    num_classes: int = 10
    default_tap: str | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchDescriptor":
        d = json.loads(text)
        layers = [LayerSpec(**l) for l in d.pop("layers")]
        return cls(layers=layers, input_shape=tuple(d.pop("input_shape")), **d)


def _block(i, cin, cout, k, pool=True):
    specs = [
        LayerSpec(f"conv{i}", "conv2d", dict(in_channels=cin, out_channels=cout, kernel_size=k, padding=k // 2)),
        LayerSpec(f"relu{i}", "relu"),
    ]
    if pool:
        specs.append(LayerSpec(f"pool{i}", "maxpool2d", dict(kernel_size=2)))
    return specs


def cnn3() -> ArchDescriptor:
    """Three conv blocks, 16/32/64 channels, one linear head."""
    layers = _block(1, 1, 16, 3) + _block(2, 16, 32, 3) + _block(3, 32, 64, 3)
    layers += [LayerSpec("flatten", "flatten"), LayerSpec("fc", "linear", dict(in_features=576, out_features=10))]
    return ArchDescriptor("cnn3", layers, default_tap="relu2")


def cnn4() -> ArchDescriptor:
    """Four conv blocks, 8/16/32/64 channels (5x5 stem), two linear layers."""
    layers = _block(1, 1, 8, 5, pool=False) + _block(2, 8, 16, 3) + _block(3, 16, 32, 3) + _block(4, 32, 64, 3)
    layers += [
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc1", "linear", dict(in_features=576, out_features=64)),
        LayerSpec("relu5", "relu"),
        LayerSpec("fc2", "linear", dict(in_features=64, out_features=10)),
    ]
    return ArchDescriptor("cnn4", layers, default_tap="relu2")


ARCHITECTURES = {"cnn3": cnn3, "cnn4": cnn4}


def get_arch(name: str) -> ArchDescriptor:
    try:
        return ARCHITECTURES[name]()
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; known: {sorted(ARCHITECTURES)}") from None


def validate_arch(arch: ArchDescriptor) -> None:
    allowed = {"conv2d", "relu", "maxpool2d", "linear", "flatten"}
    for spec in arch.layers:
        if spec.kind not in allowed:
            raise GraphError(spec.layer_id, f"layer kind {spec.kind!r} not allowed in an architecture")
    kinds = [s.kind for s in arch.layers]
    if "conv2d" not in kinds:
        first = arch.layers[0].layer_id if arch.layers else None
        raise GraphError(first, "architecture needs at least one conv2d layer")
    if "linear" not in kinds:
        raise GraphError(arch.layers[-1].layer_id, "architecture needs at least one linear layer")
    if kinds[-1] != "linear":
        raise GraphError(arch.layers[-1].layer_id, "final layer must be linear and emit the class logits")


def _make_layers(arch: ArchDescriptor):
    layers = []
    for spec in arch.layers:
        cls = engine.LAYER_KINDS[spec.kind]
        try:
            layers.append(cls(spec.layer_id, **spec.hyperparams))
        except TypeError as exc:
            raise GraphError(spec.layer_id, f"bad hyperparameters {spec.hyperparams}: {exc}") from None
    return layers


def build_model(arch: ArchDescriptor, seed: int) -> ComputeGraph:
    """Fresh graph with He-uniform weights (bound sqrt(6 / fan_in)) and zero biases."""
    validate_arch(arch)
    layers = _make_layers(arch)
    rng = np.random.default_rng(seed)
    for layer in layers:
        if "weight" in layer.params:
            w = layer.params["weight"]
            fan_in = int(np.prod(w.shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            layer.params["weight"] = rng.uniform(-bound, bound, size=w.shape).astype(np.float32)
            layer.params["bias"] = np.zeros_like(layer.params["bias"], dtype=np.float32)
    return ComputeGraph(layers, arch.input_shape, arch.num_classes, arch.name, arch=arch)


def predict(graph: ComputeGraph, x, batch_size=500) -> np.ndarray:
    """Argmax labels; ties go to the lowest class index."""
    out = []
    for i in range(0, len(x), batch_size):
        logits, _ = engine.evaluate_graph(graph, x[i : i + batch_size])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(graph, dataset) -> float:
    return float(np.mean(predict(graph, dataset.images) == dataset.labels))


@dataclass
class TrainingMetadata:
    seed: int
    epochs: int
    lr: float
    momentum: float
    batch_size: int
    train_accuracy: float
    test_accuracy: float | None = None


def train_model(graph, dataset, epochs, lr=0.05, momentum=0.9, seed=0, batch_size=32, test_set=None):
    """Momentum SGD on mean cross-entropy with a seeded shuffle per epoch.

    Returns ``(trained_graph, metadata)``; the input graph is left untouched.
    """
    if np.any((dataset.labels < 0) | (dataset.labels >= graph.num_classes)):
        raise ValueError(f"labels must lie in [0, {graph.num_classes})")
    model = graph.astype(np.float32)
    velocity = {(lid, name): np.zeros_like(p) for lid, name, p in model.parameters()}
    rng = np.random.default_rng(seed)
    lr32, mom32 = np.float32(lr), np.float32(momentum)
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            loss = engine.SoftmaxCrossEntropy(dataset.labels[idx])
            value, grads = engine.backward_graph(model, dataset.images[idx], loss)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch)
            scale = np.float32(1.0 / len(idx))
            for layer in model.layers:
                for name, p in layer.params.items():
                    v = velocity[(layer.layer_id, name)]
                    v *= mom32
                    v += grads.param_grads[layer.layer_id][name] * scale
                    p -= lr32 * v
    meta = TrainingMetadata(
        seed=seed,
        epochs=epochs,
        lr=float(lr),
        momentum=float(momentum),
        batch_size=batch_size,
        train_accuracy=accuracy(model, dataset),
        test_accuracy=None if test_set is None else accuracy(model, test_set),
    )
    model.metadata = asdict(meta)
    return model, meta


def hidden_output(graph: ComputeGraph, layer_id: str, x) -> np.ndarray:
    """Activation after ``layer_id`` flattened row-major per batch item."""
    act = engine.hidden_activation(graph, x, layer_id)
    return act.reshape(len(act), -1)


def _pack_str(s: str, width="H") -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<" + width, len(b)) + b


def save_checkpoint(graph: ComputeGraph, path) -> None:
    if graph.arch is None:
        raise ValueError("graph has no architecture descriptor to save")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_str(graph.arch.to_json(), "I")]
    records = list(graph.parameters())
    parts.append(struct.pack("<I", len(records)))
    for layer_id, name, p in records:
        arr = np.ascontiguousarray(p, dtype="<f4")
        parts += [_pack_str(layer_id), _pack_str(name), struct.pack("<I", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(_pack_str(json.dumps(graph.metadata, sort_keys=True), "I"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0
        self.record = None

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"file truncated at byte {self.pos}", self.record)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def string(self, width="H"):
        (n,) = self.unpack(width)
        return self.take(n).decode("utf-8")


def load_checkpoint(path) -> ComputeGraph:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic; not a TRAPCKPT file")
    (version,) = r.unpack("I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch = ArchDescriptor.from_json(r.string("I"))
    validate_arch(arch)
    layers = _make_layers(arch)
    by_id = {layer.layer_id: layer for layer in layers}
    expected = [(l.layer_id, name) for l in layers for name in l.params]
    (count,) = r.unpack("I")
    if count != len(expected):
        raise CheckpointError(f"{count} parameter records, architecture needs {len(expected)}")
    for i in range(count):
        r.record = i
        layer_id, name = r.string(), r.string()
        if (layer_id, name) != expected[i]:
            raise CheckpointError(f"found {layer_id}.{name}, expected {expected[i][0]}.{expected[i][1]}", i)
        (ndim,) = r.unpack("I")
        shape = r.unpack(f"{ndim}I")
        want = by_id[layer_id].param_shapes()[name]
        if tuple(shape) != tuple(want):
            raise CheckpointError(f"{layer_id}.{name} declared shape {tuple(shape)}, architecture needs {want}", i)
        n = int(np.prod(shape)) * 4
        data = np.frombuffer(r.take(n), dtype="<f4").astype(np.float32).reshape(shape)
        by_id[layer_id].params[name] = data
    r.record = None
    metadata = json.loads(r.string("I"))
    if r.pos != len(r.raw):
        raise CheckpointError(f"{len(r.raw) - r.pos} trailing bytes after metadata")
    return ComputeGraph(layers, arch.input_shape, arch.num_classes, arch.name, arch=arch, metadata=metadata)
