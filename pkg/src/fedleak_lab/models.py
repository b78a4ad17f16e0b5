"""Declarative networks, parameter sets and the cross-entropy training loss."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, glt, grad, ops
from .autodiff.tensor import ShapeError

LAYER_KINDS = ("fc", "conv", "relu", "avgpool", "flatten", "residual", "affine")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    channels: int = 0
    k: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def fc(name, in_features, out_features):
    return LayerSpec("fc", name, in_features=in_features, out_features=out_features)


def conv(name, in_channels, out_channels, kernel=3, stride=1, pad=1):
    return LayerSpec("conv", name, in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, pad=pad)


def relu(name):
    return LayerSpec("relu", name)


def avgpool(name, k=2):
    return LayerSpec("avgpool", name, k=k)


def flatten(name="flatten"):
    return LayerSpec("flatten", name)


def residual(name, channels):
    return LayerSpec("residual", name, channels=channels)


def affine(name, channels):
    return LayerSpec("affine", name, channels=channels)


@dataclass(frozen=True)
class Model:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    param_shapes: tuple[tuple[str, tuple[int, ...]], ...]
    fan_in: Mapping[str, int] = field(default_factory=dict, compare=False, hash=False)

    @property
    def num_classes(self) -> int:
        return self.output_shape[-1]

    @property
    def num_params(self) -> int:
        return int(sum(np.prod(s) for _, s in self.param_shapes))

    @property
    def head(self) -> LayerSpec:
        """The last fully-connected layer."""
        for layer in reversed(self.layers):
            if layer.kind == "fc":
                return layer
        raise ValueError("model has no fully-connected layer")


def _layer_params(layer: LayerSpec, shape):
    """Parameter (name, shape, fan_in) triples and the output shape of one layer."""
    kind = layer.kind
    if kind == "fc":
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise ShapeError(f"{layer.name}: expected input ({layer.in_features},), got {shape}")
        n = layer.in_features
        return ([(f"{layer.name}.weight", (n, layer.out_features), n),
                 (f"{layer.name}.bias", (layer.out_features,), n)], (layer.out_features,))
    if kind == "conv":
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"{layer.name}: expected {layer.in_channels} input channels, got {shape}")
        c, h, w = shape
        kk = layer.kernel
        ho = (h + 2 * layer.pad - kk) // layer.stride + 1
        wo = (w + 2 * layer.pad - kk) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{layer.name}: kernel does not fit input {shape}")
        fan = c * kk * kk
        return ([(f"{layer.name}.weight", (layer.out_channels, c, kk, kk), fan),
                 (f"{layer.name}.bias", (layer.out_channels,), fan)], (layer.out_channels, ho, wo))
    if kind == "relu":
        return [], shape
    if kind == "avgpool":
        if len(shape) != 3 or shape[1] % layer.k or shape[2] % layer.k:
            raise ShapeError(f"{layer.name}: avgpool({layer.k}) cannot tile {shape}")
        return [], (shape[0], shape[1] // layer.k, shape[2] // layer.k)
    if kind == "flatten":
        return [], (int(np.prod(shape)),)
    if kind == "affine":
        if len(shape) != 3 or shape[0] != layer.channels:
            raise ShapeError(f"{layer.name}: expected {layer.channels} channels, got {shape}")
        return ([(f"{layer.name}.scale", (layer.channels,), 0),
                 (f"{layer.name}.shift", (layer.channels,), 0)], shape)
    if kind == "residual":
        ch = layer.channels
        if len(shape) != 3 or shape[0] != ch:
            raise ShapeError(f"{layer.name}: expected {ch} channels, got {shape}")
        fan = ch * 9
        return ([(f"{layer.name}.conv1.weight", (ch, ch, 3, 3), fan),
                 (f"{layer.name}.norm1.scale", (ch,), 0),
                 (f"{layer.name}.norm1.shift", (ch,), 0),
                 (f"{layer.name}.conv2.weight", (ch, ch, 3, 3), fan),
                 (f"{layer.name}.norm2.scale", (ch,), 0),
                 (f"{layer.name}.norm2.shift", (ch,), 0)], shape)
    raise ValueError(kind)


def build_model(specs: Sequence[LayerSpec], input_shape) -> Model:
    """Validate shape propagation and collect parameter shapes in layer order."""
    specs = tuple(specs)
    if not specs:
        raise ValueError("empty layer list")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate layer names in {names}")
    shape = tuple(int(s) for s in input_shape)
    params: list[tuple[str, tuple[int, ...]]] = []
    fan_in: dict[str, int] = {}
    for layer in specs:
        entries, shape = _layer_params(layer, shape)
        for name, pshape, fan in entries:
            params.append((name, tuple(pshape)))
            fan_in[name] = fan
    return Model(specs, tuple(int(s) for s in input_shape), shape, tuple(params), fan_in)


# ---------------------------------------------------------------------------
# parameter sets


class ParameterSet:
    """Named per-layer arrays with a canonical flattened view.

    The flat vector concatenates entries in model order; ``index_map`` gives
    each entry's (offset, length).
    """

    def __init__(self, entries: Mapping[str, np.ndarray]):
        self.entries: dict[str, np.ndarray] = {k: np.asarray(v, dtype=np.float64) for k, v in entries.items()}
        self.index_map: dict[str, tuple[int, int]] = {}
        offset = 0
        for name, arr in self.entries.items():
            self.index_map[name] = (offset, arr.size)
            offset += arr.size
        self.size = offset

    def __getitem__(self, name):
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def names(self):
        return list(self.entries)

    def shapes(self):
        return {k: v.shape for k, v in self.entries.items()}

    def flat(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self.entries.values()])

    def unflatten(self, vec) -> "ParameterSet":
        """A ParameterSet with this layout holding the values of ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"flat vector of length {vec.shape} does not match {self.size}")
        return ParameterSet({name: vec[o:o + n].reshape(self.entries[name].shape).copy()
                             for name, (o, n) in self.index_map.items()})

    def segments(self) -> list[tuple[int, int]]:
        return list(self.index_map.values())

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.entries.items()})

    def allclose(self, other: "ParameterSet", **kw) -> bool:
        return self.names() == other.names() and all(
            np.allclose(self[k], other[k], **kw) for k in self.entries)

    def __eq__(self, other):
        if not isinstance(other, ParameterSet):
            return NotImplemented
        return self.names() == other.names() and all(
            self[k].shape == other[k].shape and np.array_equal(self[k], other[k]) for k in self.entries)

    def __repr__(self):
        return f"ParameterSet({len(self.entries)} entries, {self.size} values)"

    # -- file format -----------------------------------------------------
    def save(self, path) -> None:
        """Length-prefixed JSON manifest followed by one GLT1 record per entry."""
        blobs, manifest, offset = [], [], 0
        for name, arr in self.entries.items():
            blob = glt.encode(arr)
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
            blobs.append(blob)
            offset += len(blob)
        head = json.dumps({"format": "GLT1-params", "entries": manifest}, sort_keys=True).encode()
        Path(path).write_bytes(struct.pack("<I", len(head)) + head + b"".join(blobs))

    @classmethod
    def load(cls, path) -> "ParameterSet":
        raw = Path(path).read_bytes()
        if len(raw) < 4:
            raise glt.GLTFormatError("truncated parameter file")
        (n,) = struct.unpack("<I", raw[:4])
        manifest = json.loads(raw[4:4 + n].decode())
        body = raw[4 + n:]
        entries = {}
        for item in manifest["entries"]:
            blob = body[item["offset"]:item["offset"] + item["nbytes"]]
            arr = glt.decode(blob)
            if list(arr.shape) != list(item["shape"]):
                raise glt.GLTFormatError(f"entry {item['name']} shape disagrees with manifest")
            entries[item["name"]] = arr
        return cls(entries)


GradientVector = ParameterSet


def init_params(model: Model, scheme: str = "default-random", seed: int = 0, *,
                a: float = -0.5, b: float = 0.5, path=None) -> ParameterSet:
    """Initial parameters.

    ``default-random`` draws each weight and bias from U(-1/sqrt(fan_in),
    1/sqrt(fan_in)) and sets affine scales to 1 and shifts to 0;
    ``wide-uniform`` draws every parameter from U(a, b); ``from-file`` loads
    a saved ParameterSet and checks it against the model.
    """
    if scheme == "from-file":
        if path is None:
            raise ValueError("from-file initialisation needs a path")
        loaded = ParameterSet.load(path)
        expected = dict(model.param_shapes)
        if loaded.names() != list(expected) or any(loaded[k].shape != expected[k] for k in expected):
            raise ShapeError(f"parameter file {path} does not match the model layout")
        return loaded
    rng = np.random.default_rng(seed)
    entries = {}
    for name, shape in model.param_shapes:
        if scheme == "wide-uniform":
            if not a < b:
                raise ValueError(f"wide-uniform needs a < b, got ({a}, {b})")
            entries[name] = rng.uniform(a, b, size=shape)
        elif scheme == "default-random":
            fan = model.fan_in[name]
            if fan == 0:
                entries[name] = np.ones(shape) if name.endswith("scale") else np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(fan)
                entries[name] = rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
    return ParameterSet(entries)


# ---------------------------------------------------------------------------
# forward pass and loss


def _as_param_tensors(params) -> dict[str, Tensor]:
    if isinstance(params, ParameterSet):
        return {k: Tensor._wrap(v) for k, v in params.entries.items()}
    return {k: (v if isinstance(v, Tensor) else Tensor._wrap(np.asarray(v, dtype=np.float64)))
            for k, v in params.items()}


def _channel(t: Tensor) -> Tensor:
    return ops.reshape(t, (1, t.shape[0], 1, 1))


def forward(model: Model, params, x) -> tuple[Tensor, list[Tensor]]:
    """Logits (B, N) and the post-relu activations in network order."""
    p = _as_param_tensors(params)
    h = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))
    if tuple(h.shape[1:]) != model.input_shape:
        raise ShapeError(f"input shape {h.shape[1:]} does not match model input {model.input_shape}")
    acts: list[Tensor] = []
    for layer in model.layers:
        n = layer.name
        if layer.kind == "fc":
            h = ops.add(ops.matmul(h, p[f"{n}.weight"]), p[f"{n}.bias"])
        elif layer.kind == "conv":
            h = ops.add(ops.conv2d(h, p[f"{n}.weight"], layer.stride, layer.pad), _channel(p[f"{n}.bias"]))
        elif layer.kind == "relu":
            h = ops.relu(h)
            acts.append(h)
        elif layer.kind == "avgpool":
            h = ops.avgpool2d(h, layer.k)
        elif layer.kind == "flatten":
            h = ops.reshape(h, (h.shape[0], -1))
        elif layer.kind == "affine":
            h = ops.add(ops.mul(h, _channel(p[f"{n}.scale"])), _channel(p[f"{n}.shift"]))
        elif layer.kind == "residual":
            skip = h
            h = ops.conv2d(h, p[f"{n}.conv1.weight"], 1, 1)
            h = ops.add(ops.mul(h, _channel(p[f"{n}.norm1.scale"])), _channel(p[f"{n}.norm1.shift"]))
            h = ops.relu(h)
            acts.append(h)
            h = ops.conv2d(h, p[f"{n}.conv2.weight"], 1, 1)
            h = ops.add(ops.mul(h, _channel(p[f"{n}.norm2.scale"])), _channel(p[f"{n}.norm2.shift"]))
            h = ops.relu(ops.add(h, skip))
            acts.append(h)
    return h, acts


def predict(model: Model, params, x) -> np.ndarray:
    logits, _ = forward(model, params, x)
    return logits.data.argmax(axis=1)


def traced_param_grads(model: Model, params, x, y):
    """Loss, per-entry parameter gradients and activations, all kept in the trace.

    ``x`` is typically a leaf requiring gradients; the returned gradients can
    then be differentiated with respect to it.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in
              (params.entries.items() if isinstance(params, ParameterSet) else params.items())}
    logits, acts = forward(model, leaves, x)
    if not isinstance(y, Tensor):
        y = np.asarray(y)
        if y.ndim == 1 and (np.any(y < 0) or np.any(y >= model.num_classes)):
            raise ValueError(f"label out of range [0, {model.num_classes})")
    loss = ops.softmax_cross_entropy(logits, y)
    grads = grad(loss, list(leaves.values()), retain_trace=True)
    return loss, grads, acts


def loss_and_param_grads(model: Model, params, x, y, retain_trace: bool = False):
    """Mean cross-entropy and its gradient with respect to every parameter.

    Without ``retain_trace`` this returns ``(float, ParameterSet)``. With it,
    returns ``(Tensor, list[Tensor])`` whose entries follow the model's
    parameter order and remain differentiable with respect to ``x``.
    """
    if retain_trace:
        loss, grads, _ = traced_param_grads(model, params, x, y)
        return loss, grads
    names = [k for k, _ in model.param_shapes]
    src = params.entries if isinstance(params, ParameterSet) else params
    leaves = {k: Tensor(src[k], requires_grad=True) for k in names}
    xt = x.detach() if isinstance(x, Tensor) else x
    logits, _ = forward(model, leaves, xt)
    yy = y.detach() if isinstance(y, Tensor) else np.asarray(y)
    if not isinstance(yy, Tensor) and yy.ndim == 1 and (np.any(yy < 0) or np.any(yy >= model.num_classes)):
        raise ValueError(f"label out of range [0, {model.num_classes})")
    loss = ops.softmax_cross_entropy(logits, yy)
    grads = grad(loss, [leaves[k] for k in names])
    return loss.item(), ParameterSet({k: g.data for k, g in zip(names, grads)})


def accuracy(model: Model, params, images, labels, batch: int = 256) -> float:
    correct = 0
    for i in range(0, len(labels), batch):
        correct += int(np.sum(predict(model, params, images[i:i + batch]) == labels[i:i + batch]))
    return correct / max(len(labels), 1)


# ---------------------------------------------------------------------------
# model zoo


def linear_model(input_shape, num_classes):
    d = int(np.prod(input_shape))
    return build_model([flatten(), fc("fc", d, num_classes)], input_shape)


def mlp(input_shape, num_classes, hidden=64):
    d = int(np.prod(input_shape))
    return build_model([flatten(), fc("fc1", d, hidden), relu("relu1"), fc("fc2", hidden, num_classes)],
                       input_shape)


def fc3(input_shape, num_classes, hidden=128):
    """Three hidden fully-connected layers with relu."""
    d = int(np.prod(input_shape))
    return build_model([flatten(),
                        fc("fc1", d, hidden), relu("relu1"),
                        fc("fc2", hidden, hidden), relu("relu2"),
                        fc("fc3", hidden, hidden), relu("relu3"),
                        fc("head", hidden, num_classes)], input_shape)


def convnet(input_shape, num_classes, width=8):
    """Three conv/relu/avgpool blocks and a linear head."""
    c, h, w = input_shape
    w1, w2 = width, 2 * width
    return build_model([conv("conv1", c, w1), relu("relu1"), avgpool("pool1"),
                        conv("conv2", w1, w2), relu("relu2"), avgpool("pool2"),
                        conv("conv3", w2, w2), relu("relu3"), avgpool("pool3"),
                        flatten(), fc("head", w2 * (h // 8) * (w // 8), num_classes)], input_shape)


def resnet_mini(input_shape, num_classes, width=8):
    """Small residual network with affine normalisation in place of batch statistics."""
    c, h, w = input_shape
    return build_model([conv("stem", c, width), affine("stem_norm", width), relu("stem_relu"),
                        residual("block1", width), avgpool("pool1"),
                        residual("block2", width), avgpool("pool2"),
                        flatten(), fc("head", width * (h // 4) * (w // 4), num_classes)], input_shape)


ZOO = {
    "linear": linear_model,
    "mlp": mlp,
    "fc3": fc3,
    "convnet": convnet,
    "resnet-mini": resnet_mini,
}


def zoo(name: str, input_shape, num_classes: int, **kw) -> Model:
    try:
        builder = ZOO[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(ZOO)}") from None
    return builder(tuple(input_shape), num_classes, **kw)
