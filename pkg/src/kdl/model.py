"""Base CNN (five conv blocks) with an FC or kernelized two-layer head."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import RngStream, conv_output_size, sample_normal
from .errors import ConfigError, FormatError, KDLError, ParameterError, WeightsIOError
from .kernels import KernelSpec
from .layers import BatchNorm, Conv2D, Dense, Dropout, Flatten, KernelDense, Layer, MaxPool, ReLU, Softmax

NUM_BLOCKS = 5
MANIFEST = "weights.json"
BLOB = "weights.bin"


@dataclass
class HeadConfig:
    type: str = "fc"
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec("linear"))
    hidden_units: int = 128
    num_classes: int = 7
    # multiplies the He stddev of both head layers; only meant for fault-injection runs
    init_scale: float = 1.0

    @property
    def hidden_activation(self) -> bool:
        return self.type == "fc" or self.kernel.degree == 1


@dataclass
class ModelConfig:
    input_shape: tuple = (1, 48, 48)
    conv_channels: tuple = (32, 64, 128, 256, 512)
    conv_kernel: tuple = (3, 3)
    dropout_rates: tuple = (0.25,) * NUM_BLOCKS
    head: HeadConfig = field(default_factory=HeadConfig)
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        self.conv_kernel = tuple(int(v) for v in self.conv_kernel)
        self.dropout_rates = tuple(float(v) for v in self.dropout_rates)

    def validate(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W) of positive ints, got {self.input_shape}")
        # an empty conv stack gives a head-only model for feature-vector data
        if len(self.conv_channels) not in (0, NUM_BLOCKS):
            raise ConfigError(f"conv_channels must list exactly {NUM_BLOCKS} blocks (or none), got {len(self.conv_channels)}")
        if len(self.dropout_rates) != len(self.conv_channels):
            raise ConfigError("dropout_rates must have one entry per conv block")
        if any(c < 1 for c in self.conv_channels):
            raise ConfigError("conv channel counts must be positive")
        if any(not 0 <= p < 1 for p in self.dropout_rates):
            raise ConfigError(f"dropout rates must lie in [0, 1), got {self.dropout_rates}")
        if len(self.conv_kernel) != 2 or min(self.conv_kernel) < 1:
            raise ConfigError(f"conv_kernel must be (kh, kw) >= 1, got {self.conv_kernel}")
        h = self.head
        if h.type not in ("fc", "kdl"):
            raise ConfigError(f"head type must be 'fc' or 'kdl', got {h.type!r}")
        if h.hidden_units < 1 or h.num_classes < 2:
            raise ConfigError("head needs hidden_units >= 1 and num_classes >= 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        self.spatial_trace()

    def spatial_trace(self) -> list[tuple[int, int]]:
        _, h, w = self.input_shape
        trace = [(h, w)]
        if not self.conv_channels:
            return trace
        kh, kw = self.conv_kernel
        for _ in range(NUM_BLOCKS):
            h = conv_output_size(h, kh, 1, kh // 2) // 2
            w = conv_output_size(w, kw, 1, kw // 2) // 2
            trace.append((h, w))
        if h < 1 or w < 1:
            need = 2**NUM_BLOCKS
            raise ConfigError(
                f"input {self.input_shape[1]}x{self.input_shape[2]} is too small for "
                f"{NUM_BLOCKS} pooling stages; minimum input size is {need}x{need}"
            )
        return trace

    @property
    def flat_features(self) -> int:
        h, w = self.spatial_trace()[-1]
        c = self.conv_channels[-1] if self.conv_channels else self.input_shape[0]
        return c * h * w

    def to_json(self) -> dict:
        head = {
            "type": self.head.type,
            "kernel": self.head.kernel.to_json(),
            "hidden_units": self.head.hidden_units,
            "num_classes": self.head.num_classes,
        }
        if self.head.init_scale != 1.0:
            head["init_scale"] = self.head.init_scale
        return {
            "input_shape": list(self.input_shape),
            "conv_channels": list(self.conv_channels),
            "conv_kernel": list(self.conv_kernel),
            "dropout_rates": list(self.dropout_rates),
            "head": head,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        keys = {"input_shape", "conv_channels", "conv_kernel", "dropout_rates", "head", "seed"}
        if not isinstance(d, dict):
            raise ConfigError("model config must be a JSON object")
        if set(d) - keys:
            raise ConfigError(f"unknown config keys {sorted(set(d) - keys)}")
        base = cls()
        h = d.get("head", {})
        if not isinstance(h, dict):
            raise ConfigError("'head' must be an object")
        hkeys = {"type", "kernel", "hidden_units", "num_classes", "init_scale"}
        if set(h) - hkeys:
            raise ConfigError(f"unknown head keys {sorted(set(h) - hkeys)}")
        try:
            kernel = KernelSpec.from_json(h["kernel"]) if h.get("kernel") else base.head.kernel
            head = HeadConfig(
                type=h.get("type", base.head.type),
                kernel=kernel,
                hidden_units=int(h.get("hidden_units", 128)),
                num_classes=int(h.get("num_classes", 7)),
                init_scale=float(h.get("init_scale", 1.0)),
            )
            cfg = cls(
                input_shape=d.get("input_shape", base.input_shape),
                conv_channels=d.get("conv_channels", base.conv_channels),
                conv_kernel=d.get("conv_kernel", base.conv_kernel),
                dropout_rates=d.get("dropout_rates", base.dropout_rates),
                head=head,
                seed=int(d.get("seed", 0)),
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, KDLError):
                raise ConfigError(str(e)) from e
            raise ConfigError(f"malformed model config: {e}") from e
        cfg.validate()
        return cfg

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


class Model:
    def __init__(self, layers: list[Layer], config: ModelConfig):
        self.layers = layers
        self.config = config

    @property
    def param_count(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def named_params(self):
        """Yield (name, layer, key) for every trainable array."""
        for i, layer in enumerate(self.layers):
            for key in layer.params:
                yield f"{i}.{layer.kind}.{key}", layer, key

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for key in layer.buffers:
                yield f"{i}.{layer.kind}.{key}", layer, key

    def state(self) -> dict[str, np.ndarray]:
        out = {n: l.params[k] for n, l, k in self.named_params()}
        out.update({n: l.buffers[k] for n, l, k in self.named_buffers()})
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: a.copy() for n, a in self.state().items()}

    def restore(self, snap: dict[str, np.ndarray]):
        for name, arr in self.state().items():
            arr[...] = snap[name]

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, training)
            except KDLError as e:
                _tag(e, i, layer)
                raise
        return x

    def backward(self, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Backpropagate a gradient taken w.r.t. the pre-softmax logits."""
        grads = {}
        g = d_logits
        for i in range(len(self.layers) - 2, -1, -1):
            layer = self.layers[i]
            try:
                bundle = layer.backward(g)
            except KDLError as e:
                _tag(e, i, layer)
                raise
            for key, dp in bundle.d_params.items():
                grads[f"{i}.{layer.kind}.{key}"] = dp
            g = bundle.d_input
        return grads

    def __repr__(self):
        return f"Model({len(self.layers)} layers, {self.param_count} params)"


def _tag(e: Exception, index: int, layer: Layer):
    if getattr(e, "layer_index", None) is None:
        e.layer_index = index
        e.args = (f"layer {index} ({layer.kind}): {e.args[0] if e.args else ''}",) + e.args[1:]


def _he(rng, fan_in, shape, dtype, scale=1.0):
    return sample_normal(rng, 0.0, scale * np.sqrt(2.0 / fan_in), shape, dtype)


def build_model(config: ModelConfig, dtype=np.float32) -> Model:
    config.validate()
    rng = RngStream(config.seed)
    layers: list[Layer] = []
    c_in = config.input_shape[0]
    kh, kw = config.conv_kernel
    for i, (c_out, p) in enumerate(zip(config.conv_channels, config.dropout_rates)):
        fan_in = c_in * kh * kw
        W = _he(rng.derive(1, i), fan_in, (c_out, c_in, kh, kw), dtype)
        layers += [
            Conv2D(W, np.zeros(c_out, dtype), stride=1, pad=kh // 2),
            BatchNorm(c_out, dtype),
            ReLU(),
            MaxPool(2),
            Dropout(p, rng.derive(2, i)),
        ]
        c_in = c_out
    layers.append(Flatten())

    head = config.head
    d = config.flat_features
    sizes = [(head.hidden_units, d), (head.num_classes, head.hidden_units)]
    for j, (units, fan_in) in enumerate(sizes):
        W = _he(rng.derive(3, j), fan_in, (units, fan_in), dtype, head.init_scale)
        b = np.zeros(units, dtype)
        act = j == 0 and head.hidden_activation
        if head.type == "fc":
            layers.append(Dense(W, b, activation=act))
        else:
            layers.append(KernelDense(head.kernel, W, b, activation=act))
    layers.append(Softmax())
    return Model(layers, config)


def _flatten_json(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten_json(v, key + "."))
        else:
            out[key] = v
    return out


def _write_atomic(path: Path, data: bytes):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_weights(model: Model, path) -> None:
    """Write ``weights.json`` (manifest) and ``weights.bin`` (raw little-endian blob) into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in model.state().items():
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "kdl-weights/1", "config": model.config.to_json(),
                "config_hash": model.config.hash(), "tensors": entries}
    _write_atomic(path / BLOB, b"".join(chunks))
    _write_atomic(path / MANIFEST, json.dumps(manifest, separators=(",", ":")).encode())


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    try:
        text = mpath.read_text()
    except OSError as e:
        raise WeightsIOError(f"cannot read {mpath}: {e}") from e
    if not text.strip():
        raise WeightsIOError(f"{mpath} is empty")
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as e:
        raise WeightsIOError(f"{mpath} is not valid JSON (truncated?): {e}") from e
    if not isinstance(manifest, dict) or "tensors" not in manifest or "config" not in manifest:
        raise FormatError(f"{mpath} is not a weights manifest")
    return manifest


def load_weights(config: ModelConfig, path, dtype=np.float32) -> Model:
    path = Path(path)
    manifest = read_manifest(path)
    want = _flatten_json(config.to_json())
    have = _flatten_json(manifest["config"])
    for key in sorted(set(want) | set(have)):
        if want.get(key) != have.get(key):
            raise FormatError(f"weights were saved for a different config: field '{key}' is "
                              f"{have.get(key)!r} in the manifest but {want.get(key)!r} requested")
    try:
        blob = (path / BLOB).read_bytes()
    except OSError as e:
        raise WeightsIOError(f"cannot read {path / BLOB}: {e}") from e
    model = build_model(config, dtype)
    state = model.state()
    names = [e["name"] for e in manifest["tensors"]]
    if names != list(state):
        raise FormatError("manifest tensor list does not match the model layout")
    for entry in manifest["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise WeightsIOError(f"{path / BLOB} is truncated ({len(blob)} bytes, need {end})")
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]), offset=entry["offset"],
                            count=int(np.prod(entry["shape"], dtype=np.int64)))
        target = state[entry["name"]]
        if tuple(entry["shape"]) != target.shape:
            raise FormatError(f"tensor {entry['name']} has shape {entry['shape']}, model expects {target.shape}")
        target[...] = arr.reshape(target.shape)
    if len(blob) != sum(e["nbytes"] for e in manifest["tensors"]):
        raise WeightsIOError(f"{path / BLOB} size does not match its manifest")
    return model


def load_run_model(path, dtype=np.float32) -> Model:
    """Load weights using the config recorded in the manifest itself."""
    manifest = read_manifest(path)
    try:
        config = ModelConfig.from_json(manifest["config"])
    except ConfigError as e:
        raise FormatError(f"manifest config is invalid: {e}") from e
    return load_weights(config, path, dtype)
