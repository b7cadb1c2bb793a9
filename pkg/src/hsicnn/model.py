"""HSI-CNN network: configuration, shape arithmetic, forward/backward, checkpoints.

Layer stack (per sample)::

    3x3xB patch -> Conv1 (spectral) -> reshape (L x n1) -> ReLU
      -> Conv2 (3x3, C2 kernels) -> ReLU -> max pool -> flatten
      -> FC1 -> ReLU -> FC2 -> ReLU -> output layer -> softmax
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, DimensionError, FormatError, UsageError
from .nn import LayerParams, conv_output_length

LAYER_NAMES = ("conv1", "conv2", "fc1", "fc2", "out")
CONV2_KERNEL = 3


@dataclass(frozen=True)
class ArchConfig:
    """Hyperparameters of one HSI-CNN instance.

    ``conv1_height`` is the spectral extent of the 3x3xk Conv1 kernels and
    ``conv1_kernels`` their count; ``fc1_nodes``/``fc2_nodes`` size the two
    hidden fully connected layers.
    """

    n_bands: int
    n_classes: int
    conv1_height: int = 24
    conv1_stride: int = 9
    conv1_kernels: int = 30
    conv2_stride: int = 1
    conv2_kernels: int = 64
    pool_window: int = 2
    pool_stride: int = 2
    fc1_nodes: int = 1024
    fc2_nodes: int = 100

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"{f.name} must be an integer, got {value!r}", stage=f.name)
        if not self.n_bands > self.conv1_height >= 1:
            raise ConfigError(
                f"need n_bands ({self.n_bands}) > conv1_height ({self.conv1_height}) >= 1",
                stage="conv1")
        for name in ("conv1_stride", "conv2_stride", "pool_window", "pool_stride",
                     "conv2_kernels", "fc1_nodes", "fc2_nodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", stage=name)
        if self.conv1_kernels < CONV2_KERNEL:
            raise ConfigError(
                f"conv1_kernels ({self.conv1_kernels}) must be >= {CONV2_KERNEL} "
                "so the Conv2 kernel fits the reshaped width", stage="reshape")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2", stage="out")

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return {k: int(v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class LayerShapes:
    spectral_length: int               # Conv1 output length L
    reshape: tuple[int, int]           # (L, n1)
    conv2_out: tuple[int, int, int]    # (h1, n2, C2)
    pool_out: tuple[int, int, int]
    flatten: int
    fc1: int
    fc2: int
    n_classes: int


def derive_shapes(config: ArchConfig) -> LayerShapes:
    """Per-layer dimensions, using ``(in - k) // s + 1`` for every valid window."""
    length = conv_output_length(config.n_bands, config.conv1_height, config.conv1_stride)
    if length < CONV2_KERNEL:
        raise ConfigError(
            f"Conv1 output length {length} is smaller than the {CONV2_KERNEL}x{CONV2_KERNEL} "
            "Conv2 kernel", stage="conv2")
    h1 = conv_output_length(length, CONV2_KERNEL, config.conv2_stride)
    n2 = conv_output_length(config.conv1_kernels, CONV2_KERNEL, config.conv2_stride)
    if h1 < config.pool_window or n2 < config.pool_window:
        raise ConfigError(
            f"Conv2 output {h1}x{n2} is smaller than the pooling window {config.pool_window}",
            stage="pool")
    ph = conv_output_length(h1, config.pool_window, config.pool_stride)
    pw = conv_output_length(n2, config.pool_window, config.pool_stride)
    return LayerShapes(
        spectral_length=length,
        reshape=(length, config.conv1_kernels),
        conv2_out=(h1, n2, config.conv2_kernels),
        pool_out=(ph, pw, config.conv2_kernels),
        flatten=ph * pw * config.conv2_kernels,
        fc1=config.fc1_nodes,
        fc2=config.fc2_nodes,
        n_classes=config.n_classes,
    )


def param_shapes(config: ArchConfig) -> dict[str, tuple[tuple, tuple]]:
    """(weight shape, bias shape) for each layer, in checkpoint order."""
    s = derive_shapes(config)
    return {
        "conv1": ((config.conv1_kernels, 3, 3, config.conv1_height), (config.conv1_kernels,)),
        "conv2": ((config.conv2_kernels, CONV2_KERNEL, CONV2_KERNEL), (config.conv2_kernels,)),
        "fc1": ((s.fc1, s.flatten), (s.fc1,)),
        "fc2": ((s.fc2, s.fc1), (s.fc2,)),
        "out": ((s.n_classes, s.fc2), (s.n_classes,)),
    }


@dataclass
class Model:
    config: ArchConfig
    layers: dict[str, LayerParams]
    iteration: int = 0
    seed: int | None = None
    shapes: LayerShapes = field(init=False, repr=False)

    def __post_init__(self):
        self.shapes = derive_shapes(self.config)
        expected = param_shapes(self.config)
        if list(self.layers) != list(LAYER_NAMES):
            raise ConfigError(f"layers must be {LAYER_NAMES}, got {tuple(self.layers)}")
        for name, (ws, bs) in expected.items():
            p = self.layers[name]
            if p.weights.shape != ws or p.biases.shape != bs:
                raise DimensionError(
                    f"{name} parameters have shapes {p.weights.shape}/{p.biases.shape}, "
                    f"expected {ws}/{bs}", expected=(ws, bs),
                    actual=(p.weights.shape, p.biases.shape))

    @property
    def dtype(self):
        return self.layers["conv1"].weights.dtype

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.layers.values())

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.layers.items()},
                     self.iteration, self.seed)

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.layers.items()},
                     self.iteration, self.seed)


def build_model(config: ArchConfig, seed: int, dtype=np.float32) -> Model:
    """Fan-in scaled uniform weights (variance ``1 / fan_in``), zero biases.

    The output layer starts at zero so a fresh model predicts the uniform
    distribution.  Weights are drawn layer by layer from one seeded
    generator, in float64, then cast to ``dtype``.
    """
    rng = np.random.default_rng(seed)
    layers = {}
    for name, (ws, bs) in param_shapes(config).items():
        if name == "out":
            w = np.zeros(ws)
        else:
            fan_in = int(np.prod(ws[1:]))
            bound = np.sqrt(3.0 / fan_in)
            w = rng.uniform(-bound, bound, size=ws)
        layers[name] = LayerParams(w.astype(dtype), np.zeros(bs, dtype=dtype))
    return Model(config, layers, iteration=0, seed=seed)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

_CACHE_KEYS = ("patch", "conv1", "reshaped", "act1", "conv2", "act2", "pooled", "argmax",
               "flat", "fc1", "h1", "fc2", "h2", "logits", "probs")


def forward(model: Model, patch):
    """Run a (3, 3, B) patch, or an (N, 3, 3, B) batch, through the network.

    Returns ``(probs, cache)``; ``cache`` holds every intermediate needed by
    :func:`backward` and by feature export (``h1``/``h2`` are the FC1/FC2
    outputs after ReLU).
    """
    cfg = model.config
    patch = np.asarray(patch)
    if patch.ndim not in (3, 4) or patch.shape[-3:-1] != (3, 3):
        raise DimensionError("expected a (3, 3, bands) patch or (N, 3, 3, bands) batch",
                             actual=patch.shape)
    if patch.shape[-1] != cfg.n_bands:
        raise DimensionError(f"patch has {patch.shape[-1]} bands, model expects {cfg.n_bands}",
                             expected=cfg.n_bands, actual=patch.shape[-1])
    patch = patch.astype(model.dtype, copy=False)
    L = model.layers

    c = {"patch": patch}
    c["conv1"] = nn.conv_spectral_forward(patch, L["conv1"], cfg.conv1_stride)
    c["reshaped"] = nn.reshape_stack(c["conv1"])
    c["act1"] = nn.relu(c["reshaped"])
    c["conv2"] = nn.conv2d_forward(c["act1"], L["conv2"], cfg.conv2_stride)
    c["act2"] = nn.relu(c["conv2"])
    c["pooled"], c["argmax"] = nn.maxpool2d_forward(c["act2"], cfg.pool_window, cfg.pool_stride)
    c["flat"] = c["pooled"].reshape(c["pooled"].shape[:-3] + (-1,))
    c["fc1"] = nn.fc_forward(c["flat"], L["fc1"])
    c["h1"] = nn.relu(c["fc1"])
    c["fc2"] = nn.fc_forward(c["h1"], L["fc2"])
    c["h2"] = nn.relu(c["fc2"])
    c["logits"] = nn.fc_forward(c["h2"], L["out"])
    z = c["logits"] - c["logits"].max(axis=-1, keepdims=True)
    e = np.exp(z)
    c["probs"] = e / e.sum(axis=-1, keepdims=True)
    return c["probs"], c


def loss(model: Model, patch, label) -> float:
    """Mean cross-entropy over the batch (or the single sample)."""
    _, cache = forward(model, patch)
    values, _ = nn.softmax_xent(cache["logits"], label)
    return float(np.mean(values))


def backward(model: Model, cache: dict, label):
    """Exact gradients of the mean cross-entropy loss.

    Returns ``(grads, d_patch)`` where ``grads`` maps layer name to a
    ``LayerParams`` of gradients.
    """
    missing = [k for k in _CACHE_KEYS if k not in cache]
    if missing:
        raise UsageError(f"forward cache is missing {missing}; run forward() first")
    cfg = model.config
    L = model.layers
    label = np.asarray(label)
    batched = cache["patch"].ndim == 4
    n = cache["patch"].shape[0] if batched else 1
    if label.shape != ((n,) if batched else ()):
        raise DimensionError("one label per sample required", expected=n, actual=label.shape)

    grads = {}
    d = nn.softmax_xent_backward(cache["probs"], label) / n
    grads["out"], d = nn.fc_backward(d, cache["h2"], L["out"])
    d = nn.relu_backward(d, cache["fc2"])
    grads["fc2"], d = nn.fc_backward(d, cache["h1"], L["fc2"])
    d = nn.relu_backward(d, cache["fc1"])
    grads["fc1"], d = nn.fc_backward(d, cache["flat"], L["fc1"])
    d = d.reshape(cache["pooled"].shape)
    d = nn.maxpool2d_backward(d, cache["argmax"], cache["act2"].shape,
                              cfg.pool_window, cfg.pool_stride)
    d = nn.relu_backward(d, cache["conv2"])
    grads["conv2"], d = nn.conv2d_backward(d, cache["act1"], L["conv2"], cfg.conv2_stride)
    d = nn.relu_backward(d, cache["reshaped"])
    d = nn.reshape_stack_backward(d)
    grads["conv1"], d = nn.conv_spectral_backward(d, cache["patch"], L["conv1"], cfg.conv1_stride)
    grads = {name: grads[name] for name in LAYER_NAMES}
    return grads, d


def predict(model: Model, patch):
    """Most probable class; ties resolve to the lowest class index."""
    probs, _ = forward(model, patch)
    return np.argmax(probs, axis=-1)


def predict_batched(model: Model, patches, batch_size: int = 512) -> np.ndarray:
    out = [predict(model, patches[i:i + batch_size]) for i in range(0, len(patches), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HSNN"
CHECKPOINT_VERSION = 1
_SCALAR = np.dtype("<f4")


def save_checkpoint(model: Model, path) -> None:
    """Write ``HSNN`` | u32 version | u32 header length | JSON header | f32 blobs.

    The JSON header holds the architecture, iteration counter and seed;
    blobs follow in layer order, weights before biases.
    """
    header = json.dumps(
        {"arch": model.config.to_dict(), "iteration": int(model.iteration), "seed": model.seed},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for name in LAYER_NAMES:
            p = model.layers[name]
            fh.write(np.ascontiguousarray(p.weights, dtype=_SCALAR).tobytes())
            fh.write(np.ascontiguousarray(p.biases, dtype=_SCALAR).tobytes())


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: file too short for a checkpoint header",
                          expected_bytes=12, actual_bytes=len(data))
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} "
                          f"(this build reads version {CHECKPOINT_VERSION})")
    if 12 + hlen > len(data):
        raise FormatError(f"{path}: header truncated", expected_bytes=12 + hlen,
                          actual_bytes=len(data))
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        arch = header["arch"]
        iteration = int(header["iteration"])
        seed = header["seed"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header: {exc}") from None
    config = ArchConfig.from_dict(arch)

    shapes = param_shapes(config)
    expected = sum(int(np.prod(ws)) + int(np.prod(bs)) for ws, bs in shapes.values())
    expected *= _SCALAR.itemsize
    payload = memoryview(data)[12 + hlen:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: parameter payload is {len(payload)} bytes, architecture needs {expected}",
            expected_bytes=expected, actual_bytes=len(payload))
    offset = 0
    layers = {}
    for name, (ws, bs) in shapes.items():
        arrays = []
        for shape in (ws, bs):
            count = int(np.prod(shape))
            arr = np.frombuffer(payload, dtype=_SCALAR, count=count, offset=offset)
            arrays.append(arr.reshape(shape).astype(np.float32))
            offset += count * _SCALAR.itemsize
        layers[name] = LayerParams(*arrays)
    return Model(config, layers, iteration=iteration, seed=seed)
