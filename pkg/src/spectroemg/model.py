"""The spectrogram classifier: a shared convolutional stem feeding a
spectral-attention branch and a residual feature branch.

The stem output is gated per frequency bin by the attention branch and, in
parallel, refined by the residual feature branch; the two are concatenated
along channels, flattened, and mapped to three class logits. Backpropagation
is wired explicitly layer by layer. Model files round-trip every parameter,
buffer, and the input standardization statistics.
"""

from __future__ import annotations

import copy
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import ArtifactMismatchError, InputError
from .ingest import _atomic_write_bytes
from .nncore import (BatchNorm, Conv2d, Dense, ReLU, concat_channels, flatten,
                     sigmoid, split_channels, unflatten)

_MODEL_MAGIC = b"SMDL"
_MODEL_VERSION = 1


@dataclass
class ModelConfig:
    stem_channels: int = 16
    feature_channels: int = 32
    attention_hidden: int = 32
    kernel: tuple[int, int] = (3, 3)
    input_shape: tuple[int, int, int] = (129, 32, 2)
    n_classes: int = 3
    seed: int = 0
    standardize: bool = True
    dtype: str = "float32"  # float64 for the verification suites


class AttentionBlock:
    """Per-frequency multiplicative gate driven by a squeezed descriptor.

    Each frequency bin is summarized by its mean over time and channels,
    passed through a two-layer perceptron, and squashed to (0, 1); the input
    is scaled by that weight along its frequency axis.
    """

    def __init__(self, n_freq: int, hidden: int, rng, dtype):
        self.fc1 = Dense(n_freq, hidden, rng=rng, dtype=dtype)
        self.relu = ReLU()
        self.fc2 = Dense(hidden, n_freq, rng=rng, dtype=dtype)
        self.last_weights = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._denom = x.shape[2] * x.shape[3]
        desc = x.mean(axis=(2, 3))  # (batch, freq)
        z = self.fc2.forward(self.relu.forward(self.fc1.forward(desc)))
        self._w = sigmoid(z)
        self.last_weights = self._w
        return self._w[:, :, None, None] * x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad_w = (grad_out * self._x).sum(axis=(2, 3))
        grad_z = grad_w * self._w * (1.0 - self._w)
        grad_desc = self.fc1.backward(self.relu.backward(self.fc2.backward(grad_z)))
        gx = self._w[:, :, None, None] * grad_out
        gx += grad_desc[:, :, None, None] / self._denom
        return gx

    def layers(self):
        return {"fc1": self.fc1, "fc2": self.fc2}


class FeatureBlock:
    """Residual refinement: conv-BN-ReLU-conv-BN plus a 1x1 projection skip."""

    def __init__(self, kh, kw, c_in, c_out, rng, dtype):
        self.conv1 = Conv2d(kh, kw, c_in, c_out, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm(c_out, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(kh, kw, c_out, c_out, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm(c_out, dtype=dtype)
        self.proj = Conv2d(1, 1, c_in, c_out, rng=rng, dtype=dtype)
        self.relu_out = ReLU()

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        main = self.bn2.forward(self.conv2.forward(
            self.relu1.forward(self.bn1.forward(self.conv1.forward(x), train))), train)
        return self.relu_out.forward(main + self.proj.forward(x))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = self.relu_out.backward(grad_out)
        gx = self.proj.backward(g)
        gx += self.conv1.backward(self.bn1.backward(
            self.relu1.backward(self.conv2.backward(self.bn2.backward(g)))))
        return gx

    def layers(self):
        return {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2,
                "bn2": self.bn2, "proj": self.proj}


class SpectroEmgNet:
    """Full classifier with explicit forward/backward."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None):
        self.config = config
        dtype = np.dtype(config.dtype)
        h, w, c = config.input_shape
        kh, kw = config.kernel
        self.stem_conv = Conv2d(kh, kw, c, config.stem_channels, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm(config.stem_channels, dtype=dtype)
        self.stem_relu = ReLU()
        self.feature = FeatureBlock(kh, kw, config.stem_channels,
                                    config.feature_channels, rng, dtype)
        self.attention = AttentionBlock(h, config.attention_hidden, rng, dtype)
        concat_ch = config.stem_channels + config.feature_channels
        self.head = Dense(h * w * concat_ch, config.n_classes, rng=rng, dtype=dtype)
        self.std_mean = np.zeros(c, dtype=dtype)
        self.std_scale = np.ones(c, dtype=dtype)

    # -- wiring -------------------------------------------------------------

    def set_standardization(self, mean: np.ndarray, std: np.ndarray) -> None:
        std = np.asarray(std, dtype=self.std_scale.dtype)
        if np.any(std <= 0):
            raise ValueError("standardization std must be positive per channel")
        self.std_mean = np.asarray(mean, dtype=self.std_mean.dtype)
        self.std_scale = std

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.dtype(self.config.dtype))
        if x.ndim != 4 or x.shape[1:] != tuple(self.config.input_shape):
            raise ValueError(
                f"expected input shape (batch, {self.config.input_shape}), got {x.shape}")
        if self.config.standardize:
            x = (x - self.std_mean) / self.std_scale
        stem = self.stem_relu.forward(self.stem_bn.forward(self.stem_conv.forward(x), train))
        attended = self.attention.forward(stem)
        refined = self.feature.forward(stem, train)
        merged = concat_channels(attended, refined)
        self._merged_shape = merged.shape
        return self.head.forward(flatten(merged))

    def forward_probs(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        logits = self.forward(x, train)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        g = unflatten(self.head.backward(grad_logits), self._merged_shape)
        g_att, g_feat = split_channels(g, self.config.stem_channels)
        g_stem = self.attention.backward(np.ascontiguousarray(g_att))
        g_stem += self.feature.backward(np.ascontiguousarray(g_feat))
        gx = self.stem_conv.backward(self.stem_bn.backward(self.stem_relu.backward(g_stem)))
        if self.config.standardize:
            gx = gx / self.std_scale
        return gx

    # -- parameter access ---------------------------------------------------

    def _layer_map(self):
        layers = {"stem.conv": self.stem_conv, "stem.bn": self.stem_bn}
        layers.update({f"feature.{k}": v for k, v in self.feature.layers().items()})
        layers.update({f"attention.{k}": v for k, v in self.attention.layers().items()})
        layers["head"] = self.head
        return layers

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self._layer_map().items():
            for pname, arr in layer.params().items():
                out[f"{lname}.{pname}"] = arr
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self._layer_map().items():
            for pname, arr in layer.grads().items():
                out[f"{lname}.{pname}"] = arr
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self._layer_map().items():
            if isinstance(layer, BatchNorm):
                for bname, arr in layer.buffers().items():
                    out[f"{lname}.{bname}"] = arr
        out["standardization.mean"] = self.std_mean
        out["standardization.std"] = self.std_scale
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def snapshot(self) -> dict[str, np.ndarray]:
        arrays = {**self.parameters(), **self.buffers()}
        return {name: arr.copy() for name, arr in arrays.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for lname, layer in self._layer_map().items():
            for pname in layer.params():
                layer.params()[pname][...] = snap[f"{lname}.{pname}"]
            if isinstance(layer, BatchNorm):
                layer.running_mean = snap[f"{lname}.running_mean"].copy()
                layer.running_var = snap[f"{lname}.running_var"].copy()
        self.std_mean = snap["standardization.mean"].copy()
        self.std_scale = snap["standardization.std"].copy()

    def clone(self) -> "SpectroEmgNet":
        return copy.deepcopy(self)


def init(config: ModelConfig, seed: int | None = None) -> SpectroEmgNet:
    """Build a model with He-initialized weights, deterministic in the seed."""
    if seed is not None:
        config = replace(config, seed=seed)
    return SpectroEmgNet(config, np.random.default_rng(config.seed))


def predict(probs_row: np.ndarray) -> int:
    """Highest-probability class; ties break toward the lowest index."""
    return int(np.argmax(probs_row))


def predict_batch(probs: np.ndarray) -> np.ndarray:
    return np.argmax(probs, axis=1)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------
#
# Layout (all little-endian): magic "SMDL", version u32, config block
# (stem/feature/attention-hidden/kh/kw/H/W/C/n_classes as u32, seed u64,
# flags u8 with bit0 = standardize), standardization stats (C means then C
# stds, float32), parameter blobs float32 in the fixed order given by
# ``parameters()`` then BatchNorm running stats, and a trailing CRC32 of all
# preceding bytes.

def _blob_order(m: SpectroEmgNet) -> list[np.ndarray]:
    arrays = list(m.parameters().values())
    for lname, layer in m._layer_map().items():
        if isinstance(layer, BatchNorm):
            arrays.append(layer.running_mean)
            arrays.append(layer.running_var)
    return arrays


def save(m: SpectroEmgNet, path: str) -> None:
    cfg = m.config
    parts = [_MODEL_MAGIC, struct.pack("<I", _MODEL_VERSION)]
    parts.append(struct.pack("<9I", cfg.stem_channels, cfg.feature_channels,
                             cfg.attention_hidden, cfg.kernel[0], cfg.kernel[1],
                             cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2],
                             cfg.n_classes))
    parts.append(struct.pack("<QB", cfg.seed, 1 if cfg.standardize else 0))
    parts.append(np.asarray(m.std_mean, dtype="<f4").tobytes())
    parts.append(np.asarray(m.std_scale, dtype="<f4").tobytes())
    for arr in _blob_order(m):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    _atomic_write_bytes(path, body + struct.pack("<I", zlib.crc32(body)))


def load(path: str, require_config: ModelConfig | None = None) -> SpectroEmgNet:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read model file {path}: {exc}") from exc
    if len(blob) < 8 or blob[:4] != _MODEL_MAGIC:
        raise InputError(f"not a model file: {path}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != _MODEL_VERSION:
        raise ArtifactMismatchError(f"model file {path} has unsupported version {version}")
    if len(blob) < 12 or zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
        raise InputError(f"model file {path} failed its checksum (truncated or corrupt)")

    vals = struct.unpack("<9I", blob[8:44])
    seed, flags = struct.unpack("<QB", blob[44:53])
    config = ModelConfig(stem_channels=vals[0], feature_channels=vals[1],
                         attention_hidden=vals[2], kernel=(vals[3], vals[4]),
                         input_shape=(vals[5], vals[6], vals[7]), n_classes=vals[8],
                         seed=seed, standardize=bool(flags & 1), dtype="float32")
    if require_config is not None and _shape_signature(config) != _shape_signature(require_config):
        raise ArtifactMismatchError(
            f"model file {path} was built for config {_shape_signature(config)}, "
            f"expected {_shape_signature(require_config)}")

    m = SpectroEmgNet(config, rng=None)
    offset = 53
    c = config.input_shape[2]
    stats = np.frombuffer(blob[offset:offset + 8 * c], dtype="<f4")
    offset += 8 * c
    m.std_mean = stats[:c].copy()
    m.std_scale = stats[c:].copy()
    for arr in _blob_order(m):
        nbytes = 4 * arr.size
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise InputError(f"model file {path} is truncated")
        arr[...] = np.frombuffer(chunk, dtype="<f4").reshape(arr.shape)
        offset += nbytes
    if offset != len(blob) - 4:
        raise ArtifactMismatchError(f"model file {path} holds extra parameter data")
    return m


def _shape_signature(cfg: ModelConfig):
    return (cfg.stem_channels, cfg.feature_channels, cfg.attention_hidden,
            tuple(cfg.kernel), tuple(cfg.input_shape), cfg.n_classes)
