"""Minimal neural-network engine: the layers the classifier needs.

Dense-storage numpy tensors, explicit forward/backward per layer, a
numerically stable softmax cross-entropy, and bias-corrected Adam (plus SGD
with momentum for ablation). Every backward pass is the exact gradient of
its forward map, which the test suite verifies against central finite
differences. Convolutions dispatch to the selected kernel backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              dtype: np.dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d:
    """Stride-1 2-D correlation with zero "same" padding, channel-last."""

    def __init__(self, kh: int, kw: int, c_in: int, c_out: int, *,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("kernel dims must be odd for symmetric same padding")
        dtype = np.dtype(dtype)
        if rng is None:
            self.kernels = np.zeros((kh, kw, c_in, c_out), dtype=dtype)
        else:
            self.kernels = he_normal(rng, (kh, kw, c_in, c_out), kh * kw * c_in, dtype)
        self.bias = np.zeros(c_out, dtype=dtype)
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[3] != self.kernels.shape[2]:
            raise ValueError(f"expected {self.kernels.shape[2]} input channels, got {x.shape[3]}")
        self._x = np.ascontiguousarray(x)
        return backend.conv2d_forward(self._x, self.kernels) + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad_out = np.ascontiguousarray(grad_out)
        kh, kw = self.kernels.shape[:2]
        self.grad_kernels = backend.conv2d_backward_kernels(self._x, grad_out, kh, kw)
        self.grad_bias = grad_out.sum(axis=(0, 1, 2))
        return backend.conv2d_backward_input(grad_out, self.kernels)

    def params(self):
        return {"kernels": self.kernels, "bias": self.bias}

    def grads(self):
        return {"kernels": self.grad_kernels, "bias": self.grad_bias}


class BatchNorm:
    """Per-channel batch normalization over (batch, H, W)."""

    def __init__(self, channels: int, *, eps: float = 1e-5, momentum: float = 0.9,
                 dtype=np.float32):
        dtype = np.dtype(dtype)
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        axes = tuple(range(x.ndim - 1))
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch normalization needs batch size >= 2 in train mode")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (self.momentum * self.running_mean
                                 + (1.0 - self.momentum) * mean).astype(x.dtype)
            self.running_var = (self.momentum * self.running_var
                                + (1.0 - self.momentum) * var).astype(x.dtype)
            self._inv_std = 1.0 / np.sqrt(var + self.eps)
            self._xhat = (x - mean) * self._inv_std
            self._m = int(np.prod([x.shape[a] for a in axes]))
            return self.gamma * self._xhat + self.beta
        return self.gamma * (x - self.running_mean) / np.sqrt(self.running_var + self.eps) \
            + self.beta

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        # chain rule through the batch statistics:
        # dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        axes = tuple(range(grad_out.ndim - 1))
        self.grad_gamma = (grad_out * self._xhat).sum(axis=axes)
        self.grad_beta = grad_out.sum(axis=axes)
        dxhat = grad_out * self.gamma
        return self._inv_std * (dxhat - dxhat.mean(axis=axes)
                                - self._xhat * (dxhat * self._xhat).mean(axis=axes))

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.grad_gamma, "beta": self.grad_beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class ReLU:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0  # subgradient 0 at the kink
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return np.where(self._mask, grad_out, grad_out.dtype.type(0))


class Dense:
    """Affine map y = x @ W + b on (batch, n_in)."""

    def __init__(self, n_in: int, n_out: int, *, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        dtype = np.dtype(dtype)
        if rng is None:
            self.weights = np.zeros((n_in, n_out), dtype=dtype)
        else:
            self.weights = he_normal(rng, (n_in, n_out), n_in, dtype)
        self.bias = np.zeros(n_out, dtype=dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.weights.shape[0]:
            raise ValueError(f"expected {self.weights.shape[0]} inputs, got {x.shape[1]}")
        self._x = x
        return x @ self.weights + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self.grad_weights = self._x.T @ grad_out
        self.grad_bias = grad_out.sum(axis=0)
        return grad_out @ self.weights.T

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def grads(self):
        return {"weights": self.grad_weights, "bias": self.grad_bias}


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_xent(logits: np.ndarray, labels: np.ndarray,
                 sample_weights: np.ndarray | None = None):
    """Mean cross-entropy of softmax probabilities against integer labels.

    Returns (loss, probs, grad_logits). With ``sample_weights`` the loss is
    the weighted mean sum(w_i * l_i) / sum(w_i) and the gradient scales
    accordingly.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or logits.shape[0] != labels.size:
        raise ValueError("labels must be a vector matching the batch")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    probs = np.exp(log_probs)
    rows = np.arange(labels.size)
    losses = -log_probs[rows, labels]
    onehot = np.zeros_like(probs)
    onehot[rows, labels] = 1.0
    if sample_weights is None:
        loss = losses.mean()
        grad = (probs - onehot) / labels.size
    else:
        sample_weights = np.asarray(sample_weights, dtype=losses.dtype)
        total = sample_weights.sum()
        loss = (sample_weights * losses).sum() / total
        grad = (probs - onehot) * (sample_weights / total)[:, None]
    return loss, probs, grad.astype(logits.dtype)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"leading dims differ: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=-1)


def split_channels(grad: np.ndarray, c_first: int) -> tuple[np.ndarray, np.ndarray]:
    """Backward of concat_channels: route gradient slices to the sources."""
    return grad[..., :c_first], grad[..., c_first:]


def flatten(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def unflatten(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params: dict[str, np.ndarray], lr: float = 1e-3) -> AdamState:
    state = AdamState(lr=lr)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """Bias-corrected Adam update, in place on the parameter arrays."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)


@dataclass
class MomentumState:
    lr: float = 1e-3
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)


def init_sgd(params: dict[str, np.ndarray], lr: float = 1e-3,
             momentum: float = 0.9) -> MomentumState:
    state = MomentumState(lr=lr, momentum=momentum)
    for name, p in params.items():
        state.velocity[name] = np.zeros_like(p)
    return state


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: MomentumState) -> None:
    for name, p in params.items():
        vel = state.velocity[name]
        vel *= state.momentum
        vel += grads[name]
        p -= (state.lr * vel).astype(p.dtype)
