"""A small, self-contained convolutional classifier with exact gradients.

The network is deliberately minimal: 3x3 same-padded convolutions, mean
pooling, a global mean pool, and a dense softmax head. Everything runs in
float64 during training so finite-difference gradient checks stay tight;
parameters are stored as float32 at rest.

Layer descriptor strings:
    "conv:N"      3x3 convolution, stride 1, zero same-padding, N filters
    "relu"        elementwise max(x, 0)
    "meanpool:K"  KxK average pooling with stride K (dims must divide)
    "gmeanpool"   global average pool, raster -> feature vector
    "dense"       linear map from the feature vector to num_classes logits
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ArchitectureError,
    DimensionMismatchError,
    FormatError,
    UnsupportedVersionError,
)
from .imaging import Image
from .scorer import ScoreVector, ScorerInfo

PARAMS_MAGIC = b"SSCA"
PARAMS_SECTION = b"NETP"
PARAMS_VERSION = 1

DEFAULT_LAYERS: tuple[str, ...] = (
    "conv:16",
    "relu",
    "meanpool:2",
    "conv:32",
    "relu",
    "gmeanpool",
    "dense",
)


@dataclass(frozen=True)
class Arch:
    """Input dims, class count, and the layer chain; validated on construction."""

    input_height: int
    input_width: int
    input_channels: int
    num_classes: int
    layers: tuple[str, ...] = DEFAULT_LAYERS

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.num_classes < 2:
            raise ArchitectureError(f"num_classes must be >= 2, got {self.num_classes}")
        self.shape_chain()  # raises on an invalid chain

    def shape_chain(self) -> list[tuple]:
        """Per-layer output shapes; raster states are (h, w, c), vector states (n,)."""
        state: tuple = (self.input_height, self.input_width, self.input_channels)
        chain = [state]
        for idx, layer in enumerate(self.layers):
            kind, _, arg = layer.partition(":")
            if kind == "conv":
                if len(state) != 3:
                    raise ArchitectureError(f"layer {idx} ({layer}): conv needs a raster input")
                filters = _positive_int_arg(layer, arg)
                state = (state[0], state[1], filters)
            elif kind == "relu":
                pass
            elif kind == "meanpool":
                if len(state) != 3:
                    raise ArchitectureError(f"layer {idx} ({layer}): pool needs a raster input")
                k = _positive_int_arg(layer, arg)
                h, w, c = state
                if h % k or w % k:
                    raise ArchitectureError(
                        f"layer {idx} ({layer}): dims ({h}, {w}) not divisible by {k}"
                    )
                state = (h // k, w // k, c)
            elif kind == "gmeanpool":
                if len(state) != 3:
                    raise ArchitectureError(f"layer {idx} ({layer}): needs a raster input")
                state = (state[2],)
            elif kind == "dense":
                if len(state) != 1:
                    raise ArchitectureError(
                        f"layer {idx} ({layer}): dense needs a feature-vector input"
                    )
                if idx != len(self.layers) - 1:
                    raise ArchitectureError("dense must be the final layer")
                state = (self.num_classes,)
            else:
                raise ArchitectureError(f"unknown layer kind {layer!r}")
            chain.append(state)
        if not self.layers or self.layers[-1].partition(":")[0] != "dense":
            raise ArchitectureError("layer chain must end with a dense head")
        return chain

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Canonical parameter tensor shapes, keyed 'L{i}.W' / 'L{i}.b'."""
        shapes: dict[str, tuple[int, ...]] = {}
        chain = self.shape_chain()
        for idx, layer in enumerate(self.layers):
            kind, _, arg = layer.partition(":")
            if kind == "conv":
                cin = chain[idx][2]
                filters = int(arg)
                shapes[f"L{idx}.W"] = (3, 3, cin, filters)
                shapes[f"L{idx}.b"] = (filters,)
            elif kind == "dense":
                shapes[f"L{idx}.W"] = (chain[idx][0], self.num_classes)
                shapes[f"L{idx}.b"] = (self.num_classes,)
        return shapes

    def to_json_dict(self) -> dict:
        return {
            "input_height": self.input_height,
            "input_width": self.input_width,
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "layers": list(self.layers),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "Arch":
        return Arch(
            input_height=int(d["input_height"]),
            input_width=int(d["input_width"]),
            input_channels=int(d["input_channels"]),
            num_classes=int(d["num_classes"]),
            layers=tuple(d["layers"]),
        )


def _positive_int_arg(layer: str, arg: str) -> int:
    try:
        value = int(arg)
    except ValueError:
        raise ArchitectureError(f"layer {layer!r} needs an integer argument") from None
    if value < 1:
        raise ArchitectureError(f"layer {layer!r} argument must be positive")
    return value


def default_arch(height: int = 32, width: int = 32, channels: int = 3, num_classes: int = 4) -> Arch:
    return Arch(height, width, channels, num_classes)


@dataclass
class TinyNetParams:
    arch: Arch
    tensors: dict[str, np.ndarray]
    rng_seed: int

    def copy(self) -> "TinyNetParams":
        return TinyNetParams(self.arch, {k: v.copy() for k, v in self.tensors.items()}, self.rng_seed)

    def num_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 15
    batch_size: int = 32
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    weight_decay: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def init(arch: Arch, seed: int = 0) -> TinyNetParams:
    """He-scaled random weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for key, shape in arch.param_shapes().items():
        if key.endswith(".b"):
            tensors[key] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = int(np.prod(shape[:-1]))
            tensors[key] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return TinyNetParams(arch=arch, tensors=tensors, rng_seed=seed)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _window_view(x: np.ndarray) -> np.ndarray:
    # zero same-padding, then a (B, H, W, 3, 3, C) sliding-window view (no copy)
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(b, h, w, 3, 3, c), strides=(s[0], s[1], s[2], s[1], s[2], s[3])
    )


def _forward_internal(params: TinyNetParams, x: np.ndarray, keep_cache: bool):
    """Run the layer chain; returns (probs, logits, caches)."""
    arch = params.arch
    caches: list[tuple] = []
    out = x
    for idx, layer in enumerate(arch.layers):
        kind, _, arg = layer.partition(":")
        if kind == "conv":
            w = params.tensors[f"L{idx}.W"]
            bias = params.tensors[f"L{idx}.b"]
            view = _window_view(out)
            out = np.tensordot(view, w, axes=([3, 4, 5], [0, 1, 2])) + bias
            if keep_cache:
                caches.append(("conv", idx, view))
        elif kind == "relu":
            mask = out > 0
            out = out * mask
            if keep_cache:
                caches.append(("relu", idx, mask))
        elif kind == "meanpool":
            k = int(arg)
            bsz, h, wid, c = out.shape
            out = out.reshape(bsz, h // k, k, wid // k, k, c).mean(axis=(2, 4))
            if keep_cache:
                caches.append(("meanpool", idx, k, (bsz, h, wid, c)))
        elif kind == "gmeanpool":
            bsz, h, wid, c = out.shape
            out = out.mean(axis=(1, 2))
            if keep_cache:
                caches.append(("gmeanpool", idx, (bsz, h, wid, c)))
        elif kind == "dense":
            w = params.tensors[f"L{idx}.W"]
            bias = params.tensors[f"L{idx}.b"]
            if keep_cache:
                caches.append(("dense", idx, out))
            out = out @ w + bias
    logits = out
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    return probs, logits, caches


def _backward_internal(params: TinyNetParams, dlogits: np.ndarray, caches: list[tuple]):
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    grad = dlogits
    for cache in reversed(caches):
        kind = cache[0]
        if kind == "dense":
            _, idx, feats = cache
            w = params.tensors[f"L{idx}.W"]
            grads[f"L{idx}.W"] += feats.T @ grad
            grads[f"L{idx}.b"] += grad.sum(axis=0)
            grad = grad @ w.T
        elif kind == "gmeanpool":
            _, idx, (bsz, h, wid, c) = cache
            grad = np.broadcast_to(grad[:, None, None, :] / (h * wid), (bsz, h, wid, c)).copy()
        elif kind == "meanpool":
            _, idx, k, (bsz, h, wid, c) = cache
            g = grad[:, :, None, :, None, :] / (k * k)
            grad = np.broadcast_to(g, (bsz, h // k, k, wid // k, k, c)).reshape(bsz, h, wid, c)
        elif kind == "relu":
            _, idx, mask = cache
            grad = grad * mask
        elif kind == "conv":
            _, idx, view = cache
            w = params.tensors[f"L{idx}.W"]
            cin = w.shape[2]
            bsz, h, wid, _ = grad.shape
            grads[f"L{idx}.W"] += np.tensordot(view, grad, axes=([0, 1, 2], [0, 1, 2]))
            grads[f"L{idx}.b"] += grad.sum(axis=(0, 1, 2))
            dwin = np.tensordot(grad, w, axes=([3], [3]))  # (B, H, W, 3, 3, C)
            dxp = np.zeros((bsz, h + 2, wid + 2, cin), dtype=grad.dtype)
            for dy in range(3):
                for dx in range(3):
                    dxp[:, dy : dy + h, dx : dx + wid, :] += dwin[:, :, :, dy, dx, :]
            grad = dxp[:, 1 : h + 1, 1 : wid + 1, :]
    return grads


def _stack_batch(arch: Arch, batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 4:
            raise DimensionMismatchError(f"batch array must be 4-d, got shape {x.shape}")
    else:
        x = np.stack([img.data for img in batch], axis=0) if len(batch) else np.zeros(
            (0, arch.input_height, arch.input_width, arch.input_channels)
        )
    want = (arch.input_height, arch.input_width, arch.input_channels)
    if x.shape[1:] != want:
        raise DimensionMismatchError(f"batch images are {x.shape[1:]}, arch expects {want}")
    return x


def forward(params: TinyNetParams, batch: Sequence[Image] | np.ndarray) -> list[ScoreVector]:
    """Score a batch of images; softmax outputs implement the scorer contract."""
    x = _stack_batch(params.arch, batch)
    if x.shape[0] == 0:
        return []
    probs, logits, _ = _forward_internal(params, x, keep_cache=False)
    return [ScoreVector(probs=probs[i], logits=logits[i]) for i in range(x.shape[0])]


def forward_array(params: TinyNetParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched (probs, logits) arrays for raw (B, h, w, c) input."""
    x = _stack_batch(params.arch, x)
    probs, logits, _ = _forward_internal(params, x, keep_cache=False)
    return probs, logits


def cross_entropy(scores: ScoreVector, label: int) -> float:
    """-log p[label], clamped at 1e-12 inside the log."""
    if not 0 <= label < scores.num_classes:
        raise ValueError(f"label {label} out of range for {scores.num_classes} classes")
    return float(-np.log(max(float(scores.probs[label]), 1e-12)))


def loss_and_grads(
    params: TinyNetParams,
    x: np.ndarray,
    labels: np.ndarray,
    sample_weights: np.ndarray,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Per-sample CE values and gradients of sum(w_i * CE_i).

    The weighted-sum form lets callers build plain mean losses (w = 1/B) as
    well as multi-term joint losses from one backward pass.
    """
    x = _stack_batch(params.arch, x)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(sample_weights, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if labels.shape != (x.shape[0],) or weights.shape != (x.shape[0],):
        raise DimensionMismatchError("labels and weights must match batch length")
    probs, _, caches = _forward_internal(params, x, keep_cache=True)
    n = x.shape[0]
    ce = -np.log(np.clip(probs[np.arange(n), labels], 1e-12, None))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= weights[:, None]
    grads = _backward_internal(params, dlogits, caches)
    return ce, grads


def backward(
    params: TinyNetParams, batch: Sequence[Image] | np.ndarray, labels: Sequence[int]
) -> dict[str, np.ndarray]:
    """Exact analytic gradients of the mean cross-entropy over the batch."""
    x = _stack_batch(params.arch, batch)
    n = x.shape[0]
    if n == 0:
        raise ValueError("batch must be nonempty")
    _, grads = loss_and_grads(params, x, np.asarray(labels), np.full(n, 1.0 / n))
    return grads


def mean_cross_entropy(params: TinyNetParams, x: np.ndarray, labels: np.ndarray) -> float:
    x = _stack_batch(params.arch, x)
    probs, _, _ = _forward_internal(params, x, keep_cache=False)
    n = x.shape[0]
    ce = -np.log(np.clip(probs[np.arange(n), np.asarray(labels, dtype=np.int64)], 1e-12, None))
    return float(ce.mean())


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]


def optimizer_step(
    params: TinyNetParams,
    grads: dict[str, np.ndarray],
    config: TrainConfig,
    step_index: int,
    state: OptimizerState | None = None,
) -> tuple[TinyNetParams, OptimizerState | None]:
    """One deterministic update; returns new params plus carried optimizer state."""
    spec = config.optimizer
    lr = config.learning_rate
    wd = config.weight_decay
    new_tensors: dict[str, np.ndarray] = {}
    if spec.kind == "sgd":
        for key, theta in params.tensors.items():
            new_tensors[key] = theta - lr * (grads[key] + wd * theta)
        new_state = state
    else:
        if state is None:
            state = OptimizerState(
                first_moment={k: np.zeros_like(v) for k, v in params.tensors.items()},
                second_moment={k: np.zeros_like(v) for k, v in params.tensors.items()},
            )
        t = step_index + 1
        m_new, v_new = {}, {}
        for key, theta in params.tensors.items():
            g = grads[key] + wd * theta
            m = spec.beta1 * state.first_moment[key] + (1 - spec.beta1) * g
            v = spec.beta2 * state.second_moment[key] + (1 - spec.beta2) * g * g
            m_hat = m / (1 - spec.beta1**t)
            v_hat = v / (1 - spec.beta2**t)
            new_tensors[key] = theta - lr * m_hat / (np.sqrt(v_hat) + spec.eps)
            m_new[key], v_new[key] = m, v
        new_state = OptimizerState(first_moment=m_new, second_moment=v_new)
    return TinyNetParams(params.arch, new_tensors, params.rng_seed), new_state


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save(params: TinyNetParams, path: str | Path) -> None:
    """Write params as f32 tensors; the file appears atomically (write-then-rename)."""
    path = Path(path)
    keys = sorted(params.tensors)
    header = {
        "arch": params.arch.to_json_dict(),
        "rng_seed": params.rng_seed,
        "tensors": keys,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(PARAMS_SECTION)
        fh.write(struct.pack("<B", PARAMS_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for key in keys:
            arr = np.ascontiguousarray(params.tensors[key], dtype="<f4")
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def load(path: str | Path) -> TinyNetParams:
    raw = Path(path).read_bytes()
    if len(raw) < 13:
        raise FormatError(f"{path}: truncated params file")
    if raw[:4] != PARAMS_MAGIC:
        raise FormatError(f"{path}: bad magic bytes {raw[:4]!r}")
    if raw[4:8] != PARAMS_SECTION:
        raise FormatError(f"{path}: bad section tag {raw[4:8]!r}")
    (version,) = struct.unpack_from("<B", raw, 8)
    if version != PARAMS_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported params version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 9)
    header = json.loads(raw[13 : 13 + hlen].decode("utf-8"))
    arch = Arch.from_json_dict(header["arch"])
    offset = 13 + hlen
    tensors: dict[str, np.ndarray] = {}
    for key in header["tensors"]:
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        tensors[key] = arr.reshape(dims).astype(np.float64)
    expected = arch.param_shapes()
    if set(tensors) != set(expected):
        raise FormatError(f"{path}: tensor keys {sorted(tensors)} != arch keys {sorted(expected)}")
    for key, shape in expected.items():
        if tensors[key].shape != shape:
            raise FormatError(f"{path}: tensor {key} has shape {tensors[key].shape}, want {shape}")
    return TinyNetParams(arch=arch, tensors=tensors, rng_seed=int(header["rng_seed"]))


class TinyNetScorer:
    """Read-only scorer view over a parameter set."""

    def __init__(self, params: TinyNetParams):
        self.params = params
        a = params.arch
        self._info = ScorerInfo(
            num_classes=a.num_classes,
            expected_height=a.input_height,
            expected_width=a.input_width,
            expected_channels=a.input_channels,
        )

    @property
    def info(self) -> ScorerInfo:
        return self._info

    def score_batch(self, images: Sequence[Image]) -> list[ScoreVector]:
        return forward(self.params, images)
