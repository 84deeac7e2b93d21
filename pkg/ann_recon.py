"""
CCMForge ANN Reconstruction

From-scratch encoder-decoder network with dense (or residual) blocks that
maps a sensor speckle image to an object estimate, plus its loss,
backpropagation, ADAM training loop, gradient check, inference timing
and the CCMW checkpoint format.

Architecture for NetworkSpec(depth=D):
    stem conv (1 -> base) + ReLU
    encoder level l < D: block, keep as skip, 2x2 average pool
    bottleneck block
    decoder level l = D-1 .. 0: nearest x2 upsample, concat skip l, block
    head 1x1 conv -> 1 channel, logistic squashing

A dense bottleneck or inner decoder block carries only its new features
into the next upsample; the top decoder block feeds all of its channels
to the head.
"""

from __future__ import annotations

import json
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from ann_layers import (
    avgpool2,
    avgpool2_backward,
    conv2d_backward,
    conv2d_forward,
    relu,
    relu_backward,
    upsample2,
    upsample2_backward,
)
from config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    BENCH_MIN_REPS,
    EXIT_NUMERIC,
    NET_BASE_CHANNELS,
    NET_BLOCK_KIND,
    NET_DEPTH,
    NET_GROWTH,
    NET_KERNEL_SIZE,
    NET_LAYERS_PER_BLOCK,
    NUM_THREADS,
    PROB_EPS,
    SSIM_WINDOW,
    TRAIN_BATCH_SIZE,
    TRAIN_EPOCHS,
    TRAIN_LEARNING_RATE,
    TRAIN_LOSS,
)
from image_core import (
    BadMagicError,
    CCMError,
    ImageFormatError,
    ImageGrid,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    make_rng,
    normalize_unit,
    resample,
)
from metrics import SsimConfig, score_pair
from phantom_gen import PairedDataset
from utils_fs import atomic_write_bytes, atomic_write_text
from utils_log import get_logger

logger = get_logger("ann")

BLOCK_KINDS = ("dense", "residual")
LOSS_KINDS = ("pixelwise_cross_entropy", "mean_squared_error")

ArrayBatch = Union[np.ndarray, Sequence[ImageGrid]]


# =============================================================================
# Exceptions
# =============================================================================

class NonFiniteLossError(CCMError):
    """Raised when a training batch produces a NaN or infinite loss."""
    exit_code = EXIT_NUMERIC


# =============================================================================
# Network Specification
# =============================================================================

@dataclass(frozen=True)
class NetworkSpec:
    input_size: int
    depth: int = NET_DEPTH
    base_channels: int = NET_BASE_CHANNELS
    dense_layers_per_block: int = NET_LAYERS_PER_BLOCK
    kernel_size: int = NET_KERNEL_SIZE
    seed: int = 0
    growth: int = NET_GROWTH
    block_kind: str = NET_BLOCK_KIND

    def __post_init__(self):
        counts = (self.input_size, self.depth, self.base_channels, self.dense_layers_per_block, self.growth)
        if min(counts) < 1:
            raise ValueError(f"network counts must be >= 1, got {counts}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.input_size % (2 ** self.depth):
            raise ValueError(
                f"input_size {self.input_size} is not divisible by 2^depth = {2 ** self.depth}"
            )
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class ConvLayer:
    name: str
    c_in: int
    c_out: int
    kernel: int

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in, self.kernel, self.kernel)


def _block_layers(spec: NetworkSpec, prefix: str, c_in: int) -> tuple[list[ConvLayer], int]:
    layers = []
    c = c_in
    for j in range(spec.dense_layers_per_block):
        if spec.block_kind == "dense":
            layers.append(ConvLayer(f"{prefix}.l{j}", c, spec.growth, spec.kernel_size))
            c += spec.growth
        else:
            layers.append(ConvLayer(f"{prefix}.l{j}", c, c, spec.kernel_size))
    return layers, c


def _carried(spec: NetworkSpec, c_in: int, c_out: int) -> int:
    # dense blocks below the top decoder hand only their new features upward
    return c_out - c_in if spec.block_kind == "dense" else c_out


def layer_plan(spec: NetworkSpec) -> list[ConvLayer]:
    """Every convolution in forward order, with its channel counts."""
    plan = [ConvLayer("stem", 1, spec.base_channels, spec.kernel_size)]
    c = spec.base_channels
    skips = []
    for level in range(spec.depth):
        layers, c = _block_layers(spec, f"enc{level}", c)
        plan += layers
        skips.append(c)
    layers, c_out = _block_layers(spec, "bott", c)
    plan += layers
    c = _carried(spec, c, c_out)
    for level in reversed(range(spec.depth)):
        c_in = c + skips[level]
        layers, c_out = _block_layers(spec, f"dec{level}", c_in)
        plan += layers
        c = c_out if level == 0 else _carried(spec, c_in, c_out)
    plan.append(ConvLayer("head", c, 1, 1))
    return plan


def layer_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for layer in layer_plan(spec):
        shapes[f"{layer.name}.w"] = layer.weight_shape
        shapes[f"{layer.name}.b"] = (layer.c_out,)
    return shapes


def parameter_count(spec: NetworkSpec) -> int:
    return sum(math.prod(s) for s in layer_shapes(spec).values())


# =============================================================================
# Parameters
# =============================================================================

@dataclass
class NetworkParams:
    spec: NetworkSpec
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = layer_shapes(self.spec)
        if list(self.tensors) != list(expected):
            raise ShapeMismatchError("parameter names do not match the network layout")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeMismatchError(f"parameter {name}: expected shape {shape}, got {self.tensors[name].shape}")

    @property
    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["stem.w"].dtype

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.spec, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})


def init_network(spec: NetworkSpec, dtype=np.float32) -> NetworkParams:
    """He-normal kernels (variance 2 / fan_in) from per-layer seeded streams; zero biases."""
    tensors = {}
    for layer in layer_plan(spec):
        fan_in = layer.c_in * layer.kernel * layer.kernel
        rng = make_rng(spec.seed, "init", layer.name)
        w = rng.standard_normal(layer.weight_shape) * math.sqrt(2.0 / fan_in)
        tensors[f"{layer.name}.w"] = w.astype(dtype)
        tensors[f"{layer.name}.b"] = np.zeros(layer.c_out, dtype=dtype)
    return NetworkParams(spec, tensors)


def zeros_like_params(params: NetworkParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


# =============================================================================
# Forward / Backward
# =============================================================================

def _conv(params: NetworkParams, name: str, h: np.ndarray):
    w = params.tensors[f"{name}.w"]
    if h.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"layer {name}: expected {w.shape[1]} input channels, got {h.shape[1]}")
    return conv2d_forward(h, w, params.tensors[f"{name}.b"])


def _block_forward(params: NetworkParams, prefix: str, h: np.ndarray, cache: list) -> tuple[np.ndarray, np.ndarray]:
    """Full block output and the channels it carries into an upsample."""
    spec = params.spec
    c_in = h.shape[1]
    for j in range(spec.dense_layers_per_block):
        name = f"{prefix}.l{j}"
        z, cols = _conv(params, name, h)
        a = relu(z)
        cache.append((name, cols, z, h.shape[1]))
        h = np.concatenate([h, a], axis=1) if spec.block_kind == "dense" else h + a
    carried = h[:, c_in:] if spec.block_kind == "dense" else h
    return h, carried


def _block_backward(
    params: NetworkParams, prefix: str, dh: np.ndarray, cache: list, grads: dict, *, carried: bool = False
) -> np.ndarray:
    spec = params.spec
    if carried and spec.block_kind == "dense":
        full = cache[-1][3] + spec.growth
        lead = np.zeros((dh.shape[0], full - dh.shape[1]) + dh.shape[2:], dtype=dh.dtype)
        dh = np.concatenate([lead, dh], axis=1)
    for _ in range(spec.dense_layers_per_block):
        name, cols, z, c_in = cache.pop()
        if spec.block_kind == "dense":
            dh, da = dh[:, :c_in], dh[:, c_in:]
        else:
            da = dh
        dx, dw, db = conv2d_backward(relu_backward(da, z), cols, params.tensors[f"{name}.w"])
        grads[f"{name}.w"] += dw
        grads[f"{name}.b"] += db
        dh = dh + dx
    return dh


def _forward(params: NetworkParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Logits (N, S, S) for a stack of input images plus the cache backward needs."""
    spec = params.spec
    cache: list = []
    z, cols = _conv(params, "stem", x[:, None])
    cache.append(("stem", cols, z, 1))
    h = relu(z)

    skips = []
    for level in range(spec.depth):
        h, _ = _block_forward(params, f"enc{level}", h, cache)
        skips.append(h)
        h = avgpool2(h)

    _, h = _block_forward(params, "bott", h, cache)

    for level in reversed(range(spec.depth)):
        up = upsample2(h)
        cache.append(("concat", up.shape[1]))
        full, carried = _block_forward(params, f"dec{level}", np.concatenate([up, skips[level]], axis=1), cache)
        h = full if level == 0 else carried

    logits, cols = _conv(params, "head", h)
    cache.append(("head", cols))
    return logits[:, 0], cache


def _backward(params: NetworkParams, dlogits: np.ndarray, cache: list) -> dict[str, np.ndarray]:
    spec = params.spec
    grads = zeros_like_params(params)

    _, cols = cache.pop()
    dh, dw, db = conv2d_backward(dlogits[:, None], cols, params.tensors["head.w"])
    grads["head.w"] += dw
    grads["head.b"] += db

    skip_grads: dict[int, np.ndarray] = {}
    for level in range(spec.depth):
        dh = _block_backward(params, f"dec{level}", dh, cache, grads, carried=level > 0)
        _, c_up = cache.pop()
        skip_grads[level] = dh[:, c_up:]
        dh = upsample2_backward(dh[:, :c_up])

    dh = _block_backward(params, "bott", dh, cache, grads, carried=True)

    for level in reversed(range(spec.depth)):
        dh = avgpool2_backward(dh) + skip_grads[level]
        dh = _block_backward(params, f"enc{level}", dh, cache, grads)

    _, cols, z, _ = cache.pop()
    _, dw, db = conv2d_backward(relu_backward(dh, z), cols, params.tensors["stem.w"], need_dx=False)
    grads["stem.w"] += dw
    grads["stem.b"] += db
    return grads


# =============================================================================
# Batched Network Operations
# =============================================================================

# Work is split into fixed-size chunks so results never depend on the worker count
CHUNK_ITEMS = 8


def _chunks(n: int) -> list[slice]:
    return [slice(start, min(start + CHUNK_ITEMS, n)) for start in range(0, n, CHUNK_ITEMS)]


def as_batch(batch: ArrayBatch, params: NetworkParams) -> np.ndarray:
    """(N, S, S) array in the parameter dtype; checks the input size."""
    if isinstance(batch, np.ndarray):
        arr = batch
    else:
        arr = np.stack([img.data if isinstance(img, ImageGrid) else np.asarray(img) for img in batch])
    if arr.ndim == 2:
        arr = arr[None]
    size = params.spec.input_size
    if arr.ndim != 3 or arr.shape[1:] != (size, size):
        raise ShapeMismatchError(f"layer input: expected images of {size}x{size}, got batch shape {arr.shape}")
    return arr.astype(params.dtype, copy=False)


def probabilities(logits: np.ndarray) -> np.ndarray:
    return np.clip(expit(logits), PROB_EPS, 1.0 - PROB_EPS)


def forward_logits(params: NetworkParams, batch: ArrayBatch, *, workers: int = NUM_THREADS) -> np.ndarray:
    x = as_batch(batch, params)
    if len(x) == 0:
        return x.copy()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        return np.concatenate(list(executor.map(lambda sl: _forward(params, x[sl])[0], _chunks(len(x)))))


def forward_net(params: NetworkParams, batch: ArrayBatch, *, workers: int = NUM_THREADS) -> np.ndarray:
    """Reconstructions (N, S, S) strictly inside (0, 1)."""
    return probabilities(forward_logits(params, batch, workers=workers))


def loss(logits: np.ndarray, targets: np.ndarray, kind: str = TRAIN_LOSS) -> float:
    """
    Mean per-pixel loss from pre-squash logits.

    Cross-entropy uses max(z, 0) - z*t + log(1 + exp(-|z|)).
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeMismatchError(f"loss: logits {z.shape} vs targets {t.shape}")
    if kind == "pixelwise_cross_entropy":
        return float(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))
    if kind == "mean_squared_error":
        return float(np.mean((expit(z) - t) ** 2))
    raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")


def _loss_sum_and_grad(z: np.ndarray, t: np.ndarray, kind: str, n_total: int) -> tuple[float, np.ndarray]:
    p = expit(z)
    if kind == "pixelwise_cross_entropy":
        zz = z.astype(np.float64)
        total = float(np.sum(np.maximum(zz, 0.0) - zz * t + np.log1p(np.exp(-np.abs(zz)))))
        return total, (p - t) / n_total
    total = float(np.sum((p.astype(np.float64) - t) ** 2))
    return total, 2.0 * (p - t) * p * (1.0 - p) / n_total


def backward_net(
    params: NetworkParams,
    batch: ArrayBatch,
    targets: np.ndarray,
    kind: str = TRAIN_LOSS,
    *,
    workers: int = NUM_THREADS,
) -> tuple[float, dict[str, np.ndarray]]:
    """
    Batch loss and its exact gradient.

    Chunks of CHUNK_ITEMS run independently; their gradients are summed in
    chunk order.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
    x = as_batch(batch, params)
    t = np.asarray(targets, dtype=params.dtype)
    if t.shape != x.shape:
        raise ShapeMismatchError(f"targets {t.shape} do not match inputs {x.shape}")
    n_total = x.size

    def chunk(sl: slice):
        z, cache = _forward(params, x[sl])
        total, dz = _loss_sum_and_grad(z, t[sl], kind, n_total)
        return total, _backward(params, dz.astype(params.dtype), cache)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        results = list(executor.map(chunk, _chunks(len(x))))

    grads = zeros_like_params(params)
    loss_sum = 0.0
    for total, g in results:
        loss_sum += total
        for name in grads:
            grads[name] += g[name]
    return loss_sum / n_total, grads


# =============================================================================
# Gradient Check
# =============================================================================

# Each retry shrinks the step by this factor before a parameter is given up
_RETRY_SHRINK = 10.0
_RETRIES = 2


@dataclass
class GradientCheckReport:
    max_rel_error: float
    checked: int
    skipped_kink: int
    worst_parameter: Optional[str] = None

    @property
    def skipped_fraction(self) -> float:
        total = self.checked + self.skipped_kink
        return self.skipped_kink / total if total else 0.0


def _relu_pattern(params: NetworkParams, x: np.ndarray) -> list[np.ndarray]:
    _, cache = _forward(params, x)
    return [entry[2] > 0 for entry in cache if len(entry) == 4]


def gradient_check(
    params: NetworkParams,
    batch: ArrayBatch,
    targets: np.ndarray,
    kind: str = TRAIN_LOSS,
    *,
    step: float = 1e-3,
    max_params: Optional[int] = None,
    seed: int = 0,
) -> GradientCheckReport:
    """
    Central finite differences against backward_net, in float64.

    A perturbation that flips any ReLU on/off state crosses a kink where the
    loss is not differentiable. Such a parameter is retried with a smaller
    step; if every step flips a unit it is skipped and counted in
    `skipped_kink`.
    """
    params = params.astype(np.float64)
    x = as_batch(batch, params)
    t = np.asarray(targets, dtype=np.float64)
    _, analytic = backward_net(params, x, t, kind, workers=1)
    base_pattern = _relu_pattern(params, x)

    def perturbed(tensor: np.ndarray, idx: tuple, value: float) -> tuple[float, bool]:
        tensor[idx] = value
        logits, cache = _forward(params, x)
        pattern = (entry[2] > 0 for entry in cache if len(entry) == 4)
        return loss(logits, t, kind), all(np.array_equal(a, b) for a, b in zip(base_pattern, pattern))

    slots = [(name, idx) for name, tensor in params.tensors.items() for idx in np.ndindex(tensor.shape)]
    if max_params is not None and max_params < len(slots):
        pick = np.random.default_rng(seed).choice(len(slots), size=max_params, replace=False)
        slots = [slots[i] for i in sorted(pick)]

    worst, worst_name, checked, skipped = 0.0, None, 0, 0
    for name, idx in slots:
        tensor = params.tensors[name]
        original = float(tensor[idx])
        numeric = None
        h = step
        for _ in range(_RETRIES + 1):
            plus, plus_ok = perturbed(tensor, idx, original + h)
            minus, minus_ok = perturbed(tensor, idx, original - h)
            tensor[idx] = original
            if plus_ok and minus_ok:
                numeric = (plus - minus) / (2.0 * h)
                break
            h /= _RETRY_SHRINK
        if numeric is None:
            skipped += 1
            continue

        a = float(analytic[name][idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        checked += 1
        if rel > worst:
            worst, worst_name = rel, f"{name}{list(idx)}"

    report = GradientCheckReport(max_rel_error=worst, checked=checked, skipped_kink=skipped, worst_parameter=worst_name)
    if skipped:
        logger.info(f"Gradient check skipped {skipped} of {checked + skipped} parameters "
                    f"({report.skipped_fraction:.2%}) at ReLU kinks")
    return report


# =============================================================================
# ADAM
# =============================================================================

@dataclass
class OptimizerState:
    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float = TRAIN_LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"step count must be >= 0, got {self.t}")
        if list(self.m) != list(self.v) or any(self.m[k].shape != self.v[k].shape for k in self.m):
            raise ShapeMismatchError("first and second moment accumulators differ in layout")

    @classmethod
    def fresh(cls, params: NetworkParams, lr: float = TRAIN_LEARNING_RATE, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, epsilon: float = ADAM_EPSILON) -> "OptimizerState":
        return cls(0, zeros_like_params(params), zeros_like_params(params), lr, beta1, beta2, epsilon)


def adam_step(
    params: NetworkParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[NetworkParams, OptimizerState]:
    """One ADAM update; returns new params and state, inputs are left untouched."""
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    new_tensors, new_m, new_v = {}, {}, {}
    for name, theta in params.tensors.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatchError(f"gradient {name}: expected {theta.shape}, got {g.shape}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_tensors[name] = (theta - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(theta.dtype)
        new_m[name] = m.astype(theta.dtype)
        new_v[name] = v.astype(theta.dtype)

    return NetworkParams(params.spec, new_tensors), replace(state, t=t, m=new_m, v=new_v)


# =============================================================================
# Training
# =============================================================================

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = TRAIN_EPOCHS
    batch_size: int = TRAIN_BATCH_SIZE
    learning_rate: float = TRAIN_LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON
    shuffle_seed: int = 0
    loss: str = TRAIN_LOSS
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    test_mae: float
    test_ssim: float


@dataclass
class TrainResult:
    params: NetworkParams
    state: OptimizerState
    loss_curve: list[EpochRecord] = field(default_factory=list)
    test_scores: list[tuple[float, float]] = field(default_factory=list)


def prepare_input(img: ImageGrid, size: int) -> ImageGrid:
    """Resample to size x size and normalize to [0, 1]."""
    return normalize_unit(resample(img, size, size))


def prepare_pairs(
    pairs: Sequence[tuple[ImageGrid, ImageGrid]], size: int
) -> tuple[np.ndarray, np.ndarray]:
    """(inputs, targets) arrays of shape (N, size, size) from (object, sensor) pairs."""
    if not pairs:
        return np.zeros((0, size, size)), np.zeros((0, size, size))
    inputs = np.stack([prepare_input(sen, size).data for _, sen in pairs])
    targets = np.stack([prepare_input(obj, size).data for obj, _ in pairs])
    return inputs, targets


def evaluate_predictions(predictions: np.ndarray, targets: np.ndarray, pitch_um: float = 1.0) -> list[tuple[float, float]]:
    """(MAE, SSIM) per image; SSIM is NaN when the image is smaller than the window."""
    scores = []
    for p, t in zip(predictions, targets):
        recon, ref = ImageGrid(p, pitch_um), ImageGrid(t, pitch_um)
        if min(p.shape) < SSIM_WINDOW:
            scores.append((float(np.mean(np.abs(normalize_unit(recon).data - normalize_unit(ref).data))), float("nan")))
        else:
            scores.append(score_pair(recon, ref, SsimConfig()))
    return scores


def format_loss_curve(curve: Sequence[EpochRecord]) -> str:
    lines = ["epoch,train_loss,test_mae,test_ssim"]
    for r in curve:
        lines.append(f"{r.epoch},{r.train_loss:.8g},{r.test_mae:.8g},{r.test_ssim:.8g}")
    return "\n".join(lines) + "\n"


def train(
    dataset: PairedDataset,
    spec: NetworkSpec,
    config: TrainConfig = TrainConfig(),
    *,
    checkpoint_dir: Optional[Path] = None,
    workers: int = NUM_THREADS,
) -> TrainResult:
    """
    Minibatch ADAM on the train split with a seeded shuffle per epoch.

    After every epoch the test split is scored and, when `checkpoint_dir` is
    given, epoch_NNN.ccmw, latest.ccmw and loss_curve.csv are written.
    """
    train_x, train_t = prepare_pairs(dataset.train_pairs(), spec.input_size)
    test_x, test_t = prepare_pairs(dataset.test_pairs(), spec.input_size)
    if len(train_x) == 0:
        raise ValueError("train needs a non-empty train split")

    dtype = np.dtype(config.dtype)
    train_x, train_t = train_x.astype(dtype), train_t.astype(dtype)
    params = init_network(spec, dtype=dtype)
    state = OptimizerState.fresh(params, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    curve: list[EpochRecord] = []
    scores: list[tuple[float, float]] = []
    n = len(train_x)

    for epoch in range(1, config.epochs + 1):
        order = make_rng(config.shuffle_seed, "epoch", epoch).permutation(n)
        epoch_loss = 0.0
        for b, start in enumerate(range(0, n, config.batch_size), start=1):
            idx = order[start:start + config.batch_size]
            batch_loss, grads = backward_net(params, train_x[idx], train_t[idx], config.loss, workers=workers)
            if not math.isfinite(batch_loss):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {b}")
            params, state = adam_step(params, grads, state)
            epoch_loss += batch_loss * len(idx)

        if len(test_x):
            preds = forward_net(params, test_x, workers=workers)
            scores = evaluate_predictions(preds, test_t)
            test_mae = float(np.mean([s[0] for s in scores]))
            test_ssim = float(np.mean([s[1] for s in scores]))
        else:
            test_mae = test_ssim = float("nan")

        record = EpochRecord(epoch, epoch_loss / n, test_mae, test_ssim)
        curve.append(record)
        print(f"[TRAIN] epoch {epoch}/{config.epochs} loss={record.train_loss:.5f} "
              f"test MAE={test_mae:.4f} SSIM={test_ssim:.4f}")
        logger.info(f"Epoch {epoch}: {record}")

        if checkpoint_dir is not None:
            checkpoint_dir = Path(checkpoint_dir)
            write_checkpoint(checkpoint_dir / f"epoch_{epoch:03d}.ccmw", params, state)
            write_checkpoint(checkpoint_dir / "latest.ccmw", params, state)
            atomic_write_text(checkpoint_dir / "loss_curve.csv", format_loss_curve(curve))

    return TrainResult(params=params, state=state, loss_curve=curve, test_scores=scores)


# =============================================================================
# Inference
# =============================================================================

def infer(params: NetworkParams, sensor: ImageGrid, *, pitch_um: Optional[float] = None) -> tuple[ImageGrid, float]:
    """Single forward pass; elapsed milliseconds cover the pass only."""
    x = as_batch(sensor.data[None], params)
    start = time.perf_counter()
    logits = _forward(params, x)[0][0]
    elapsed = (time.perf_counter() - start) * 1000.0
    out = probabilities(logits).astype(np.float64)
    return ImageGrid(out, pitch_um or sensor.pitch_um), elapsed


def time_inference(params: NetworkParams, sensor: ImageGrid, reps: int = BENCH_MIN_REPS) -> list[float]:
    """Per-repetition inference times in ms."""
    if reps < BENCH_MIN_REPS:
        raise ValueError(f"timing needs at least {BENCH_MIN_REPS} repetitions, got {reps}")
    return [infer(params, sensor)[1] for _ in range(reps)]


# =============================================================================
# CCMW Checkpoint Format
# =============================================================================

CCMW_MAGIC = b"CCMW"
CCMW_VERSION = 1


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<I", tensor.ndim) + struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.payload):
            raise TruncatedPayloadError(f"{self.source}: truncated CCMW payload at byte {self.pos}")
        chunk = self.payload[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (name_len,) = self.unpack("<I")
            name = self.take(name_len).decode("utf-8")
            (rank,) = self.unpack("<I")
            dims = self.unpack(f"<{rank}I") if rank else ()
            n = math.prod(dims)
            out[name] = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        return out


def encode_checkpoint(params: NetworkParams, state: Optional[OptimizerState] = None) -> bytes:
    spec_json = params.spec.to_json().encode("utf-8")
    parts = [
        CCMW_MAGIC,
        struct.pack("<I", CCMW_VERSION),
        struct.pack("<I", len(spec_json)) + spec_json,
        _pack_tensors(params.tensors),
    ]
    if state is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<BQ4d", 1, state.t, state.lr, state.beta1, state.beta2, state.epsilon))
        parts.append(_pack_tensors(state.m))
        parts.append(_pack_tensors(state.v))
    return b"".join(parts)


def decode_checkpoint(payload: bytes, *, source: str = "<bytes>") -> tuple[NetworkParams, Optional[OptimizerState]]:
    if len(payload) < 4 or payload[:4] != CCMW_MAGIC:
        raise BadMagicError(f"{source}: not a CCMW checkpoint (bad magic)")
    reader = _Reader(payload, source)
    reader.take(4)
    (version,) = reader.unpack("<I")
    if version != CCMW_VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported CCMW version {version}")
    (spec_len,) = reader.unpack("<I")
    try:
        spec = NetworkSpec.from_json(reader.take(spec_len).decode("utf-8"))
    except (ValueError, TypeError) as e:
        raise ImageFormatError(f"{source}: invalid network spec: {e}") from e

    params = NetworkParams(spec, reader.tensors())
    (has_state,) = reader.unpack("<B")
    if not has_state:
        return params, None
    t, lr, beta1, beta2, epsilon = reader.unpack("<Q4d")
    m = reader.tensors()
    v = reader.tensors()
    return params, OptimizerState(int(t), m, v, lr, beta1, beta2, epsilon)


def write_checkpoint(path: Path, params: NetworkParams, state: Optional[OptimizerState] = None) -> None:
    atomic_write_bytes(Path(path), encode_checkpoint(params, state))


def read_checkpoint(path: Path) -> tuple[NetworkParams, Optional[OptimizerState]]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), source=str(path))
