"""Fixed-architecture CNN with exact backpropagation.

The network maps an (N, S, S, 1) batch of binary patches to per-pixel
silicon probabilities of the same shape::

    [conv3x3 -> avgpool2 -> relu] x 4  (channels 8, 8, 16, 16)
    -> flatten (S/16 * S/16 * 16) -> dense (S*S) -> sigmoid -> reshape

S is 128 in production; smaller multiples of 16 are accepted so gradient
checks can run on reduced geometry through the same code path. Arrays are
NHWC. Compute precision follows the weight dtype (float32 for training and
inference, float64 for gradient checks).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import FormatError, OptimizerError, ParameterError, ShapeError

CHANNELS = (8, 8, 16, 16)
KERNEL_SIZE = 3
PATCH_SIZE = 128
BCE_EPS = 1e-7

BLOCK_NAMES = ("k1", "b1", "k2", "b2", "k3", "b3", "k4", "b4", "W", "b")

MAGIC = b"FABFIXW1"
FORMAT_VERSION = 1


def param_shapes(patch_size=PATCH_SIZE):
    """Ordered mapping of parameter block name to shape."""
    if patch_size < 16 or patch_size % 16:
        raise ParameterError(f"patch size must be a positive multiple of 16, got {patch_size}")
    shapes = {}
    cin = 1
    for i, cout in enumerate(CHANNELS, start=1):
        shapes[f"k{i}"] = (KERNEL_SIZE, KERNEL_SIZE, cin, cout)
        shapes[f"b{i}"] = (cout,)
        cin = cout
    feat = (patch_size // 16) ** 2 * CHANNELS[-1]
    shapes["W"] = (feat, patch_size * patch_size)
    shapes["b"] = (patch_size * patch_size,)
    return shapes


def param_count(patch_size=PATCH_SIZE):
    return sum(int(np.prod(s)) for s in param_shapes(patch_size).values())


@dataclass
class ModelWeights:
    blocks: dict
    patch_size: int = PATCH_SIZE
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.patch_size)
        if list(self.blocks) != list(expected):
            raise ShapeError(f"weight blocks {list(self.blocks)} != {list(expected)}")
        for name, shape in expected.items():
            if self.blocks[name].shape != shape:
                raise ShapeError(
                    f"block {name}: shape {self.blocks[name].shape} != expected {shape}")
        n = sum(a.size for a in self.blocks.values())
        assert n == param_count(self.patch_size), "parameter count mismatch"

    @property
    def dtype(self):
        return self.blocks["W"].dtype

    def astype(self, dtype):
        return ModelWeights({k: v.astype(dtype) for k, v in self.blocks.items()},
                            self.patch_size, self.seed, dict(self.meta))

    def copy(self):
        return self.astype(self.dtype)

    def digest(self):
        """SHA-256 over all parameter bytes, in block order."""
        h = hashlib.sha256()
        for name in BLOCK_NAMES:
            h.update(np.ascontiguousarray(self.blocks[name]).tobytes())
        return h.hexdigest()


def init_weights(seed, patch_size=PATCH_SIZE, dtype=np.float32):
    """Glorot-uniform kernels and dense matrix, zero biases."""
    rng = np.random.default_rng(seed)
    blocks = {}
    for name, shape in param_shapes(patch_size).items():
        if name.startswith("k"):
            fan_in = shape[0] * shape[1] * shape[2]
            fan_out = shape[0] * shape[1] * shape[3]
        elif name == "W":
            fan_in, fan_out = shape
        else:
            blocks[name] = np.zeros(shape, dtype=dtype)
            continue
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        blocks[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
    return ModelWeights(blocks, patch_size, seed)


# -- layers -----------------------------------------------------------------

def conv2d_forward(x, kernel, bias):
    """3x3, stride 1, zero same-padding convolution (cross-correlation)."""
    x = np.asarray(x)
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[:2] != (3, 3) \
            or x.shape[3] != kernel.shape[2] or bias.shape != (kernel.shape[3],):
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with kernel "
                         f"shape {kernel.shape} / bias shape {bias.shape}")
    return kernels.conv3x3_forward(x.astype(kernel.dtype, copy=False), kernel, bias)


def conv2d_backward(x, kernel, grad_out, need_input_grad=True):
    return kernels.conv3x3_backward(x, kernel, grad_out, need_input_grad)


def avgpool2(x):
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"avgpool2 needs (N, H, W, C) with even H and W, got {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return kernels.avgpool2_forward(x)


def avgpool2_backward(grad):
    return kernels.avgpool2_backward(grad)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    """Overflow-free logistic function."""
    return expit(x)


# -- network ----------------------------------------------------------------

def _check_batch(weights, batch):
    s = weights.patch_size
    batch = np.asarray(batch)
    if batch.ndim == 3:
        batch = batch[..., None]
    if batch.ndim != 4 or batch.shape[1:] != (s, s, 1):
        raise ShapeError(f"batch shape {batch.shape} != (N, {s}, {s}, 1)")
    return np.ascontiguousarray(batch, dtype=weights.dtype)


def forward_logits(weights, batch):
    """Logits (N, S*S) plus the activations backward needs."""
    w = weights.blocks
    a = _check_batch(weights, batch)
    acts = [a]
    pooled = []
    for i in range(1, 5):
        z = kernels.conv3x3_forward(a, w[f"k{i}"], w[f"b{i}"])
        p = kernels.avgpool2_forward(z)
        a = np.maximum(p, 0)
        pooled.append(p)
        acts.append(a)
    feat = a.reshape(a.shape[0], -1)
    logits = feat @ w["W"]
    logits += w["b"]
    return logits, (acts, pooled, feat)


def forward(weights, batch):
    """Probabilities (N, S, S, 1) in (0, 1)."""
    logits, _ = forward_logits(weights, batch)
    s = weights.patch_size
    return sigmoid(logits).reshape(-1, s, s, 1)


def backward_from_logits(weights, cache, grad_logits, param_grads=True, input_grad=False):
    """Backpropagate d(loss)/d(logits) of shape (N, S*S).

    Returns ``(grads, grad_input)``; either is None when not requested.
    """
    w = weights.blocks
    acts, pooled, feat = cache
    grads = {} if param_grads else None
    if param_grads:
        grads["W"] = feat.T @ grad_logits
        grads["b"] = grad_logits.sum(axis=0)
    g = (grad_logits @ w["W"].T).reshape(acts[4].shape)
    grad_input = None
    for i in range(4, 0, -1):
        g = g * (pooled[i - 1] > 0)
        g = kernels.avgpool2_backward(g)
        need_x = i > 1 or input_grad
        gx, gk, gb = kernels.conv3x3_backward(acts[i - 1], w[f"k{i}"], g, need_x)
        if param_grads:
            grads[f"k{i}"] = gk
            grads[f"b{i}"] = gb
        if i > 1:
            g = gx
        else:
            grad_input = gx
    if param_grads:
        grads = {name: grads[name] for name in BLOCK_NAMES}
    return grads, grad_input


# -- loss -------------------------------------------------------------------

def _clamped(pred):
    return np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)


def bce(pred, label):
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1-1e-7]."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ShapeError(f"bce: prediction shape {pred.shape} != label shape {label.shape}")
    p = _clamped(pred.astype(np.float64))
    y = label.astype(np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def bce_grad_prob(pred, label):
    """d(mean BCE)/d(pred); zero where the clamp is active."""
    p = np.asarray(pred)
    y = np.asarray(label, dtype=p.dtype)
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    pc = _clamped(p)
    g = (pc - y) / (pc * (1.0 - pc))
    return np.where(inside, g, 0).astype(p.dtype) / p.size


def bce_grad_logits(prob, label):
    """d(mean BCE)/d(logit) for prob = sigmoid(logit)."""
    p = np.asarray(prob)
    y = np.asarray(label, dtype=p.dtype)
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    return np.where(inside, p - y, 0).astype(p.dtype) / p.size


def loss_and_grads(weights, batch, labels):
    """Mean BCE of forward(batch) against labels, and its parameter gradients."""
    logits, cache = forward_logits(weights, batch)
    prob = sigmoid(logits)
    y = _check_batch(weights, labels).reshape(prob.shape)
    loss = bce(prob, y)
    grads, _ = backward_from_logits(weights, cache, bce_grad_logits(prob, y))
    return loss, grads


def backward(weights, batch, labels):
    return loss_and_grads(weights, batch, labels)[1]


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_weights(cls, weights, **hyper):
        zeros = {k: np.zeros_like(a) for k, a in weights.blocks.items()}
        return cls(zeros, {k: np.zeros_like(a) for k, a in weights.blocks.items()}, **hyper)


def adam_step(weights, grads, state):
    """Apply one bias-corrected Adam update to ``weights`` in place."""
    for name in BLOCK_NAMES:
        g = grads[name]
        if g.shape != weights.blocks[name].shape:
            raise ShapeError(f"gradient {name}: shape {g.shape} != {weights.blocks[name].shape}")
        if not np.isfinite(np.sum(g, dtype=np.float64)):
            raise OptimizerError(f"non-finite gradient in block {name!r}", block=name)
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in BLOCK_NAMES:
        p = weights.blocks[name]
        kernels.adam_update(p, grads[name].astype(p.dtype, copy=False),
                            state.m[name], state.v[name],
                            state.lr, state.beta1, state.beta2, state.eps, bc1, bc2)
    return weights, state


# -- weight files -----------------------------------------------------------

def save_weights(weights, path, **metadata):
    """Write the binary weight file (magic, manifest length, JSON, float32 LE)."""
    meta = dict(weights.meta)
    meta.update(metadata)
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": {
            "patch_size": weights.patch_size,
            "channels": list(CHANNELS),
            "kernel_size": KERNEL_SIZE,
            "pool": 2,
            "activation": "relu",
            "output": "sigmoid",
        },
        "dtype": "<f4",
        "blocks": [{"name": n, "shape": list(weights.blocks[n].shape)} for n in BLOCK_NAMES],
        "seed": weights.seed,
        "metadata": meta,
    }
    raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for n in BLOCK_NAMES:
            fh.write(np.ascontiguousarray(weights.blocks[n], dtype="<f4").tobytes())


def load_weights(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r}", offset=0)
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    (length,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + length:
        raise FormatError(f"{path}: truncated manifest", offset=len(data))
    try:
        manifest = json.loads(data[12:12 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest: {exc}", offset=12) from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version "
                          f"{manifest.get('format_version')!r}", offset=12)
    arch = manifest.get("architecture", {})
    if tuple(arch.get("channels", ())) != CHANNELS or arch.get("kernel_size") != KERNEL_SIZE:
        raise ShapeError(f"{path}: architecture {arch} does not match this network")
    patch_size = arch.get("patch_size")
    expected = param_shapes(patch_size)
    declared = [(b["name"], tuple(b["shape"])) for b in manifest["blocks"]]
    if declared != list(expected.items()):
        raise ShapeError(f"{path}: manifest blocks {declared} != expected {list(expected.items())}")

    offset = 12 + length
    blocks = {}
    for name, shape in declared:
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: payload truncated in block {name!r}", offset=len(data))
        blocks[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4,
                                     offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes", offset=offset)
    return ModelWeights(blocks, patch_size, manifest.get("seed"), manifest.get("metadata", {}))
