"""Minimal feed-forward network with exact analytic gradients.

An MLP encoder (ReLU hidden layers, identity at the representation
output) followed by a linear classifier head. All math is float64 and
deterministic. The backward pass differentiates the combined loss
(cross-entropy + the two contrastive terms), including the flow through
representation L2-normalization.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigurationError, FormatError, NumericError
from .losses import (
    LossConfig,
    _global_terms,
    _local_terms,
    cross_entropy_from_logits,
    l2_normalize,
)

if TYPE_CHECKING:  # pragma: no cover
    from .federation import PrototypeBank

CHECKPOINT_MAGIC = b"FUCRT1\n"


@dataclass(frozen=True)
class ModelDims:
    """Layer widths: input -> hidden... -> representation -> classes."""

    input_dim: int
    hidden: tuple[int, ...]
    rep_dim: int
    class_count: int

    def __post_init__(self):
        sizes = (self.input_dim, *self.hidden, self.rep_dim, self.class_count)
        if any(int(s) <= 0 for s in sizes):
            raise ConfigurationError(f"all layer widths must be positive, got {sizes}")

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden, self.rep_dim, self.class_count]
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]

    @property
    def encoder_depth(self) -> int:
        return len(self.hidden) + 1


@dataclass
class ModelParams:
    """Weights/biases of every layer; layers[:encoder_depth] form the encoder."""

    layers: list[tuple[np.ndarray, np.ndarray]]  # (weight out x in, bias out)
    encoder_depth: int
    dims: ModelDims

    def copy(self) -> "ModelParams":
        return ModelParams(
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            encoder_depth=self.encoder_depth,
            dims=self.dims,
        )

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def byte_size(self) -> int:
        """Size of the serialized checkpoint in bytes."""
        return len(serialize_params(self))


@dataclass
class Gradients:
    """Same shapes as the ModelParams they differentiate."""

    layers: list[tuple[np.ndarray, np.ndarray]]


@dataclass
class ForwardResult:
    representations: np.ndarray  # N x rep_dim
    logits: np.ndarray  # N x C
    probabilities: np.ndarray  # N x C


@dataclass
class _ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # H_i per layer
    preacts: list[np.ndarray] = field(default_factory=list)
    output: np.ndarray | None = None


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Fan-in-scaled uniform weights in +-sqrt(6/fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in dims.layer_sizes:
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        layers.append((w, b))
    return ModelParams(layers=layers, encoder_depth=dims.encoder_depth, dims=dims)


def _relu_after(layer_index: int, encoder_depth: int, n_layers: int) -> bool:
    # Identity at the representation output and at the logits.
    return layer_index != encoder_depth - 1 and layer_index != n_layers - 1


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _run_forward(params: ModelParams, batch: np.ndarray) -> _ForwardCache:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.dims.input_dim:
        raise ConfigurationError(
            f"batch has {batch.shape[1] if batch.ndim == 2 else '?'} columns, "
            f"model expects {params.dims.input_dim}"
        )
    cache = _ForwardCache()
    h = batch
    n_layers = len(params.layers)
    for i, (w, b) in enumerate(params.layers):
        cache.inputs.append(h)
        pre = h @ w.T + b
        cache.preacts.append(pre)
        h = np.maximum(pre, 0.0) if _relu_after(i, params.encoder_depth, n_layers) else pre
    cache.output = h
    return cache


def forward(params: ModelParams, batch: np.ndarray) -> ForwardResult:
    """Representations, logits and softmax probabilities for a batch."""
    cache = _run_forward(params, batch)
    reps = cache.preacts[params.encoder_depth - 1]
    logits = cache.output
    return ForwardResult(representations=reps, logits=logits, probabilities=softmax(logits))


def _loss_and_grads(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    config: LossConfig,
    prototypes: "PrototypeBank | None" = None,
) -> tuple[dict[str, float], Gradients]:
    if config.lambda2 > 0.0 and prototypes is None:
        raise ConfigurationError("global contrastive term active but no prototype bank supplied")

    labels = np.asarray(labels, dtype=np.int64)
    cache = _run_forward(params, batch)
    n = len(labels)
    n_layers = len(params.layers)
    logits = cache.output
    probs = softmax(logits)
    reps = cache.preacts[params.encoder_depth - 1]

    ce = cross_entropy_from_logits(logits, labels)
    parts = {"ce": ce, "local": 0.0, "global": 0.0}

    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n

    g_rep = None
    if config.lambda1 > 0.0 or config.lambda2 > 0.0:
        zhat, norms = l2_normalize(reps)
        d_zhat = np.zeros_like(zhat)
        if config.lambda1 > 0.0:
            local, g_local = _local_terms(zhat, labels, config.tau_t, with_grad=True)
            parts["local"] = local
            d_zhat += config.lambda1 * g_local
        if config.lambda2 > 0.0:
            glob, g_glob = _global_terms(
                zhat,
                labels,
                np.asarray(prototypes.vectors, dtype=np.float64),
                np.asarray(prototypes.present, dtype=bool),
                config.tau_t,
                with_grad=True,
            )
            parts["global"] = glob
            d_zhat += config.lambda2 * g_glob
        # d/dz of zhat = z/||z||: project out the radial component.
        radial = (d_zhat * zhat).sum(axis=1, keepdims=True)
        g_rep = (d_zhat - radial * zhat) / norms[:, None]

    parts["total"] = parts["ce"] + config.lambda1 * parts["local"] + config.lambda2 * parts["global"]

    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * n_layers
    delta = d_logits
    for i in reversed(range(n_layers)):
        w, _ = params.layers[i]
        if _relu_after(i, params.encoder_depth, n_layers):
            d_pre = delta * (cache.preacts[i] > 0.0)
        else:
            d_pre = delta
        grads[i] = (d_pre.T @ cache.inputs[i], d_pre.sum(axis=0))
        delta = d_pre @ w
        if i == params.encoder_depth and g_rep is not None:
            delta = delta + g_rep
    return parts, Gradients(layers=grads)


def backward(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    config: LossConfig,
    prototypes: "PrototypeBank | None" = None,
) -> tuple[float, Gradients]:
    """Combined loss value and its gradients w.r.t. every parameter."""
    parts, grads = _loss_and_grads(params, batch, labels, config, prototypes)
    return parts["total"], grads


def evaluate_loss(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    config: LossConfig,
    prototypes: "PrototypeBank | None" = None,
) -> float:
    """Combined loss value only (used by finite-difference checks)."""
    if config.lambda2 > 0.0 and prototypes is None:
        raise ConfigurationError("global contrastive term active but no prototype bank supplied")
    labels = np.asarray(labels, dtype=np.int64)
    res = forward(params, batch)
    loss = cross_entropy_from_logits(res.logits, labels)
    if config.lambda1 > 0.0 or config.lambda2 > 0.0:
        zhat, _ = l2_normalize(res.representations)
        if config.lambda1 > 0.0:
            local, _ = _local_terms(zhat, labels, config.tau_t, with_grad=False)
            loss += config.lambda1 * local
        if config.lambda2 > 0.0:
            glob, _ = _global_terms(
                zhat,
                labels,
                np.asarray(prototypes.vectors, dtype=np.float64),
                np.asarray(prototypes.present, dtype=bool),
                config.tau_t,
                with_grad=False,
            )
            loss += config.lambda2 * glob
    return float(loss)


def sgd_step(params: ModelParams, gradients: Gradients, lr: float) -> ModelParams:
    """params - lr * gradients, elementwise; rejects non-finite gradients."""
    new_layers = []
    for i, ((w, b), (gw, gb)) in enumerate(zip(params.layers, gradients.layers)):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ConfigurationError(f"gradient shape mismatch at layer {i}")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient entries at layer {i}")
        new_layers.append((w - lr * gw, b - lr * gb))
    return ModelParams(layers=new_layers, encoder_depth=params.encoder_depth, dims=params.dims)


def serialize_params(params: ModelParams) -> bytes:
    """Checkpoint bytes: magic, decimal-text header, little-endian f64 data."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    lines = [str(len(params.layers))]
    for w, _ in params.layers:
        lines.append(f"{w.shape[1]} {w.shape[0]}")
    lines.append(str(params.encoder_depth))
    lines.append(str(params.dims.class_count))
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for w, b in params.layers:
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return buf.getvalue()


def save_params(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_params(params))


def deserialize_params(data: bytes) -> ModelParams:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError("bad checkpoint magic at offset 0")
    pos = len(CHECKPOINT_MAGIC)

    def read_line() -> str:
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"truncated checkpoint header at offset {pos}")
        line = data[pos:end].decode("ascii")
        pos = end + 1
        return line

    try:
        n_layers = int(read_line())
        shapes = []
        for _ in range(n_layers):
            fan_in, fan_out = (int(t) for t in read_line().split())
            shapes.append((fan_in, fan_out))
        encoder_depth = int(read_line())
        class_count = int(read_line())
    except ValueError as exc:
        raise FormatError(f"unparsable checkpoint header near offset {pos}") from exc

    layers = []
    for fan_in, fan_out in shapes:
        w_bytes = fan_out * fan_in * 8
        b_bytes = fan_out * 8
        if pos + w_bytes + b_bytes > len(data):
            raise FormatError(f"truncated checkpoint data at offset {pos}")
        w = np.frombuffer(data[pos : pos + w_bytes], dtype="<f8").reshape(fan_out, fan_in).copy()
        pos += w_bytes
        b = np.frombuffer(data[pos : pos + b_bytes], dtype="<f8").copy()
        pos += b_bytes
        layers.append((w, b))
    if pos != len(data):
        raise FormatError(f"trailing bytes in checkpoint at offset {pos}")

    if encoder_depth < 1 or encoder_depth > n_layers:
        raise FormatError("encoder depth out of range in checkpoint header")
    if shapes[-1][1] != class_count:
        raise FormatError("last layer width disagrees with class count in header")
    dims = ModelDims(
        input_dim=shapes[0][0],
        hidden=tuple(s[1] for s in shapes[: encoder_depth - 1]),
        rep_dim=shapes[encoder_depth - 1][1],
        class_count=class_count,
    )
    return ModelParams(layers=layers, encoder_depth=encoder_depth, dims=dims)


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        return deserialize_params(fh.read())
