"""Contrastive objectives: key queue + InfoNCE, memory bank, triplet, reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, StateError
from .tensor import Tensor

_UNIT_TOL = 1e-4


@dataclass(frozen=True)
class ContrastConfig:
    temperature: float = 0.07
    capacity: int = 256  # 5800 at full scale
    momentum: float = 0.999

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature={self.temperature} must be > 0")
        if self.capacity < 1:
            raise ConfigError(f"capacity={self.capacity} must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum={self.momentum} outside [0, 1)")


def _check_unit_rows(x: np.ndarray, what: str) -> None:
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
        raise ContractError(f"{what}: rows must be unit-norm (got norms in [{norms.min():.6f}, {norms.max():.6f}])")


class DictionaryQueue:
    """Fixed-capacity FIFO of key features, the negative pool for InfoNCE."""

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        if capacity < 1 or dim < 1:
            raise ConfigError(f"queue capacity={capacity}, dim={dim} must be positive")
        self.capacity = capacity
        self.dim = dim
        self.storage = np.zeros((capacity, dim), dtype=dtype)
        self.write_head = 0
        self.filled = 0

    @property
    def is_full(self) -> bool:
        return self.filled == self.capacity

    def keys(self) -> np.ndarray:
        """Stored rows, oldest first."""
        if self.filled < self.capacity:
            return self.storage[: self.filled].copy()
        return np.roll(self.storage, -self.write_head, axis=0)

    def enqueue(self, keys) -> None:
        """Overwrite the ``B`` oldest rows with ``keys``."""
        keys = keys.data if isinstance(keys, Tensor) else np.asarray(keys)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise DimensionError(f"queue holds {self.dim}-d keys, got {keys.shape}")
        B = keys.shape[0]
        if B > self.capacity:
            raise ContractError(f"cannot enqueue {B} keys into a queue of capacity {self.capacity}")
        _check_unit_rows(keys, "enqueue")
        idx = (self.write_head + np.arange(B)) % self.capacity
        self.storage[idx] = keys
        self.write_head = int((self.write_head + B) % self.capacity)
        self.filled = min(self.capacity, self.filled + B)


def enqueue_dequeue(queue: DictionaryQueue, keys) -> None:
    queue.enqueue(keys)


def infonce_with_negatives(q: Tensor, k_pos: np.ndarray, negatives: np.ndarray, tau: float) -> Tensor:
    """InfoNCE over one positive and shared (``[K,D]``) or per-row (``[B,K,D]``) negatives.

    Keys are constants; only ``q`` receives gradient. Logit 0 is the positive.
    """
    if not tau > 0:
        raise ConfigError(f"temperature={tau} must be > 0")
    if q.ndim != 2 or k_pos.shape != q.shape or negatives.shape[-1] != q.shape[1]:
        raise DimensionError(f"infonce: q {q.shape}, k_pos {k_pos.shape}, negatives {negatives.shape}")
    B, D = q.shape
    pos = T.sum(T.mul(q, Tensor(k_pos, dtype=q.dtype)), axis=1)
    neg_t = Tensor(negatives, dtype=q.dtype)
    neg = T.batched_dot(q, neg_t) if negatives.ndim == 3 else T.matmul(q, Tensor(negatives.T, dtype=q.dtype))
    logits = T.scale(T.concat([T.reshape(pos, (B, 1)), neg], axis=1), 1.0 / tau)
    return T.cross_entropy(logits, np.zeros(B, dtype=np.intp))


def infonce_loss(q: Tensor, k_pos, queue: DictionaryQueue, tau: float) -> Tensor:
    """Mean over the batch of ``-log(e^{q.k+/t} / (e^{q.k+/t} + sum_i e^{q.k_i/t}))``.

    The denominator has ``K + 1`` terms: the positive plus every queued key.
    """
    if not tau > 0:
        raise ConfigError(f"temperature={tau} must be > 0")
    if not queue.is_full:
        raise StateError(f"queue holds {queue.filled}/{queue.capacity} keys; fill it before computing the loss")
    k_pos = k_pos.data if isinstance(k_pos, Tensor) else np.asarray(k_pos)
    if q.ndim != 2 or q.shape[1] != queue.dim:
        raise DimensionError(f"q has shape {q.shape}, queue holds {queue.dim}-d keys")
    return infonce_with_negatives(q, k_pos, queue.storage, tau)


class MemoryBank:
    """One unit-norm feature row per training sample."""

    def __init__(self, n: int, dim: int, seed: int, dtype=np.float32):
        rng = np.random.default_rng(seed)
        rows = rng.standard_normal((n, dim))
        self.rows = (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(dtype)

    def __len__(self) -> int:
        return len(self.rows)

    def sample_negatives(self, indices: np.ndarray, n_neg: int, stream: np.random.Generator) -> np.ndarray:
        """``[B, n_neg]`` indices drawn uniformly from rows other than each anchor's own."""
        N = len(self.rows)
        if N < 2:
            raise ContractError("memory bank needs at least two rows to draw negatives")
        draws = stream.integers(0, N - 1, size=(len(indices), n_neg))
        return draws + (draws >= indices[:, None])


def memory_bank_loss(
    features: Tensor,
    indices,
    bank: MemoryBank,
    tau: float,
    n_neg: int,
    stream: np.random.Generator,
) -> Tensor:
    """InfoNCE against the bank; afterwards the batch's rows are overwritten.

    The positive for row ``b`` is ``bank[indices[b]]`` (the same sample's stored
    feature); negatives are ``n_neg`` rows of other samples. ``features`` must
    be unit-norm, so overwritten rows stay normalised.
    """
    indices = np.asarray(indices, dtype=np.intp)
    N = len(bank)
    if indices.shape != (features.shape[0],):
        raise DimensionError(f"{len(indices)} indices for a batch of {features.shape[0]}")
    if indices.size and (indices.min() < 0 or indices.max() >= N):
        raise ContractError(f"memory bank index out of range [0, {N})")
    if n_neg < 1:
        raise ConfigError(f"n_neg={n_neg} must be >= 1")
    _check_unit_rows(features.data, "memory_bank_loss features")
    neg_idx = bank.sample_negatives(indices, n_neg, stream)
    loss = infonce_with_negatives(features, bank.rows[indices], bank.rows[neg_idx], tau)
    bank.rows[indices] = features.data
    return loss


def pairwise_distance(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise Euclidean distance ``sqrt(|a - b|^2 + eps)``."""
    d = T.sub(a, b)
    return T.sqrt(T.sum(T.mul(d, d), axis=1), eps)


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float = 1.0) -> Tensor:
    """Mean of ``max(0, |a - p| - |a - n| + margin)``."""
    if not (anchor.shape == positive.shape == negative.shape) or anchor.ndim != 2:
        raise DimensionError(f"triplet shapes {anchor.shape}, {positive.shape}, {negative.shape}")
    if margin < 0:
        raise ConfigError(f"margin={margin} must be >= 0")
    m = Tensor(np.full(anchor.shape[0], margin), dtype=anchor.dtype)
    gap = T.add(T.sub(pairwise_distance(anchor, positive), pairwise_distance(anchor, negative)), m)
    return T.mean(T.relu(gap))


def autoencoder_loss(inputs: Tensor, reconstruction: Tensor) -> Tensor:
    """Mean squared reconstruction error over every element."""
    if inputs.shape != reconstruction.shape:
        raise DimensionError(f"input {inputs.shape} vs reconstruction {reconstruction.shape}")
    r = T.sub(reconstruction, inputs)
    return T.mean(T.mul(r, r))
