"""Vector-quantization bottleneck: codebook storage, nearest-neighbor lookup
with lowest-index tie-breaking, straight-through quantization, and the
quantization/commitment loss pair.

Latent token blocks are float64 arrays shaped (..., m, f); the codebook is a
single shared (c, f) table.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    RngStream,
    ShapeError,
    Tensor,
    gather_rows,
    reshape,
    scalar_mul,
    squared_l2,
    stop_gradient,
    straight_through,
)


@dataclass
class Codebook:
    entries: Tensor  # (c, f), trainable
    usage: np.ndarray  # (c,) int64 lookup counts since last reset

    @property
    def num_codes(self) -> int:
        return self.entries.shape[0]

    @property
    def code_dim(self) -> int:
        return self.entries.shape[1]


def _dedupe_rows(data: np.ndarray, rng: RngStream, scale: float = 1e-6) -> np.ndarray:
    # Re-jitter later duplicates until every row is bitwise unique.
    while True:
        _, first = np.unique(data, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(data.shape[0]), first)
        if dup.size == 0:
            return data
        data[dup] += scale * rng.normal((dup.size, data.shape[1]))


def init_codebook(num_codes: int, code_dim: int, rng: RngStream) -> Codebook:
    """Entries uniform in [-1/sqrt(f), 1/sqrt(f)], re-jittered on collision."""
    if num_codes < 1 or code_dim < 1:
        raise ValueError("codebook needs at least one code and one dimension")
    bound = 1.0 / np.sqrt(code_dim)
    data = (rng.uniform((num_codes, code_dim)) * 2.0 - 1.0) * bound
    data = _dedupe_rows(data, rng)
    return Codebook(entries=Tensor(data, requires_grad=True), usage=np.zeros(num_codes, dtype=np.int64))


def nearest_indices(entries: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Argmin of squared L2 distance per query row; ties go to the lowest
    index (argmin keeps the first occurrence)."""
    d = (
        (queries * queries).sum(axis=1)[:, None]
        - 2.0 * (queries @ entries.T)
        + (entries * entries).sum(axis=1)[None, :]
    )
    return d.argmin(axis=1)


def nearest_code(codebook: Codebook, z: np.ndarray) -> tuple[int, np.ndarray]:
    """Single-vector lookup. Returns (index, copy of the selected entry) and
    counts one usage."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (codebook.code_dim,):
        raise ShapeError("nearest_code", f"query shape {z.shape} != ({codebook.code_dim},)")
    idx = int(nearest_indices(codebook.entries.data, z[None, :])[0])
    codebook.usage[idx] += 1
    return idx, codebook.entries.data[idx].copy()


def quantize(codebook: Codebook, z_tokens: Tensor) -> tuple[Tensor, np.ndarray]:
    """Straight-through quantization of a token block (..., m, f).

    Forward values are exactly the selected codebook rows; the backward is the
    identity onto z_tokens (codebook entries get no gradient through this
    path). Returns (quantized tokens, index array shaped like the leading
    dims).
    """
    if z_tokens.shape[-1] != codebook.code_dim:
        raise ShapeError("quantize", f"token dim {z_tokens.shape[-1]} != code dim {codebook.code_dim}")
    flat = z_tokens.data.reshape(-1, codebook.code_dim)
    idx = nearest_indices(codebook.entries.data, flat)
    np.add.at(codebook.usage, idx, 1)
    target = codebook.entries.data[idx].reshape(z_tokens.shape)
    return straight_through(z_tokens, target), idx.reshape(z_tokens.shape[:-1])


def vq_losses(codebook: Codebook, z_tokens: Tensor, indices: np.ndarray, beta: float = 1.0) -> tuple[Tensor, Tensor]:
    """Quantization and commitment losses for an already-quantized block.

    quantization = beta * ||sg(z) - e||^2 moves only the codebook entries;
    commitment = beta * ||z - sg(e)||^2 moves only the encoder. Both sum over
    the feature axis and average over tokens and batch.
    """
    flat_idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    flat_z = z_tokens if z_tokens.ndim == 2 else _flatten_tokens(z_tokens)
    e_diff = gather_rows(codebook.entries, flat_idx)
    quantization = scalar_mul(squared_l2(stop_gradient(flat_z), e_diff), beta)
    commitment = scalar_mul(squared_l2(flat_z, Tensor(codebook.entries.data[flat_idx])), beta)
    return quantization, commitment


def _flatten_tokens(z_tokens: Tensor) -> Tensor:
    return reshape(z_tokens, (-1, z_tokens.shape[-1]))


def codebook_usage(codebook: Codebook) -> np.ndarray:
    """Copy of the usage histogram; sums to the lookups since the last reset."""
    return codebook.usage.copy()


def reset_usage(codebook: Codebook) -> None:
    codebook.usage[:] = 0


def reinit_dead_codes(
    codebook: Codebook,
    recent_outputs: np.ndarray,
    rng: RngStream,
    threshold: int = 1,
    sigma: float = 1e-3,
) -> int:
    """Reset entries with usage below threshold to random recent encoder
    outputs plus N(0, sigma^2) jitter, then zero all usage counters.

    Returns the number of reset entries. Intended for epoch boundaries during
    stage-1 training.
    """
    recent = np.asarray(recent_outputs, dtype=np.float64)
    if recent.ndim != 2 or recent.shape[0] == 0:
        raise ValueError("recent_outputs must be a non-empty (n, f) buffer")
    if recent.shape[1] != codebook.code_dim:
        raise ShapeError("reinit_dead_codes", f"buffer dim {recent.shape[1]} != code dim {codebook.code_dim}")
    dead = np.flatnonzero(codebook.usage < threshold)
    if dead.size:
        pick = rng.integers(0, recent.shape[0], (dead.size,))
        codebook.entries.data[dead] = recent[pick] + sigma * rng.normal((dead.size, codebook.code_dim))
    reset_usage(codebook)
    return int(dead.size)


def perplexity(counts: np.ndarray) -> float:
    """exp(entropy) of the empirical code distribution; 1 when a single code
    carries all mass, num_codes when uniform."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 1.0
    p = counts[counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))
