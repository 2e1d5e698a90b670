"""Base-atom encoding: token/segment ids to unary logits, clipped relative
distances to binary logits.

Position 0 is reserved for the classification token.  Distance ids depend
only on (clipped) offsets within a segment, so no absolute position leaks
into the model unless the optional absolute-position table is enabled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from folnet.tensor import Tensor, embedding


@dataclass
class InputBatch:
    token_ids: np.ndarray   # [B, T] ints in [0, V)
    seq_ids: np.ndarray     # [B, T] ints in {0, 1}
    pad_mask: np.ndarray    # [B, T] 0/1, 0 at padding

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.intp)
        self.seq_ids = np.asarray(self.seq_ids, dtype=np.intp)
        self.pad_mask = np.asarray(self.pad_mask, dtype=np.float64)
        if not (self.token_ids.shape == self.seq_ids.shape == self.pad_mask.shape):
            raise ValueError(
                f"batch field shapes differ: {self.token_ids.shape}, "
                f"{self.seq_ids.shape}, {self.pad_mask.shape}"
            )

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def length(self) -> int:
        return self.token_ids.shape[1]


@dataclass
class EmbeddingTables:
    token_embedding: Tensor     # [V, D1]
    seq_embedding: Tensor       # [2, D1]
    reldist_embedding: Tensor   # [2*delta + 2, D2]
    abs_pos_embedding: Tensor | None = None  # [T_max, D1], optional


def clipped_rel_dist(t: int, tau: int, seq_t: int, seq_tau: int, delta: int) -> int:
    """Clipped signed distance id between positions t and tau.

    Regular positions in the same segment get the clipped offset tau - t;
    cross-segment pairs collapse to the single id delta + 1; pairs involving
    position 0 (the classification token) get the ids delta, -delta or 0.
    """
    if t < 0 or tau < 0:
        raise ValueError(f"positions must be nonnegative, got t={t}, tau={tau}")
    if t == 0 and tau == 0:
        return 0
    if t == 0:
        return delta
    if tau == 0:
        return -delta
    if seq_t != seq_tau:
        return delta + 1
    return max(1 - delta, min(tau - t, delta - 1))


def rel_dist_id_to_row(d: int, delta: int) -> int:
    """Map a distance id in {-delta, ..., delta+1} to a table row."""
    return d + delta


def build_rel_dist_matrix(batch: InputBatch, delta: int) -> np.ndarray:
    """Vectorized distance-id tensor [B, T, T]; entry (t, tau) follows
    clipped_rel_dist on the batch's segment ids."""
    T = batch.length
    t = np.arange(T)[:, None]
    tau = np.arange(T)[None, :]
    offset = np.clip(tau - t, 1 - delta, delta - 1)        # [T, T]
    same_seq = batch.seq_ids[:, :, None] == batch.seq_ids[:, None, :]
    ids = np.where(same_seq, offset[None], delta + 1)
    ids = np.where(t[None] == 0, delta, ids)
    ids = np.where(tau[None] == 0, -delta, ids)
    ids[:, 0, 0] = 0
    return ids.astype(np.intp)


def encode_base_atoms(
    batch: InputBatch, tables: EmbeddingTables, delta: int
) -> tuple[Tensor, Tensor]:
    """Return (unary [B,T,D1], binary [B,T,T,D2]) base-atom logits."""
    V = tables.token_embedding.shape[0]
    if batch.token_ids.size and batch.token_ids.max() >= V:
        raise IndexError(f"token id {batch.token_ids.max()} out of range for vocab {V}")
    u0 = embedding(tables.token_embedding, batch.token_ids) + embedding(
        tables.seq_embedding, batch.seq_ids
    )
    if tables.abs_pos_embedding is not None:
        pos = np.arange(batch.length)
        u0 = u0 + embedding(tables.abs_pos_embedding, pos)
    dist_ids = build_rel_dist_matrix(batch, delta)
    U0 = embedding(tables.reldist_embedding, dist_ids + delta)
    return u0, U0
