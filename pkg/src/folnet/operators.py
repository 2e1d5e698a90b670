"""The seven neural logic operators.

Each operator is a deterministic contraction between a kernel and a premise
tensor.  Kernels arrive pre-projected (and, where applicable, already
softmax-normalized over their reduction axis); the projections live in the
model layer.  An optional 0/1 mask zeroes the contributions named in the
decoder masking table: multiplicative on premises and identity kernels, and
pre-normalization (as large negative logits) on softmax kernels via
``masked_softmax``.

Shapes use B=batch, T=tokens, H=heads, S=head size, W=channel width.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from folnet.tensor import (
    ShapeError,
    Tensor,
    gelu,
    linear,
    matmul,
    permute,
    scale_by,
    softmax_axis,
)

MASK_NEG = -1e9


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def masked_softmax(logits: Tensor, mask: Optional[np.ndarray], axis: int) -> Tensor:
    """Softmax with masked entries pushed to -1e9 before normalization."""
    if mask is not None:
        logits = logits + Tensor((1.0 - np.asarray(mask, dtype=np.float64)) * MASK_NEG)
    return softmax_axis(logits, axis)


def _apply_mask(x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    if mask is None:
        return x
    mask = np.asarray(mask, dtype=np.float64)
    try:
        np.broadcast_shapes(x.shape, mask.shape)
    except ValueError:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {x.shape}")
    return scale_by(x, mask)


def op_join(kernel: Tensor, premise: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """out[x,h,s] = sum_a K[h,x,a] * v[a,h,s].  Self-attention application."""
    _check(kernel.ndim == 4 and premise.ndim == 4, f"join expects 4-d inputs, got {kernel.shape}, {premise.shape}")
    B, H, T, T2 = kernel.shape
    _check(T == T2, f"join kernel must be square over tokens, got {kernel.shape}")
    _check(premise.shape[0] == B and premise.shape[1] == T and premise.shape[2] == H,
           f"join premise {premise.shape} incompatible with kernel {kernel.shape}")
    kernel = _apply_mask(kernel, mask)
    v = permute(premise, (0, 2, 1, 3))            # [B,H,T,S]
    out = matmul(kernel, v)                       # [B,H,T,S]
    return permute(out, (0, 2, 1, 3))             # [B,T,H,S]


def op_assoc(kernel: Tensor, premise: Tensor) -> Tensor:
    """out[h,x,y] = sum_w K[x,h,w] * v[y,h,w] / sqrt(W).  Attention scores."""
    _check(kernel.shape == premise.shape and kernel.ndim == 4,
           f"assoc expects matching 4-d inputs, got {kernel.shape}, {premise.shape}")
    W = kernel.shape[-1]
    k = permute(kernel, (0, 2, 1, 3))             # [B,H,T,W]
    v = permute(premise, (0, 2, 3, 1))            # [B,H,W,T]
    return scale_by(matmul(k, v), 1.0 / np.sqrt(W))  # [B,H,T,T]


def op_cjoin(kernel: Tensor, premise: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """out[x,h,s] = sum_a K[a,h,s] * v[h,x,a].  Kernel/premise-swapped join."""
    _check(kernel.ndim == 4 and premise.ndim == 4, f"cjoin expects 4-d inputs, got {kernel.shape}, {premise.shape}")
    B, T, H, S = kernel.shape
    _check(premise.shape == (B, H, T, T),
           f"cjoin premise {premise.shape} incompatible with kernel {kernel.shape}")
    premise = _apply_mask(premise, mask)
    k = permute(kernel, (0, 2, 1, 3))             # [B,H,a,S]
    out = matmul(premise, k)                      # [B,H,x,S]
    return permute(out, (0, 2, 1, 3))             # [B,T,H,S]


def op_mu(kernel: Tensor, premise: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """out[x,h,s] = sum_a K[h,x,a] * v[s,x,a].  Generalizes RPE value bias."""
    _check(kernel.ndim == 4 and premise.ndim == 4, f"mu expects 4-d inputs, got {kernel.shape}, {premise.shape}")
    B, H, T, T2 = kernel.shape
    _check(T == T2, f"mu kernel must be square over tokens, got {kernel.shape}")
    _check(premise.shape[0] == B and premise.shape[2] == T and premise.shape[3] == T,
           f"mu premise {premise.shape} incompatible with kernel {kernel.shape}")
    kernel = _apply_mask(kernel, mask)
    premise = _apply_mask(premise, mask)
    k = permute(kernel, (0, 2, 1, 3))             # [B,x,H,a]
    v = permute(premise, (0, 2, 3, 1))            # [B,x,a,S]
    return matmul(k, v)                           # [B,x,H,S] == [B,T,H,S]


def op_prod(kernel: Tensor, premise: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """out[h,x,y] = sum_w K[x,h,w] * v[w,x,y].  Generalizes RPE score bias."""
    _check(kernel.ndim == 4 and premise.ndim == 4, f"prod expects 4-d inputs, got {kernel.shape}, {premise.shape}")
    B, T, H, W = kernel.shape
    _check(premise.shape == (B, W, T, T),
           f"prod premise {premise.shape} incompatible with kernel {kernel.shape}")
    premise = _apply_mask(premise, mask)
    v = permute(premise, (0, 2, 1, 3))            # [B,x,W,y]
    out = matmul(kernel, v)                       # [B,x,H,y]
    return permute(out, (0, 2, 1, 3))             # [B,H,T,T]


def op_trans(kernel: Tensor, premise: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """out[h,x,y] = sum_a K[h,x,a] * v[h,a,y].  Relation composition."""
    _check(kernel.ndim == 4 and premise.ndim == 4, f"trans expects 4-d inputs, got {kernel.shape}, {premise.shape}")
    _check(kernel.shape == premise.shape and kernel.shape[-1] == kernel.shape[-2],
           f"trans expects matching square inputs, got {kernel.shape}, {premise.shape}")
    kernel = _apply_mask(kernel, mask)
    premise = _apply_mask(premise, mask)
    return matmul(kernel, premise)


def bool_ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Pointwise Boolean block: w2 . gelu(w1 . x + b1) + b2."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)
