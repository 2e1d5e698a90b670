"""Decoder-style variants of the model via 0/1 masks, plus greedy decoding.

Causal and prefix language modeling reuse the encoder unchanged: a shared
[T, T] visibility matrix is folded into exactly the softmax kernels and
binary premises that mix information across positions.  The encoder-decoder
variant additionally needs a reworked relation-composition step, because the
intermediate position `a` in "x relates to a, a relates to y" must respect
which side (input or target) each position lives on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from folnet.atoms import InputBatch
from folnet.model import ModelConfig, mlm_logits, model_forward
from folnet.operators import op_trans
from folnet.tensor import Tensor, scale_by

MODES = ("none", "causal", "prefix", "encdec")


@dataclass
class MaskSet:
    mode: str
    length: int
    prefix_len: Optional[int] = None
    matrix: Optional[np.ndarray] = None  # [T, T] 0/1; None means all visible


def build_masks(mode: str, T: int, prefix_len: Optional[int] = None) -> MaskSet:
    """Visibility matrix M[x, a] = 1 iff position x may read position a."""
    if mode not in MODES:
        raise ValueError(f"unknown mask mode {mode!r}; expected one of {MODES}")
    if T <= 0:
        raise ValueError(f"sequence length must be positive, got {T}")
    if mode == "none":
        return MaskSet(mode, T, None, None)
    causal = np.tril(np.ones((T, T)))
    if mode == "causal":
        return MaskSet(mode, T, None, causal)
    if prefix_len is None or not (0 <= prefix_len < T):
        raise ValueError(f"prefix_len must lie in [0, {T}), got {prefix_len}")
    if mode == "prefix" or mode == "encdec":
        # bidirectional within the input block, causal everywhere else
        block = np.zeros((T, T))
        block[:prefix_len, :prefix_len] = 1.0
        return MaskSet(mode, T, prefix_len, np.maximum(causal, block))


def decoder_forward(
    batch: InputBatch,
    params: dict[str, Tensor],
    config: ModelConfig,
    masks: MaskSet,
    train: bool = False,
    rng=None,
) -> tuple[Tensor, Tensor]:
    """model_forward with autoregressive visibility applied."""
    if masks.mode not in ("causal", "prefix"):
        raise ValueError(f"decoder_forward expects causal or prefix masks, got {masks.mode!r}")
    if masks.length != batch.length:
        raise ValueError(f"mask length {masks.length} != batch length {batch.length}")
    return model_forward(batch, params, config, mode_matrix=masks.matrix,
                         train=train, rng=rng)


def next_token_logits(
    batch: InputBatch, params: dict[str, Tensor], config: ModelConfig, masks: MaskSet
) -> Tensor:
    """[B, T, V] logits; row t predicts the token at position t + 1."""
    u, _ = decoder_forward(batch, params, config, masks)
    return mlm_logits(u, params, config)


def encdec_trans(
    kernel: Tensor, v_enc: Tensor, v_dec: Tensor, input_len: int
) -> Tensor:
    """Relation composition split across encoder/decoder position sets.

    Positions [0, input_len) are the input set I, the rest the target set T.
    Output entry (x, y): for y in T, sum over a in T of K(x,a)·v_dec(a,y);
    for y in I, that same target-side sum plus the input-side sum over a in I
    of K(x,a)·v_enc(a,y).
    """
    if kernel.shape != v_dec.shape or kernel.shape != v_enc.shape:
        raise ValueError(
            f"shape mismatch: kernel {kernel.shape}, enc {v_enc.shape}, dec {v_dec.shape}"
        )
    T = kernel.shape[-1]
    if not 0 <= input_len <= T:
        raise ValueError(f"input_len must lie in [0, {T}], got {input_len}")
    in_target = (np.arange(T) >= input_len).astype(np.float64)
    over_a_target = in_target[None, :]          # selects summation index a in T
    over_a_input = 1.0 - over_a_target
    y_in_input = (1.0 - in_target)[None, :]     # selects output column y in I
    out = op_trans(scale_by(kernel, over_a_target), v_dec)
    if input_len > 0:
        enc_part = op_trans(scale_by(kernel, over_a_input), v_enc)
        out = out + scale_by(enc_part, y_in_input)
    return out


def greedy_generate(
    prompt: np.ndarray,
    params: dict[str, Tensor],
    config: ModelConfig,
    max_len: int,
    end_token: Optional[int] = None,
) -> np.ndarray:
    """Extend a prompt one argmax token at a time under the causal mask.

    Re-runs the full forward pass per step (no caching), which keeps every
    emitted token identical to what a from-scratch forward would produce.
    """
    prompt = np.asarray(prompt, dtype=np.intp)
    if prompt.ndim != 1 or prompt.size == 0:
        raise ValueError(f"prompt must be a nonempty 1-d id array, got shape {prompt.shape}")
    ids = list(prompt)
    while len(ids) < max_len:
        T = len(ids)
        batch = InputBatch(
            token_ids=np.asarray([ids]),
            seq_ids=np.zeros((1, T), dtype=np.intp),
            pad_mask=np.ones((1, T)),
        )
        logits = next_token_logits(batch, params, config, build_masks("causal", T))
        nxt = int(np.argmax(logits.data[0, -1]))
        ids.append(nxt)
        if end_token is not None and nxt == end_token:
            break
    return np.asarray(ids, dtype=np.intp)
