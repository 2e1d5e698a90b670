"""Forward-chained dual-branch model built from the logic operators.

Each layer first runs the binary mixers (assoc/prod/trans) over the incoming
atoms, merges them into the binary residual stream, then runs the unary
mixers (join/mu/cjoin) whose relation-typed kernels and premises read the
*pre-normalization* binary state of the same layer.  This ordering is what
lets a join+assoc configuration collapse exactly onto a standard post-LN
transformer encoder layer (the attention scores reach the join kernel
without an intervening normalization).

Parameters live in a flat ordered dict of named tensors, which also defines
the checkpoint layout.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from folnet.atoms import EmbeddingTables, InputBatch, encode_base_atoms
from folnet.operators import (
    bool_ffn,
    masked_softmax,
    op_assoc,
    op_cjoin,
    op_join,
    op_mu,
    op_prod,
    op_trans,
)
from folnet.tensor import (
    RngState,
    Tensor,
    dropout,
    elementwise,
    index_select,
    layer_norm,
    linear,
    parameter,
    permute,
    reshape,
    scale_by,
    tanh,
    tensor_sum,
)

UNARY_LETTERS = "cjm"
BINARY_LETTERS = "apt"

# Table-driven masking for decoder modes: which ops get their (softmax)
# kernel masked and which get their premise masked.
KERNEL_MASKED_OPS = frozenset("jmt")
PREMISE_MASKED_OPS = frozenset("cmpt")


@dataclass(frozen=True)
class OperatorSpec:
    unary_ops: tuple[str, ...]
    binary_ops: tuple[str, ...]

    def __str__(self):
        return "".join(self.unary_ops) + "." + "".join(self.binary_ops)


def parse_operator_spec(s: str) -> OperatorSpec:
    """Parse a spec like "jmc.atp" into unary and binary operator sets."""
    if s.count(".") != 1:
        raise ValueError(f"operator spec must contain exactly one '.': {s!r}")
    unary, binary = s.split(".")
    for part, allowed, kind in ((unary, UNARY_LETTERS, "unary"), (binary, BINARY_LETTERS, "binary")):
        for ch in part:
            if ch not in allowed:
                raise ValueError(f"unknown {kind} operator {ch!r} in spec {s!r}")
        if len(set(part)) != len(part):
            raise ValueError(f"duplicate operator letter in spec {s!r}")
    if not unary and not binary:
        raise ValueError(f"operator spec enables nothing: {s!r}")
    return OperatorSpec(tuple(unary), tuple(binary))


@dataclass
class ModelConfig:
    num_layers: int = 2
    d_unary: int = 64
    d_binary: int = 8
    n_heads: int = 4
    head_size: int = 16
    delta: int = 8
    vocab_size: int = 16
    ffn_unary: int = 128
    ffn_binary: int = 32
    op_spec: str = "jmc.atp"
    dropout: float = 0.0
    attn_dropout: float = 0.0
    use_ape: bool = False
    max_len: int = 128
    tie_mlm: bool = True
    n_classes: int = 2

    def __post_init__(self):
        if self.d_unary != self.n_heads * self.head_size:
            raise ValueError(
                f"d_unary ({self.d_unary}) must equal n_heads*head_size "
                f"({self.n_heads}*{self.head_size})"
            )
        for name in ("d_unary", "d_binary", "n_heads", "head_size", "delta",
                     "vocab_size", "ffn_unary", "ffn_binary"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        self.spec = parse_operator_spec(self.op_spec)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn until within two standard deviations."""
    x = rng.standard_normal(shape) * std
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(x) > 2 * std
    return x


def init_params(config: ModelConfig, rng: RngState) -> dict[str, Tensor]:
    """Create the full parameter dict: embeddings, L layers, and both heads."""
    g = rng.generator()
    D1, D2, H, S = config.d_unary, config.d_binary, config.n_heads, config.head_size
    params: dict[str, Tensor] = {}

    def proj(name, din, dout):
        params[f"{name}.w"] = parameter(_trunc_normal(g, (din, dout)), name=f"{name}.w")
        params[f"{name}.b"] = parameter(np.zeros(dout), name=f"{name}.b")

    def norm(name, d):
        params[f"{name}.g"] = parameter(np.ones(d), name=f"{name}.g")
        params[f"{name}.b"] = parameter(np.zeros(d), name=f"{name}.b")

    params["emb.token"] = parameter(_trunc_normal(g, (config.vocab_size, D1)), name="emb.token")
    params["emb.seq"] = parameter(_trunc_normal(g, (2, D1)), name="emb.seq")
    params["emb.dist"] = parameter(_trunc_normal(g, (2 * config.delta + 2, D2)), name="emb.dist")
    if config.use_ape:
        params["emb.ape"] = parameter(_trunc_normal(g, (config.max_len, D1)), name="emb.ape")

    spec = config.spec
    for l in range(config.num_layers):
        pre = f"layer{l}."
        if "a" in spec.binary_ops:
            proj(pre + "a.k", D1, H * S)
            proj(pre + "a.v", D1, H * S)
        if "p" in spec.binary_ops:
            proj(pre + "p.k", D1, H * D2)
            proj(pre + "p.v", D2, D2)
        if "t" in spec.binary_ops:
            proj(pre + "t.k", D2, H)
            proj(pre + "t.v", D2, H)
        if spec.binary_ops:
            proj(pre + "bin.out", H, D2)
        norm(pre + "bin.ln1", D2)
        proj(pre + "bin.ffn.1", D2, config.ffn_binary)
        proj(pre + "bin.ffn.2", config.ffn_binary, D2)
        norm(pre + "bin.ln2", D2)
        if "j" in spec.unary_ops:
            proj(pre + "j.k", D2, H)
            proj(pre + "j.v", D1, D1)
        if "m" in spec.unary_ops:
            proj(pre + "m.k", D2, H)
            proj(pre + "m.v", D2, S)
        if "c" in spec.unary_ops:
            proj(pre + "c.k", D1, D1)
            proj(pre + "c.v", D2, H)
        if spec.unary_ops:
            proj(pre + "uni.out", D1, D1)
        norm(pre + "uni.ln1", D1)
        proj(pre + "uni.ffn.1", D1, config.ffn_unary)
        proj(pre + "uni.ffn.2", config.ffn_unary, D1)
        norm(pre + "uni.ln2", D1)

    proj("mlm.dense", D1, D1)
    norm("mlm.ln", D1)
    params["mlm.bias"] = parameter(np.zeros(config.vocab_size), name="mlm.bias")
    if not config.tie_mlm:
        params["mlm.decoder"] = parameter(
            _trunc_normal(g, (D1, config.vocab_size)), name="mlm.decoder"
        )
    proj("cls.pool", D1, D1)
    proj("cls.out", D1, config.n_classes)
    return params


class LayerMasks:
    """Per-op kernel/premise masks: decoder-mode pattern folded with padding.

    Kernel masks silence softmax columns (pad tokens and, in decoder modes,
    the future); premise masks zero binary-atom entries multiplicatively.
    """

    def __init__(self, pad_mask: np.ndarray, mode_matrix: Optional[np.ndarray]):
        B, T = pad_mask.shape
        self.pad_mask = pad_mask
        self.mode_matrix = mode_matrix
        pad_col = pad_mask[:, None, None, :]                 # [B,1,1,T]
        mm = None if mode_matrix is None else mode_matrix[None, None]  # [1,1,T,T]
        self._kernel: dict[str, Optional[np.ndarray]] = {}
        for op in "jmt":
            m = pad_col
            if mm is not None and op in KERNEL_MASKED_OPS:
                m = m * mm
            self._kernel[op] = m
        # cjoin kernel is unary-typed: softmax over its token axis (axis 1)
        self._kernel["c"] = pad_mask[:, :, None, None]       # [B,T,1,1]
        self._premise: dict[str, Optional[np.ndarray]] = {}
        for op in "cmpt":
            self._premise[op] = mm if op in PREMISE_MASKED_OPS else None

    def kernel(self, op: str) -> Optional[np.ndarray]:
        return self._kernel.get(op)

    def cjoin_pair(self) -> Optional[np.ndarray]:
        """[B,T,T,1,1] per-pair visibility for the decoder-mode cjoin kernel.

        The plain cjoin kernel softmax normalizes over every token at once,
        which would let future positions shift the normalizer of past ones.
        Decoder modes therefore renormalize per output position over its
        visible set; with everything visible this is the plain kernel again.
        """
        if self.mode_matrix is None:
            return None
        pair = self.pad_mask[:, None, :] * self.mode_matrix[None]  # [B,T,T]
        return pair[..., None, None]

    def premise(self, op: str) -> Optional[np.ndarray]:
        return self._premise.get(op)


def layer_forward(
    u: Tensor,
    U: Tensor,
    params: dict[str, Tensor],
    layer_idx: int,
    config: ModelConfig,
    masks: Optional[LayerMasks] = None,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, Tensor]:
    """One deduction step: (u, U) -> (u', U')."""
    spec = config.spec
    B, T, D1 = u.shape
    H, S, D2 = config.n_heads, config.head_size, config.d_binary
    if U.shape != (B, T, T, D2):
        raise ValueError(f"binary atoms shape {U.shape} incompatible with unary {u.shape}")
    if masks is None:
        masks = LayerMasks(np.ones((B, T)), None)
    attn_drop = config.attn_dropout if train else 0.0
    drop = config.dropout if train else 0.0

    def p(name):
        return params[f"layer{layer_idx}.{name}"]

    def lin(x, name):
        return linear(x, p(name + ".w"), p(name + ".b"))

    def acc(total, piece):
        return piece if total is None else total + piece

    # binary mixers read the incoming atoms
    Z = None
    if "a" in spec.binary_ops:
        k = reshape(lin(u, "a.k"), (B, T, H, S))
        v = reshape(lin(u, "a.v"), (B, T, H, S))
        Z = acc(Z, op_assoc(k, v))
    if "p" in spec.binary_ops:
        k = reshape(lin(u, "p.k"), (B, T, H, D2))
        v = permute(lin(U, "p.v"), (0, 3, 1, 2))             # [B,D2,T,T]
        Z = acc(Z, op_prod(k, v, mask=masks.premise("p")))
    if "t" in spec.binary_ops:
        klog = permute(lin(U, "t.k"), (0, 3, 1, 2))          # [B,H,T,T]
        K = dropout(masked_softmax(klog, masks.kernel("t"), axis=-1), attn_drop, rng)
        v = permute(lin(U, "t.v"), (0, 3, 1, 2))
        Z = acc(Z, op_trans(K, v, mask=masks.premise("t")))

    if Z is not None:
        U_mid = U + dropout(lin(permute(Z, (0, 2, 3, 1)), "bin.out"), drop, rng)
    else:
        U_mid = U
    U_norm = layer_norm(U_mid, p("bin.ln1.g"), p("bin.ln1.b"))
    ffn_b = bool_ffn(U_norm, p("bin.ffn.1.w"), p("bin.ffn.1.b"),
                     p("bin.ffn.2.w"), p("bin.ffn.2.b"))
    U_out = layer_norm(U_norm + dropout(ffn_b, drop, rng),
                       p("bin.ln2.g"), p("bin.ln2.b"))

    # unary mixers: relation-typed inputs come from this layer's pre-norm
    # binary state, so freshly deduced relations steer the token mixing
    Y = None
    if "j" in spec.unary_ops:
        klog = permute(lin(U_mid, "j.k"), (0, 3, 1, 2))      # [B,H,T,T]
        K = dropout(masked_softmax(klog, masks.kernel("j"), axis=-1), attn_drop, rng)
        v = reshape(lin(u, "j.v"), (B, T, H, S))
        Y = acc(Y, op_join(K, v))
    if "m" in spec.unary_ops:
        klog = permute(lin(U_mid, "m.k"), (0, 3, 1, 2))
        K = dropout(masked_softmax(klog, masks.kernel("m"), axis=-1), attn_drop, rng)
        v = permute(lin(U_mid, "m.v"), (0, 3, 1, 2))         # [B,S,T,T]
        Y = acc(Y, op_mu(K, v, mask=masks.premise("m")))
    if "c" in spec.unary_ops:
        pair = masks.cjoin_pair()
        if pair is None:
            klog = reshape(lin(u, "c.k"), (B, T, H, S))
            K = dropout(masked_softmax(klog, masks.kernel("c"), axis=1), attn_drop, rng)
            v = permute(lin(U_mid, "c.v"), (0, 3, 1, 2))     # [B,H,T,T]
            Y = acc(Y, op_cjoin(K, v, mask=masks.premise("c")))
        else:
            # decoder modes: renormalize the kernel per output position so
            # invisible tokens cannot reach it through the softmax normalizer
            klog = reshape(lin(u, "c.k"), (B, 1, T, H, S))
            K = dropout(masked_softmax(klog, pair, axis=2), attn_drop, rng)
            v = reshape(lin(U_mid, "c.v"), (B, T, T, H, 1))  # v_h(x, a)
            v = scale_by(v, masks.mode_matrix[None, :, :, None, None])
            Y = acc(Y, tensor_sum(K * v, axis=2))            # [B,T,H,S]

    if Y is not None:
        u_mid = u + dropout(lin(reshape(Y, (B, T, D1)), "uni.out"), drop, rng)
    else:
        u_mid = u
    u_norm = layer_norm(u_mid, p("uni.ln1.g"), p("uni.ln1.b"))
    ffn_u = bool_ffn(u_norm, p("uni.ffn.1.w"), p("uni.ffn.1.b"),
                     p("uni.ffn.2.w"), p("uni.ffn.2.b"))
    u_out = layer_norm(u_norm + dropout(ffn_u, drop, rng),
                       p("uni.ln2.g"), p("uni.ln2.b"))
    return u_out, U_out


def model_forward(
    batch: InputBatch,
    params: dict[str, Tensor],
    config: ModelConfig,
    mode_matrix: Optional[np.ndarray] = None,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, Tensor]:
    """Encode base atoms, then chain all layers.  Returns (u_L, U_L)."""
    tables = EmbeddingTables(
        token_embedding=params["emb.token"],
        seq_embedding=params["emb.seq"],
        reldist_embedding=params["emb.dist"],
        abs_pos_embedding=params.get("emb.ape") if config.use_ape else None,
    )
    u, U = encode_base_atoms(batch, tables, config.delta)
    masks = LayerMasks(batch.pad_mask, mode_matrix)
    for l in range(config.num_layers):
        u, U = layer_forward(u, U, params, l, config, masks, train=train, rng=rng)
    return u, U


# ---- output heads ----------------------------------------------------


def mlm_logits(
    u: Tensor,
    params: dict[str, Tensor],
    config: ModelConfig,
    positions=None,
) -> Tensor:
    """Vocabulary logits from unary outputs; `positions` optionally selects
    token positions (shared across the batch) before the decode."""
    if positions is not None:
        positions = np.asarray(positions, dtype=np.intp)
        if positions.size and (positions.min() < 0 or positions.max() >= u.shape[1]):
            raise IndexError(f"position out of range [0, {u.shape[1]})")
        u = index_select(u, 1, positions)
    h = elementwise(linear(u, params["mlm.dense.w"], params["mlm.dense.b"]), "gelu")
    h = layer_norm(h, params["mlm.ln.g"], params["mlm.ln.b"])
    if config.tie_mlm:
        decoder = permute(params["emb.token"], (1, 0))
    else:
        decoder = params["mlm.decoder"]
    return linear(h, decoder, params["mlm.bias"])


def cls_logits(u: Tensor, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Class logits from the position-0 (classification token) vector."""
    if u.shape[1] == 0:
        raise ValueError("empty sequence: no classification token at position 0")
    pooled = tanh(linear(reshape(index_select(u, 1, np.array([0])), (u.shape[0], u.shape[2])),
                         params["cls.pool.w"], params["cls.pool.b"]))
    return linear(pooled, params["cls.out.w"], params["cls.out.b"])


# ---- checkpoints -----------------------------------------------------

CKPT_MAGIC = b"FOLNET-CKPT-V1\n"


def save_checkpoint(
    path: str,
    config: ModelConfig,
    params: dict[str, Tensor],
    extra: Optional[dict[str, np.ndarray]] = None,
    meta: Optional[dict] = None,
) -> None:
    """Binary container: magic line, JSON text header, then raw float64 data.

    Round-trips bitwise: arrays are written in C order in the header's
    declared order.
    """
    arrays = {name: t.data for name, t in params.items()}
    if extra:
        for name, arr in extra.items():
            arrays[f"extra.{name}"] = np.asarray(arr, dtype=np.float64)
    cfg = asdict(config)
    cfg.pop("spec", None)
    header = {
        "config": cfg,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
        "meta": meta or {},
    }
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[ModelConfig, dict[str, Tensor], dict[str, np.ndarray], dict]:
    """Inverse of save_checkpoint: (config, params, extra arrays, meta)."""
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic): {path}")
        header = json.loads(f.readline().decode("utf-8"))
        config = ModelConfig(**header["config"])
        params: dict[str, Tensor] = {}
        extra: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(n * 8)
            arr = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
            if entry["name"].startswith("extra."):
                extra[entry["name"][len("extra."):]] = arr
            else:
                params[entry["name"]] = parameter(arr, name=entry["name"])
    return config, params, extra, header["meta"]
