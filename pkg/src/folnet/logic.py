"""Exact probabilistic semantics behind the matmul-plus-activation encoding
of Modus Ponens, plus structural checks tying each restricted operator back
to an unrestricted clause kernel.

Everything in here is an oracle: small, slow, and written for correctness,
so the network-side shortcuts can be validated against it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from folnet.operators import (
    op_assoc,
    op_cjoin,
    op_join,
    op_mu,
    op_prod,
    op_trans,
)
from folnet.tensor import Tensor, _log1p2exp, _sigmoid

ENUM_CAP = 12  # 2^12 assignments; beyond this enumeration stops being an oracle


@dataclass(frozen=True)
class ClausePartition:
    """Which of the M premises appear positively / negated in a clause body.

    Premise indices are 0-based.  Indices in neither set are unused (their
    truth value does not matter).
    """

    m: int
    pos: frozenset
    neg: frozenset

    def __post_init__(self):
        object.__setattr__(self, "pos", frozenset(self.pos))
        object.__setattr__(self, "neg", frozenset(self.neg))
        if self.pos & self.neg:
            raise ValueError(f"pos and neg overlap: {sorted(self.pos & self.neg)}")
        used = self.pos | self.neg
        if used and (min(used) < 0 or max(used) >= self.m):
            raise ValueError(f"premise index out of range [0, {self.m})")


@dataclass
class SoftClause:
    """Relaxed clause signature: kappa[m] = Pr{W_m=+1} - Pr{W_m=-1}."""

    kappa: np.ndarray

    def __post_init__(self):
        self.kappa = np.asarray(self.kappa, dtype=np.float64)
        if np.abs(self.kappa).max(initial=0.0) > 1.0:
            raise ValueError("soft clause entries must lie in [-1, 1]")


def body_prob_exact(probs, part: ClausePartition) -> float:
    """Probability the clause body holds: product over the used literals."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (part.m,):
        raise ValueError(f"expected {part.m} probabilities, got shape {probs.shape}")
    if np.any(probs <= 0.0) or np.any(probs >= 1.0):
        raise ValueError("premise probabilities must lie strictly inside (0, 1)")
    out = 1.0
    for m in part.pos:
        out *= probs[m]
    for m in part.neg:
        out *= 1.0 - probs[m]
    return out


def body_prob_enumerate(probs, part: ClausePartition) -> float:
    """Same quantity by brute force over all 2^M truth assignments."""
    probs = np.asarray(probs, dtype=np.float64)
    if part.m > ENUM_CAP:
        raise ValueError(f"enumeration capped at M={ENUM_CAP}, got {part.m}")
    total = 0.0
    for assignment in itertools.product([True, False], repeat=part.m):
        if any(not assignment[m] for m in part.pos):
            continue
        if any(assignment[m] for m in part.neg):
            continue
        weight = 1.0
        for m, truth in enumerate(assignment):
            weight *= probs[m] if truth else 1.0 - probs[m]
        total += weight
    return total


def body_logit_bound(logits, part: ClausePartition) -> float:
    """Upper bound on the body probability from summed literal logits.

    Tight exactly when the clause uses a single literal.  Requires at least
    one used literal: the empty body is vacuously true, while the summed
    logit degenerates to 0 and would report 0.5.
    """
    if not part.pos and not part.neg:
        raise ValueError("logit-sum bound needs at least one used literal")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (part.m,):
        raise ValueError(f"expected {part.m} logits, got shape {logits.shape}")
    z = sum(logits[m] for m in part.pos) - sum(logits[m] for m in part.neg)
    return float(_sigmoid(np.atleast_1d(np.float64(z)))[0])


def soft_body_logit(soft: SoftClause, logits) -> float:
    """Expected body logit under the relaxed signature: <kappa, v>."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != soft.kappa.shape:
        raise ValueError(
            f"length mismatch: kappa {soft.kappa.shape} vs logits {logits.shape}"
        )
    return float(soft.kappa @ logits)


def implication_exact(p_body: float) -> float:
    """Pr{head} once the clause is known to hold, uniform prior on the head."""
    if not 0.0 <= p_body <= 1.0:
        raise ValueError(f"probability out of range: {p_body}")
    return 0.5 + 0.5 * p_body


def implication_enumerate(p_body: float) -> float:
    """Bayes enumeration over (body, head, clause-holds) triples.

    The clause rules out exactly the body-true/head-false world; given the
    body's truth value, condition the uniform head prior on the clause and
    average over the body.
    """
    if not 0.0 <= p_body <= 1.0:
        raise ValueError(f"probability out of range: {p_body}")
    total = 0.0
    for body, p_b in ((True, p_body), (False, 1.0 - p_body)):
        joint = {head: 0.5 * (0.0 if body and not head else 1.0)
                 for head in (True, False)}
        norm = joint[True] + joint[False]
        total += p_b * joint[True] / norm
    return total


def implication_logit(z: float) -> float:
    """Head logit from body logit: ln(1 + 2 e^z), overflow-safe."""
    return float(_log1p2exp(np.asarray(z, dtype=np.float64)))


def relu_shift(z: float) -> float:
    """The network-friendly lower bound max(0, z + ln 2)."""
    return max(0.0, float(z) + math.log(2.0))


def verify_relu_bound(z_grid) -> dict:
    """Check ln(1+2e^z) >= max(0, z + ln 2) pointwise; report the gap range."""
    z_grid = np.asarray(z_grid, dtype=np.float64)
    exact = _log1p2exp(z_grid)
    bound = np.maximum(0.0, z_grid + math.log(2.0))
    gap = exact - bound
    return {
        "ok": bool(np.all(gap >= 0.0)),
        "min_gap": float(gap.min()),
        "max_gap": float(gap.max()),
        "points": int(z_grid.size),
    }


# ---- restricted operators as sliced unrestricted kernels -------------
#
# The four unrestricted inference forms contract a full clause kernel
# against the premises:
#   unary  <- unary :  u_d(x)   = sum_{a,e}   K[x,a][d,e]     v_e(a)
#   unary  <- binary:  u_d(x)   = sum_{a,b,w} K[x,a,b][d,w]   v_w(a,b)
#   binary <- unary :  u_h(x,y) = sum_{a,e}   K[x,y,a][h,e]   v_e(a)
#   binary <- binary:  u_h(x,y) = sum_{a,b,w} K[x,y,a,b][h,w] v_w(a,b)
# Each table operator is one of these with most kernel entries tied or
# zeroed.  The checks below build the full kernel from the shared one,
# evaluate the unrestricted form by naive loops, and compare.


def _uu_form(K4, v):  # K4[x,a,d,e], v[a,e]
    T, _, D, _ = K4.shape
    out = np.zeros((T, D))
    for x in range(T):
        for d in range(D):
            for a in range(T):
                for e in range(K4.shape[3]):
                    out[x, d] += K4[x, a, d, e] * v[a, e]
    return out


def _ub_form(K5, v):  # K5[x,a,b,d,w], v[a,b,w]
    T = K5.shape[0]
    D = K5.shape[3]
    out = np.zeros((T, D))
    for x in range(T):
        for d in range(D):
            for a in range(T):
                for b in range(T):
                    for w in range(K5.shape[4]):
                        out[x, d] += K5[x, a, b, d, w] * v[a, b, w]
    return out


def _bu_form(K5, v):  # K5[x,y,a,h,e], v[a,e]
    T = K5.shape[0]
    H = K5.shape[3]
    out = np.zeros((T, T, H))
    for x in range(T):
        for y in range(T):
            for h in range(H):
                for a in range(T):
                    for e in range(K5.shape[4]):
                        out[x, y, h] += K5[x, y, a, h, e] * v[a, e]
    return out


def _bb_form(K6, v):  # K6[x,y,a,b,h,w], v[a,b,w]
    T = K6.shape[0]
    H = K6.shape[4]
    out = np.zeros((T, T, H))
    for x in range(T):
        for y in range(T):
            for h in range(H):
                for a in range(T):
                    for b in range(T):
                        for w in range(K6.shape[5]):
                            out[x, y, h] += K6[x, y, a, b, h, w] * v[a, b, w]
    return out


def arity_form_check(T: int = 3, H: int = 2, S: int = 2, D2: int = 2,
                     seed: int = 0) -> dict:
    """Per-operator max deviation from its unrestricted-kernel equivalent."""
    rng = np.random.default_rng(seed)
    errs: dict[str, float] = {}
    eye_t = np.eye(T)

    # join: kernel K_h(x,a) shared across s; unary-from-unary form with a
    # block-diagonal clause kernel over (h, s)
    Kh = rng.standard_normal((H, T, T))
    v_u = rng.standard_normal((T, H, S))
    got = op_join(Tensor(Kh[None]), Tensor(v_u[None])).data[0]
    K4 = np.zeros((T, T, H * S, H * S))
    for h in range(H):
        for s in range(S):
            d = h * S + s
            K4[:, :, d, d] = Kh[h]
    ref = _uu_form(K4, v_u.reshape(T, H * S))
    errs["join"] = float(np.abs(got.reshape(T, H * S) - ref).max())

    # bool: pointwise clause kernel K_hw(x); unary-from-unary with the token
    # part pinned to the diagonal (a = x) and sharing across s
    Khw = rng.standard_normal((T, H, S))  # here w ranges over S for squareness
    v_b = rng.standard_normal((T, S, S))
    got = np.einsum("xhw,xws->xhs", Khw, v_b)
    K4 = np.zeros((T, T, H * S, S * S))
    for x in range(T):
        for h in range(H):
            for s in range(S):
                for w in range(S):
                    K4[x, x, h * S + s, w * S + s] = Khw[x, h, w]
    ref = _uu_form(K4, v_b.reshape(T, S * S))
    errs["bool"] = float(np.abs(got.reshape(T, H * S) - ref).max())

    # cjoin: per-token kernel K_hs(a); unary-from-binary with first premise
    # argument pinned to x
    Khs = rng.standard_normal((T, H, S))
    v_bin = rng.standard_normal((H, T, T))
    got = op_cjoin(Tensor(Khs[None]), Tensor(v_bin[None])).data[0]
    K5 = np.zeros((T, T, T, H * S, H))
    for x in range(T):
        for b in range(T):
            for h in range(H):
                for s in range(S):
                    K5[x, x, b, h * S + s, h] = Khs[b, h, s]
    ref = _ub_form(K5, v_bin.transpose(1, 2, 0))
    errs["cjoin"] = float(np.abs(got.reshape(T, H * S) - ref).max())

    # mu: kernel K_h(x,a) shared across s, premise second argument is the
    # reduction index, first argument pinned to x
    Kh = rng.standard_normal((H, T, T))
    v_s = rng.standard_normal((S, T, T))
    got = op_mu(Tensor(Kh[None]), Tensor(v_s[None])).data[0]
    K5 = np.zeros((T, T, T, H * S, S))
    for x in range(T):
        for b in range(T):
            for h in range(H):
                for s in range(S):
                    K5[x, x, b, h * S + s, s] = Kh[h, x, b]
    ref = _ub_form(K5, v_s.transpose(1, 2, 0))
    errs["mu"] = float(np.abs(got.reshape(T, H * S) - ref).max())

    # assoc: K_hw(x) against v_hw(y); binary-from-unary with a = y pinned.
    # The operator folds in a 1/sqrt(W) score scaling, so the constructed
    # unrestricted kernel carries the same factor.
    W = S
    Khw = rng.standard_normal((T, H, W))
    v_hw = rng.standard_normal((T, H, W))
    got = op_assoc(Tensor(Khw[None]), Tensor(v_hw[None])).data[0]  # [H,T,T]
    K5 = np.zeros((T, T, T, H, H * W))
    for x in range(T):
        for y in range(T):
            for h in range(H):
                for w in range(W):
                    K5[x, y, y, h, h * W + w] = Khw[x, h, w] / math.sqrt(W)
    ref = _bu_form(K5, v_hw.reshape(T, H * W))
    errs["assoc"] = float(np.abs(got.transpose(1, 2, 0) - ref).max())

    # prod: K_hw(x) against v_w(x,y); binary-from-binary, both premise
    # arguments pinned to the output pair
    Khw = rng.standard_normal((T, H, D2))
    v_w = rng.standard_normal((D2, T, T))
    got = op_prod(Tensor(Khw[None]), Tensor(v_w[None])).data[0]
    K6 = np.zeros((T, T, T, T, H, D2))
    for x in range(T):
        for y in range(T):
            K6[x, y, x, y] = Khw[x]
    ref = _bb_form(K6, v_w.transpose(1, 2, 0))
    errs["prod"] = float(np.abs(got.transpose(1, 2, 0) - ref).max())

    # trans: K_h(x,a) against v_h(a,y); binary-from-binary with b = y pinned
    # and channel-diagonal sharing
    Kh = rng.standard_normal((H, T, T))
    v_h = rng.standard_normal((H, T, T))
    got = op_trans(Tensor(Kh[None]), Tensor(v_h[None])).data[0]
    K6 = np.zeros((T, T, T, T, H, H))
    for x in range(T):
        for y in range(T):
            for a in range(T):
                for h in range(H):
                    K6[x, y, a, y, h, h] = Kh[h, x, a]
    ref = _bb_form(K6, v_h.transpose(1, 2, 0))
    errs["trans"] = float(np.abs(got.transpose(1, 2, 0) - ref).max())

    errs["ok"] = bool(max(v for k, v in errs.items() if k != "ok") < 1e-12)
    return errs


# ---- plain-text verification report ----------------------------------


def verification_report(seed: int = 0, trials: int = 10_000) -> str:
    """Run every oracle property and format one pass/fail line each."""
    rng = np.random.default_rng(seed)
    lines = []

    def emit(name, ok, detail):
        lines.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")

    # product formula vs exhaustive enumeration, all partitions up to M=4
    worst = 0.0
    for m in range(1, 5):
        for labels in itertools.product((0, 1, 2), repeat=m):
            part = ClausePartition(
                m,
                frozenset(i for i, l in enumerate(labels) if l == 1),
                frozenset(i for i, l in enumerate(labels) if l == 2),
            )
            probs = rng.uniform(0.05, 0.95, m)
            worst = max(worst, abs(body_prob_exact(probs, part)
                                   - body_prob_enumerate(probs, part)))
    emit("body product vs enumeration (M<=4)", worst < 1e-12, f"max gap {worst:.2e}")

    # bound dominance with tightness exactly on single-literal clauses
    dominated, tight_ok = True, True
    for _ in range(trials):
        m = int(rng.integers(1, 7))
        labels = rng.integers(0, 3, m)
        part = ClausePartition(
            m,
            frozenset(np.flatnonzero(labels == 1).tolist()),
            frozenset(np.flatnonzero(labels == 2).tolist()),
        )
        if not part.pos and not part.neg:
            continue
        logits = rng.normal(0, 2, m)
        probs = _sigmoid(logits)
        exact = body_prob_exact(probs, part)
        bound = body_logit_bound(logits, part)
        if bound < exact - 1e-12:
            dominated = False
        single = len(part.pos) + len(part.neg) == 1
        if single != (abs(bound - exact) <= 1e-12):
            tight_ok = False
    emit("bound dominance", dominated, f"{trials} random draws")
    emit("tight iff single literal", tight_ok, f"{trials} random draws")

    # activation identity and ReLU bound
    z = np.linspace(-30, 30, 6001)
    ident = np.abs(_sigmoid(_log1p2exp(z)) - (0.5 + 0.5 * _sigmoid(z))).max()
    emit("sigmoid(ln(1+2e^z)) identity", ident < 1e-12, f"max gap {ident:.2e}")
    relu = verify_relu_bound(np.linspace(-20, 20, 4001))
    emit("ReLU lower bound", relu["ok"],
         f"min gap {relu['min_gap']:.2e} over {relu['points']} points")

    # negation by logit sign flip
    probs = rng.uniform(0.05, 0.95, 4)
    a = body_prob_exact(probs, ClausePartition(4, frozenset({0, 1}), frozenset({2})))
    flipped = probs.copy()
    flipped[1] = 1.0 - flipped[1]
    b = body_prob_exact(flipped, ClausePartition(4, frozenset({0}), frozenset({1, 2})))
    emit("negation logit rule", abs(a - b) < 1e-15, f"gap {abs(a - b):.2e}")

    # restricted operators match unrestricted clause kernels
    forms = arity_form_check(seed=seed)
    worst = max(v for k, v in forms.items() if k != "ok")
    emit("restricted vs unrestricted kernels", forms["ok"], f"max err {worst:.2e}")

    # approximation-quality measurement (no tolerance asserted: the claim
    # is qualitative -- tighter concentration, better approximation)
    gaps = []
    for scale in (2.0, 0.5, 0.1):
        g = 0.0
        for _ in range(200):
            x = rng.normal(0.0, scale, 64)
            g = max(g, abs(_sigmoid(x).mean() - _sigmoid(np.atleast_1d(x.mean()))[0]))
        gaps.append(g)
    monotone = gaps[0] >= gaps[1] >= gaps[2]
    emit("mean-field gap shrinks with concentration", monotone,
         "gaps " + ", ".join(f"{g:.3f}" for g in gaps))

    ok_all = all(l.startswith("[PASS]") for l in lines)
    lines.append(f"overall: {'PASS' if ok_all else 'FAIL'}")
    return "\n".join(lines)
