"""Synthetic toy tasks: sequence copying/reversal, grammar-based masked-token
prediction, two-hop kinship reasoning, and sequence-pair classification.

Every generator is a pure function of the supplied numpy Generator, so a
training step that reseeds per step gets bit-identical batches on replay.

Special token ids are fixed: PAD=0, CLS=1, SEP=2, MASK=3, BOS=4.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from folnet.atoms import InputBatch

PAD, CLS, SEP, MASK, BOS = 0, 1, 2, 3, 4
N_SPECIAL = 5


@dataclass
class TaskExample:
    tokens: np.ndarray                       # [t] token ids
    seq_ids: np.ndarray                      # [t] segment ids in {0, 1}
    targets: Optional[np.ndarray] = None     # [t] next/original ids, token tasks
    loss_mask: Optional[np.ndarray] = None   # [t] 0/1, token tasks
    label: Optional[int] = None              # class tasks

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.intp)
        self.seq_ids = np.asarray(self.seq_ids, dtype=np.intp)
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.intp)
            self.loss_mask = np.asarray(self.loss_mask, dtype=np.float64)
            if not (self.tokens.shape == self.targets.shape == self.loss_mask.shape
                    == self.seq_ids.shape):
                raise ValueError("example field lengths differ")


# ---- copy / reverse --------------------------------------------------


def _payload_task(rng, vocab, T, n, transform):
    if vocab <= N_SPECIAL:
        raise ValueError(f"vocab must exceed the {N_SPECIAL} reserved specials")
    L = (T - 2) // 2
    if L < 1:
        raise ValueError(f"sequence length {T} too small for a payload")
    out = []
    for _ in range(n):
        payload = rng.integers(N_SPECIAL, vocab, L)
        tokens = np.concatenate(([BOS], payload, [SEP], transform(payload)))
        targets = np.roll(tokens, -1)        # next-token prediction
        targets[-1] = PAD
        loss_mask = np.zeros(tokens.size)
        loss_mask[L + 1:-1] = 1.0            # predict the echoed payload
        out.append(TaskExample(tokens, np.zeros(tokens.size), targets, loss_mask))
    return out


def gen_copy_task(rng, vocab: int, T: int, n: int):
    """BOS payload SEP payload; loss on predicting the second payload."""
    return _payload_task(rng, vocab, T, n, lambda p: p)


def gen_reverse_task(rng, vocab: int, T: int, n: int):
    """Like the copy task but the echo comes back reversed."""
    return _payload_task(rng, vocab, T, n, lambda p: p[::-1])


# ---- masked-token prediction over a toy grammar ----------------------


@dataclass
class MarkovGrammar:
    """Peaked first-order Markov chain: enough structure to be learnable."""

    vocab: int
    transition: np.ndarray = field(init=False)
    initial: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.vocab <= N_SPECIAL + 1:
            raise ValueError("grammar needs at least two non-special tokens")
        k = self.vocab - N_SPECIAL
        g = np.random.default_rng(self.vocab)  # grammar fixed by vocab size
        trans = g.dirichlet(np.full(k, 0.1), size=k)
        self.transition = trans
        self.initial = g.dirichlet(np.full(k, 0.5))

    def sample(self, rng, length: int) -> np.ndarray:
        k = self.vocab - N_SPECIAL
        seq = np.empty(length, dtype=np.intp)
        state = rng.choice(k, p=self.initial)
        for i in range(length):
            seq[i] = N_SPECIAL + state
            state = rng.choice(k, p=self.transition[state])
        return seq


def gen_mlm_task(rng, grammar: MarkovGrammar, T: int, n: int, mask_rate: float = 0.15):
    """BERT-style corruption: of the selected positions, 80% become MASK,
    10% a random token, 10% stay; loss only on selected positions."""
    if not 0.0 <= mask_rate < 1.0:
        raise ValueError(f"mask_rate must lie in [0, 1), got {mask_rate}")
    out = []
    body = T - 2
    for _ in range(n):
        sent = grammar.sample(rng, body)
        tokens = np.concatenate(([CLS], sent, [SEP]))
        targets = tokens.copy()
        loss_mask = np.zeros(tokens.size)
        corrupted = tokens.copy()
        for i in range(1, 1 + body):
            if rng.random() >= mask_rate:
                continue
            loss_mask[i] = 1.0
            roll = rng.random()
            if roll < 0.8:
                corrupted[i] = MASK
            elif roll < 0.9:
                corrupted[i] = rng.integers(N_SPECIAL, grammar.vocab)
            # else: keep the original token
        out.append(TaskExample(corrupted, np.zeros(tokens.size), targets, loss_mask))
    return out


# ---- two-hop kinship -------------------------------------------------

RELATIONS = ("parent", "child", "sibling", "spouse")

# label(A, C) implied by r1(A, B) and r2(B, C); (spouse, spouse) is omitted
# because it collapses A and C
COMPOSITION = {
    ("parent", "parent"): "grandparent",
    ("parent", "child"): "spouse",
    ("parent", "sibling"): "parent",
    ("parent", "spouse"): "inlaw",
    ("child", "parent"): "sibling",
    ("child", "child"): "grandchild",
    ("child", "sibling"): "nibling",
    ("child", "spouse"): "child",
    ("sibling", "parent"): "auntuncle",
    ("sibling", "child"): "child",
    ("sibling", "sibling"): "sibling",
    ("sibling", "spouse"): "inlaw",
    ("spouse", "parent"): "parent",
    ("spouse", "child"): "inlaw",
    ("spouse", "sibling"): "inlaw",
}

KINSHIP_LABELS = tuple(sorted(set(COMPOSITION.values())))
_PAIRS_BY_LABEL = {
    lab: [pair for pair, l in COMPOSITION.items() if l == lab]
    for lab in KINSHIP_LABELS
}


@dataclass(frozen=True)
class KinshipVocab:
    n_entities: int

    @property
    def entity_base(self):
        return N_SPECIAL

    @property
    def relation_base(self):
        return N_SPECIAL + self.n_entities

    @property
    def period(self):
        return self.relation_base + len(RELATIONS)

    @property
    def query(self):
        return self.period + 1

    @property
    def size(self):
        return self.query + 1

    def entity(self, i):
        return self.entity_base + i

    def relation(self, name):
        return self.relation_base + RELATIONS.index(name)


def gen_kinship2hop(rng, n_entities: int, n: int, n_distractors: int = 1):
    """Facts "A r1 B . B r2 C ." (plus unrelated distractors, shuffled),
    query segment "A ? C"; label is the fixed two-hop composition.

    Labels are sampled uniformly, then a relation pair within the label, so
    the class distribution is balanced by construction.
    """
    if n_entities < 3 + 2 * n_distractors:
        raise ValueError(
            f"need at least {3 + 2 * n_distractors} entities, got {n_entities}"
        )
    voc = KinshipVocab(n_entities)
    out = []
    for _ in range(n):
        label_idx = int(rng.integers(len(KINSHIP_LABELS)))
        label = KINSHIP_LABELS[label_idx]
        pairs = _PAIRS_BY_LABEL[label]
        r1, r2 = pairs[int(rng.integers(len(pairs)))]
        people = rng.choice(n_entities, size=3 + 2 * n_distractors, replace=False)
        a, b, c = (voc.entity(i) for i in people[:3])
        facts = [
            [a, voc.relation(r1), b, voc.period],
            [b, voc.relation(r2), c, voc.period],
        ]
        for d in range(n_distractors):
            d1, d2 = (voc.entity(i) for i in people[3 + 2 * d: 5 + 2 * d])
            rel = RELATIONS[int(rng.integers(len(RELATIONS)))]
            facts.append([d1, voc.relation(rel), d2, voc.period])
        order = rng.permutation(len(facts))
        body = [tok for i in order for tok in facts[i]]
        tokens = np.array([CLS] + body + [SEP] + [a, voc.query, c] + [SEP])
        seq_ids = np.zeros(tokens.size, dtype=np.intp)
        seq_ids[-4:] = 1
        out.append(TaskExample(tokens, seq_ids, label=label_idx))
    return out


# ---- sequence-pair classification -----------------------------------


def gen_pairclass(rng, vocab: int, T: int, n: int):
    """Binary task: does segment B echo segment A exactly?"""
    if vocab <= N_SPECIAL:
        raise ValueError(f"vocab must exceed the {N_SPECIAL} reserved specials")
    L = (T - 3) // 2
    if L < 1:
        raise ValueError(f"sequence length {T} too small")
    out = []
    for _ in range(n):
        a = rng.integers(N_SPECIAL, vocab, L)
        label = int(rng.random() < 0.5)
        if label:
            b = a.copy()
        else:
            b = a.copy()
            pos = int(rng.integers(L))
            b[pos] = N_SPECIAL + (b[pos] - N_SPECIAL + 1 + rng.integers(vocab - N_SPECIAL - 1)) % (vocab - N_SPECIAL)
        tokens = np.concatenate(([CLS], a, [SEP], b, [SEP]))
        seq_ids = np.zeros(tokens.size, dtype=np.intp)
        seq_ids[L + 2:] = 1
        out.append(TaskExample(tokens, seq_ids, label=label))
    return out


# ---- task registry and batching -------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str                  # "token" or "class"
    mask_mode: str             # visibility mode used during training
    sample: Callable           # (rng, T, batch) -> TaskExample list
    vocab_size: int
    n_classes: int = 2


def make_task(name: str, vocab: int = 16, n_entities: int = 12) -> TaskSpec:
    if name == "copy":
        return TaskSpec(name, "token", "causal",
                        lambda rng, T, n: gen_copy_task(rng, vocab, T, n), vocab)
    if name == "reverse":
        return TaskSpec(name, "token", "causal",
                        lambda rng, T, n: gen_reverse_task(rng, vocab, T, n), vocab)
    if name == "mlm_synthetic":
        grammar = MarkovGrammar(vocab)
        return TaskSpec(name, "token", "none",
                        lambda rng, T, n: gen_mlm_task(rng, grammar, T, n), vocab)
    if name == "kinship2hop":
        voc = KinshipVocab(n_entities)
        return TaskSpec(name, "class", "none",
                        lambda rng, T, n: gen_kinship2hop(rng, n_entities, n),
                        voc.size, n_classes=len(KINSHIP_LABELS))
    if name == "pairclass":
        return TaskSpec(name, "class", "none",
                        lambda rng, T, n: gen_pairclass(rng, vocab, T, n), vocab)
    raise ValueError(f"unknown task {name!r}")


def batch_examples(examples, T: int):
    """Pad a list of examples to [B, T] arrays; returns the batch plus the
    stacked targets/loss masks (token tasks) or labels (class tasks)."""
    B = len(examples)
    if B == 0:
        raise ValueError("empty example list")
    tokens = np.full((B, T), PAD, dtype=np.intp)
    seq_ids = np.zeros((B, T), dtype=np.intp)
    pad_mask = np.zeros((B, T))
    token_task = examples[0].targets is not None
    targets = np.full((B, T), PAD, dtype=np.intp) if token_task else None
    loss_mask = np.zeros((B, T)) if token_task else None
    labels = None if token_task else np.zeros(B, dtype=np.intp)
    for i, ex in enumerate(examples):
        t = ex.tokens.size
        if t > T:
            raise ValueError(f"example length {t} exceeds budget {T}")
        tokens[i, :t] = ex.tokens
        seq_ids[i, :t] = ex.seq_ids
        pad_mask[i, :t] = 1.0
        if token_task:
            targets[i, :t] = ex.targets
            loss_mask[i, :t] = ex.loss_mask
        else:
            labels[i] = ex.label
    batch = InputBatch(tokens, seq_ids, pad_mask)
    return batch, targets, loss_mask, labels
