"""Desk-scale experiment protocols: attribute accuracy, content preservation,
classifier augmentation and sample grids."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .autodiff import Adam
from .model import CtrlGenModel, Discriminator, ModelConfig
from .text import (
    UNDECIDABLE,
    Batch,
    GrammarSpec,
    Vocabulary,
    content_tokens,
    decode,
    encode_labeled,
    generate_synthetic_corpus,
    oracle_classify,
)

VARIANTS = ("std", "h-reg", "ours")


@dataclass
class EvalReport:
    title: str
    values: Dict[str, object] = field(default_factory=dict)
    text: List[str] = field(default_factory=list)
    ok: bool = True

    def render(self) -> str:
        lines = [f"== {self.title} =="]
        lines.extend(self.text)
        lines.append("-- key=value --")
        lines.extend(f"{k}={v}" for k, v in self.values.items())
        return "\n".join(lines)


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def _tokens(ids: Sequence[int], vocab: Vocabulary) -> List[str]:
    return decode(ids, vocab).split()


@dataclass
class AccuracyResult:
    accuracy: float
    undecidable_rate: float
    n: int
    per_category: List[int]
    samples: List[str]

    @property
    def stderr(self) -> float:
        p = self.accuracy
        return math.sqrt(max(p * (1 - p), 1e-12) / self.n)


def eval_attribute_accuracy(
    model: CtrlGenModel,
    vocab: Vocabulary,
    grammar: GrammarSpec,
    attribute: str,
    n: int,
    seed: int,
    max_len: int = 15,
    tau: float = 1.0,
    batch_size: int = 250,
) -> AccuracyResult:
    """Sample n sentences with the attribute code cycling over categories and
    z from the prior; score them with the rule oracle (undecidable = wrong)."""
    if n <= 0:
        raise ValueError("eval_attribute_accuracy: n must be positive")
    K = model.n_categories(attribute)
    rng = np.random.default_rng([seed, 101])
    hits = undecidable = 0
    counts = [0] * K
    texts: List[str] = []
    for start in range(0, n, batch_size):
        m = min(batch_size, n - start)
        z, c = model.sample_prior(m, rng)
        c[attribute] = (np.arange(start, start + m) % K).astype(np.int64)
        seqs = model.generator.sample(z, model.code(c), tau, max_len, rng)
        for seq, k in zip(seqs, c[attribute]):
            toks = _tokens(seq, vocab)
            verdict = oracle_classify(toks, attribute, grammar)
            counts[int(k)] += 1
            if verdict == UNDECIDABLE:
                undecidable += 1
            elif verdict == k:
                hits += 1
            if len(texts) < 20:
                texts.append(f"[{grammar.categories(attribute)[int(k)]}] {' '.join(toks)}")
    return AccuracyResult(hits / n, undecidable / n, n, counts, texts)


def preservation(a: Sequence[str], b: Sequence[str], grammar: GrammarSpec) -> float:
    """Fraction of content-role token positions that agree between two sentences."""
    ca, cb = content_tokens(a, grammar), content_tokens(b, grammar)
    width = max(len(ca), len(cb))
    if width == 0:
        return 1.0
    return sum(x == y for x, y in zip(ca, cb)) / width


@dataclass
class DisentangleResult:
    rate: float
    n_pairs: int
    pairs: List[Tuple[str, str]]


def eval_disentanglement(
    model: CtrlGenModel,
    vocab: Vocabulary,
    grammar: GrammarSpec,
    attribute: str,
    n_pairs: int,
    seed: int,
    max_len: int = 15,
    flip: bool = True,
) -> DisentangleResult:
    """Greedy-decode (z, c) and (z, c') with only ``attribute`` changed; average
    content preservation over pairs. ``flip=False`` decodes c' = c."""
    if n_pairs <= 0:
        raise ValueError("n_pairs must be positive")
    if not grammar.content_roles:
        raise ValueError("grammar has no content roles to compare")
    K = model.n_categories(attribute)
    rng = np.random.default_rng([seed, 202])
    z, c = model.sample_prior(n_pairs, rng)
    c2 = dict(c)
    if flip:
        c2[attribute] = (c[attribute] + 1 + rng.integers(K - 1, size=n_pairs)) % K
    a = model.generator.greedy(z, model.code(c), max_len)
    b = model.generator.greedy(z, model.code(c2), max_len)
    scores, pairs = [], []
    for sa, sb in zip(a, b):
        ta, tb = _tokens(sa, vocab), _tokens(sb, vocab)
        scores.append(preservation(ta, tb, grammar))
        if len(pairs) < 10:
            pairs.append((" ".join(ta), " ".join(tb)))
    return DisentangleResult(float(np.mean(scores)), n_pairs, pairs)


# -- augmentation classifiers ---------------------------------------------------


def _classifier(model_cfg: ModelConfig, attribute: str, K: int, seed: int) -> Tuple[CtrlGenModel, Discriminator]:
    holder = CtrlGenModel.__new__(CtrlGenModel)
    holder.cfg = model_cfg
    rng = np.random.default_rng([seed, 303])
    disc = Discriminator(model_cfg, attribute, K, rng)
    holder.discriminators = {attribute: disc}
    return holder, disc


def classifier_accuracy(disc: Discriminator, data: Sequence[Tuple[Sequence[int], int]]) -> float:
    hits = 0
    with ad.no_grad():
        for start in range(0, len(data), 500):
            chunk = data[start : start + 500]
            b = Batch.from_sequences([t for t, _ in chunk], [k for _, k in chunk])
            pred = np.argmax(disc.log_probs_batch(b).data, axis=1)
            hits += int(np.sum(pred == b.labels))
    return hits / len(data)


def augment_and_train_classifier(
    model: CtrlGenModel,
    attribute: str,
    labeled: Sequence[Tuple[Sequence[int], int]],
    test: Sequence[Tuple[Sequence[int], int]],
    variant: str,
    n_generated: int,
    seed: int,
    steps: int = 300,
    batch_size: int = 32,
    lr: float = 1e-3,
    weights: Optional[obj.LossWeights] = None,
    max_len: int = 15,
) -> float:
    """Train a fresh discriminator-shaped classifier and return its test accuracy.

    ``std`` uses the labeled set only; ``h-reg`` adds the entropy penalty on
    generated sentences; ``ours`` adds generated (sentence, code) pairs with
    the entropy penalty. Every variant starts from the same initial weights.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if not labeled or not test:
        raise ValueError("labeled and test sets must be nonempty")
    weights = weights or obj.LossWeights()
    K = model.n_categories(attribute)
    holder, disc = _classifier(model.cfg, attribute, K, seed)
    opt = Adam(disc.params, lr=lr)

    gen_pool: Optional[obj.DiscriminatorNoise] = None
    if variant != "std":
        if n_generated <= 0:
            raise ValueError("augmentation variants need n_generated > 0")
        grng = np.random.default_rng([seed, 404])
        z, c = model.sample_prior(n_generated, grng)
        c[attribute] = (np.arange(n_generated) % K).astype(np.int64)
        seqs = model.generator.sample(z, model.code(c), 1.0, max_len, grng)
        gen_pool = obj.DiscriminatorNoise(z, c, Batch.from_sequences(seqs))
        gen_seqs = seqs

    rng = np.random.default_rng([seed, 505])
    for _ in range(steps):
        idx = rng.integers(len(labeled), size=min(batch_size, len(labeled)))
        batch = Batch.from_sequences([labeled[i][0] for i in idx], [labeled[i][1] for i in idx])
        opt.zero_grad()
        loss = obj.loss_disc_supervised(holder, attribute, batch)
        if gen_pool is not None:
            gidx = rng.integers(n_generated, size=batch_size)
            noise = obj.DiscriminatorNoise(
                gen_pool.z[gidx],
                {k: v[gidx] for k, v in gen_pool.c.items()},
                Batch.from_sequences([gen_seqs[i] for i in gidx]),
            )
            unsup, _ = obj.loss_disc_unsupervised(holder, attribute, noise, weights, use_codes=variant == "ours")
            loss = loss + unsup * weights.lambda_u
        ad.backward(loss)
        opt.step()
    return classifier_accuracy(disc, test)


def synthetic_test_set(
    grammar: GrammarSpec, attribute: str, vocab: Vocabulary, n: int, seed: int, max_len: int = 15
) -> List[Tuple[List[int], int]]:
    corp = generate_synthetic_corpus(grammar, 0, n, seed)
    return encode_labeled(corp.labeled[attribute], grammar.categories(attribute), vocab, max_len)


# -- sample grids ---------------------------------------------------------------


def sample_grid(
    model: CtrlGenModel,
    vocab: Vocabulary,
    vary: Optional[str],
    fixed: Mapping[str, int],
    n_z: int,
    seed: int,
    max_len: int = 15,
) -> List[List[str]]:
    """Greedy decodes: one block per z, one row per value of ``vary``.

    ``vary`` names an attribute, ``"z"`` for fresh z per row with the code
    fixed, or ``None`` for a single repeated row.
    """
    rng = np.random.default_rng([seed, 606])
    blocks: List[List[str]] = []
    for _ in range(n_z):
        z, c = model.sample_prior(1, rng)
        for name, k in fixed.items():
            c[name] = np.array([k])
        if vary is None:
            rows = [dict(c)] * 3
            zs = [z] * 3
        elif vary == "z":
            rows = [dict(c) for _ in range(3)]
            zs = [z] + [rng.standard_normal(z.shape) for _ in range(2)]
        else:
            K = model.n_categories(vary)
            rows = []
            for k in range(K):
                ck = dict(c)
                ck[vary] = np.array([k])
                rows.append(ck)
            zs = [z] * K
        block = []
        for zz, cc in zip(zs, rows):
            seq = model.generator.greedy(zz, model.code(cc), max_len)[0]
            block.append(decode(seq, vocab))
        blocks.append(block)
    return blocks
