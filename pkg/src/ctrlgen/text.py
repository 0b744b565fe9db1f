"""Vocabulary, batching, corpus files and the synthetic attribute grammar.

The grammar is a template language whose attribute slots are filled from
disjoint per-category word sets. Because only those words carry attribute
signal, :func:`oracle_classify` labels any sentence exactly by set lookup.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
UNDECIDABLE = -1


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: List[str] = list(RESERVED)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, i: int) -> str:
        return self.itos[i]

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.itos[len(RESERVED):])

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        return cls(line for line in text.split("\n") if line)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos


def build_vocabulary(corpus: Sequence[str], min_freq: int = 1) -> Vocabulary:
    """Keep tokens seen at least ``min_freq`` times, ordered by first appearance."""
    if not corpus:
        raise ValueError("build_vocabulary: empty corpus")
    counts: Dict[str, int] = collections.Counter()
    order: Dict[str, None] = {}
    for sent in corpus:
        for tok in sent.split():
            counts[tok] += 1
            order.setdefault(tok, None)
    return Vocabulary(t for t in order if counts[t] >= min_freq)


def encode(sentence: str, vocab: Vocabulary, max_len: int) -> List[int]:
    if max_len < 1:
        raise ValueError("encode: max_len must be >= 1")
    toks = sentence.split()
    if len(toks) > max_len:
        raise ValueError(f"encode: sentence has {len(toks)} tokens, max_len is {max_len}")
    return [vocab.lookup(t) for t in toks]


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        out.append(vocab.token(i))
    return " ".join(out)


@dataclass
class LabeledExample:
    tokens: List[int]
    labels: Dict[str, int]


@dataclass
class Batch:
    """Token ids ``B x (L+2)`` wrapped in BOS/EOS, PAD on the right.

    ``lengths`` counts BOS and EOS.
    """

    ids: np.ndarray
    lengths: np.ndarray
    labels: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def mask(self) -> np.ndarray:
        """1.0 on real positions (BOS..EOS), 0.0 on PAD."""
        return (np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]).astype(np.float64)

    @classmethod
    def from_sequences(cls, seqs: Sequence[Sequence[int]], labels=None) -> "Batch":
        lengths = np.array([len(s) + 2 for s in seqs], dtype=np.int64)
        width = int(lengths.max()) if len(seqs) else 2
        ids = np.full((len(seqs), width), PAD, dtype=np.int64)
        for r, s in enumerate(seqs):
            ids[r, 0] = BOS
            ids[r, 1 : 1 + len(s)] = s
            ids[r, 1 + len(s)] = EOS
        lab = None if labels is None else np.asarray(labels, dtype=np.int64)
        return cls(ids, lengths, lab)


def make_batches(
    examples: Sequence, batch_size: int, seed: int, shuffle: bool = True
) -> List[Batch]:
    """Shuffle deterministically and cut into batches; the last partial batch is kept.

    ``examples`` holds token lists or ``(tokens, label)`` pairs.
    """
    if batch_size < 1:
        raise ValueError("make_batches: batch_size must be >= 1")
    order = np.arange(len(examples))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(examples))
    out = []
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        if chunk and isinstance(chunk[0], tuple):
            out.append(Batch.from_sequences([c[0] for c in chunk], [c[1] for c in chunk]))
        else:
            out.append(Batch.from_sequences(chunk))
    return out


# -- synthetic grammar ------------------------------------------------------------


@dataclass
class GrammarSpec:
    """Role word sets, per-attribute category word sets and role templates."""

    roles: Dict[str, List[str]]
    attributes: Dict[str, Dict[str, List[str]]]
    templates: List[List[str]]
    content_roles: List[str] = field(default_factory=lambda: ["subject", "object"])
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for attr, cats in self.attributes.items():
            if len(cats) < 2:
                raise ValueError(f"attribute {attr!r} needs at least two categories")
            seen: Dict[str, str] = {}
            for cat, words in cats.items():
                if not words:
                    raise ValueError(f"attribute {attr!r} category {cat!r} has no words")
                for w in words:
                    if w in seen and seen[w] != cat:
                        raise ValueError(
                            f"attribute {attr!r}: word {w!r} in both {seen[w]!r} and {cat!r}"
                        )
                    seen[w] = cat
        for tpl in self.templates:
            for slot in tpl:
                if slot not in self.roles and slot not in self.attributes:
                    raise ValueError(f"template slot {slot!r} is neither a role nor an attribute")
            for attr in self.attributes:
                if tpl.count(attr) != 1:
                    raise ValueError(f"template {' '.join(tpl)!r} must hold {attr!r} exactly once")
        for r in self.content_roles:
            if r not in self.roles:
                raise ValueError(f"content role {r!r} is not a declared role")

    def categories(self, attribute: str) -> List[str]:
        return list(self.attributes[attribute])

    def n_categories(self, attribute: str) -> int:
        return len(self.attributes[attribute])

    def terminals(self) -> List[str]:
        out: Dict[str, None] = {}
        for words in self.roles.values():
            out.update(dict.fromkeys(words))
        for cats in self.attributes.values():
            for words in cats.values():
                out.update(dict.fromkeys(words))
        return list(out)

    def role_of(self) -> Dict[str, str]:
        table = {}
        for role, words in self.roles.items():
            for w in words:
                table[w] = role
        return table

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for role, words in self.roles.items():
            lines.append(f"role.{role} = {', '.join(words)}")
        for attr, cats in self.attributes.items():
            for cat, words in cats.items():
                lines.append(f"attribute.{attr}.{cat} = {', '.join(words)}")
        lines.append(f"content_roles = {', '.join(self.content_roles)}")
        lines.append(f"templates = {', '.join(' '.join(t) for t in self.templates)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GrammarSpec":
        roles: Dict[str, List[str]] = {}
        attrs: Dict[str, Dict[str, List[str]]] = {}
        templates: List[List[str]] = []
        content = ["subject", "object"]
        seed = 0
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"grammar line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            items = [v.strip() for v in value.split(",") if v.strip()]
            if key == "seed":
                seed = int(value)
            elif key == "templates":
                templates = [v.split() for v in items]
            elif key == "content_roles":
                content = items
            elif key.startswith("role."):
                roles[key[5:]] = items
            elif key.startswith("attribute."):
                parts = key.split(".")
                if len(parts) != 3:
                    raise ValueError(f"grammar line {lineno}: use attribute.<name>.<category>")
                attrs.setdefault(parts[1], {})[parts[2]] = items
            else:
                raise ValueError(f"grammar line {lineno}: unknown key {key!r}")
        return cls(roles, attrs, templates, content, seed)

    @classmethod
    def load(cls, path) -> "GrammarSpec":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def default_grammar() -> GrammarSpec:
    """60 terminals: a 2-way sentiment attribute and a 3-way tense attribute."""
    roles = {
        "det": ["the", "a", "this", "that"],
        "subject": ["film", "movie", "plot", "actor", "story", "script", "cast", "ending", "music", "director"],
        "object": ["friends", "kids", "family", "critics", "fans", "crowd", "class", "team", "parents", "audience"],
        "prep": ["for", "with", "to", "among"],
        "adv": ["very", "really", "quite", "so"],
    }
    attributes = {
        "sentiment": {
            "negative": ["bad", "awful", "boring", "dull", "terrible", "weak", "poor", "bland"],
            "positive": ["good", "great", "fun", "brilliant", "superb", "lovely", "fine", "moving"],
        },
        "tense": {
            "past": ["was", "seemed", "felt", "looked"],
            "present": ["is", "seems", "feels", "looks"],
            "future": ["will_be", "will_seem", "will_feel", "will_look"],
        },
    }
    templates = [
        "det subject tense sentiment".split(),
        "det subject tense adv sentiment".split(),
        "det subject tense sentiment prep object".split(),
        "det subject tense adv sentiment prep object".split(),
        "det subject tense sentiment prep det object".split(),
    ]
    return GrammarSpec(roles, attributes, templates)


def _realize(grammar: GrammarSpec, rng: np.random.Generator, fixed: Dict[str, int]) -> Tuple[List[str], Dict[str, int]]:
    tpl = grammar.templates[rng.integers(len(grammar.templates))]
    labels: Dict[str, int] = {}
    words = []
    for slot in tpl:
        if slot in grammar.attributes:
            cats = grammar.categories(slot)
            k = fixed[slot] if slot in fixed else int(rng.integers(len(cats)))
            labels[slot] = k
            pool = grammar.attributes[slot][cats[k]]
        else:
            pool = grammar.roles[slot]
        words.append(pool[rng.integers(len(pool))])
    return words, labels


@dataclass
class SyntheticCorpus:
    unlabeled: List[str]
    labeled: Dict[str, List[Tuple[str, str]]]
    word_labeled: Dict[str, List[Tuple[str, str]]]


def generate_synthetic_corpus(
    grammar: GrammarSpec, n_unlabeled: int, n_labeled_per_attribute: int, seed: int
) -> SyntheticCorpus:
    """Unlabeled sentences plus one stratified labeled set per attribute.

    Labeled pairs are ``(category_name, sentence)``. Labeled sets come from
    independent random streams, so each annotates exactly one attribute.
    """
    if n_unlabeled < 0 or n_labeled_per_attribute < 0:
        raise ValueError("counts must be nonnegative")
    grammar.validate()
    rng = np.random.default_rng([seed, 0])
    unlabeled = [" ".join(_realize(grammar, rng, {})[0]) for _ in range(n_unlabeled)]
    labeled: Dict[str, List[Tuple[str, str]]] = {}
    words: Dict[str, List[Tuple[str, str]]] = {}
    for a_idx, attr in enumerate(grammar.attributes):
        arng = np.random.default_rng([seed, 1, a_idx])
        cats = grammar.categories(attr)
        K = len(cats)
        # exact stratification; any remainder goes to the first categories
        ks = [i % K for i in range(n_labeled_per_attribute)]
        pairs = []
        for k in ks:
            sent, _ = _realize(grammar, arng, {attr: k})
            pairs.append((cats[k], " ".join(sent)))
        order = arng.permutation(len(pairs))
        labeled[attr] = [pairs[i] for i in order]
        words[attr] = [(cat, w) for cat in cats for w in grammar.attributes[attr][cat]]
    return SyntheticCorpus(unlabeled, labeled, words)


def oracle_classify(tokens: Sequence[str], attribute: str, grammar: GrammarSpec) -> int:
    """Category index whose word set the sentence hits, or UNDECIDABLE."""
    if attribute not in grammar.attributes:
        raise ValueError(f"unknown attribute {attribute!r}")
    hit = set()
    for k, cat in enumerate(grammar.categories(attribute)):
        words = grammar.attributes[attribute][cat]
        if any(t in words for t in tokens):
            hit.add(k)
    return hit.pop() if len(hit) == 1 else UNDECIDABLE


def content_tokens(tokens: Sequence[str], grammar: GrammarSpec) -> List[str]:
    """Tokens playing a content role (subject/object), in order."""
    roles = grammar.role_of()
    keep = set(grammar.content_roles)
    return [t for t in tokens if roles.get(t) in keep]


# -- corpus files ---------------------------------------------------------------


def read_corpus(path) -> List[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [" ".join(line.split()) for line in lines if line.strip()]


def write_corpus(path, sentences: Iterable[str]) -> None:
    Path(path).write_text("".join(s + "\n" for s in sentences), encoding="utf-8")


def read_labeled(path) -> List[Tuple[str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'label<TAB>sentence'")
        label, sent = line.split("\t", 1)
        out.append((label.strip(), " ".join(sent.split())))
    return out


def write_labeled(path, pairs: Iterable[Tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{lab}\t{s}\n" for lab, s in pairs), encoding="utf-8")


def encode_labeled(
    pairs: Sequence[Tuple[str, str]], categories: Sequence[str], vocab: Vocabulary, max_len: int
) -> List[Tuple[List[int], int]]:
    index = {c: i for i, c in enumerate(categories)}
    out = []
    for label, sent in pairs:
        if label not in index:
            raise ValueError(f"label {label!r} is not one of {list(categories)}")
        out.append((encode(sent, vocab, max_len), index[label]))
    return out
