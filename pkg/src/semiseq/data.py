"""Vocabularies, parallel corpora, labeled/unlabeled splits and the synthetic
triple-verbalisation task."""
import hashlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

Pair = Tuple[List[str], List[str]]


class DataError(ValueError):
    """Malformed or insufficient data."""


class SizingError(DataError):
    pass


class FormatError(DataError):
    pass


class Vocab:
    """Token/id bijection with ids 0..3 reserved for PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        clash = set(tokens) & set(SPECIALS)
        if clash:
            raise ValueError(f"reserved tokens in vocabulary: {sorted(clash)}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = list(SPECIALS) + tokens
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int], strip: bool = True) -> List[str]:
        """Map ids back to tokens; with ``strip`` stop at EOS and drop PAD/BOS."""
        out = []
        for i in ids:
            i = int(i)
            if strip:
                if i == EOS:
                    break
                if i in (PAD, BOS):
                    continue
            out.append(self.itos[i])
        return out

    @property
    def tokens(self):
        return self.itos[len(SPECIALS):]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()


def build_vocab(corpus: Sequence[Sequence[str]], min_count: int = 1) -> Vocab:
    """Keep tokens seen at least ``min_count`` times, most frequent first
    (ties broken lexicographically)."""
    counts = Counter(tok for sent in corpus for tok in sent)
    for s in SPECIALS:
        counts.pop(s, None)
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(kept)


# ---------------------------------------------------------------------------
# parallel text files
# ---------------------------------------------------------------------------

def _read_lines(path):
    return Path(path).read_text(encoding="utf-8").splitlines()


def load_parallel(path_src, path_tgt) -> List[Pair]:
    """Pair line ``i`` of both files; tokens are whitespace separated."""
    src = _read_lines(path_src)
    tgt = _read_lines(path_tgt)
    if len(src) != len(tgt):
        raise FormatError(
            f"line count mismatch: {path_src} has {len(src)} lines, {path_tgt} has {len(tgt)}")
    return [(s.split(), t.split()) for s, t in zip(src, tgt)]


def load_text(path) -> List[List[str]]:
    return [line.split() for line in _read_lines(path)]


def write_text(sentences, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for sent in sentences:
            f.write(" ".join(sent) + "\n")


def write_parallel(pairs: Sequence[Pair], path_src, path_tgt):
    write_text([s for s, _ in pairs], path_src)
    write_text([t for _, t in pairs], path_tgt)


# ---------------------------------------------------------------------------
# synthetic verbalisation task
# ---------------------------------------------------------------------------

_PHRASE_WORDS = (
    "was born in works for lives near is part of has the a leader capital "
    "city located founded by member plays at won award speaks owns"
).split()


@dataclass
class SynthTaskSpec:
    """Knobs of the synthetic data-to-text task.

    Sources are runs of ``e<i> r<j> v<k>`` triples separated by ``|``;
    targets verbalise each triple with a per-relation template.
    ``grammar`` 0 emits one clause per triple ending in ``.``; grammar 1
    joins clauses with ``and`` into a single sentence.
    """
    n_entities: int = 20
    n_relations: int = 8
    n_values: int = 20
    max_triples: int = 3
    grammar: int = 0
    size: int = 1000
    seed: int = 0

    def validate(self):
        if self.size < 1:
            raise ValueError(f"size must be >= 1, got {self.size}")
        if not 1 <= self.max_triples <= 7:
            raise ValueError(f"max_triples must be in 1..7, got {self.max_triples}")
        if min(self.n_entities, self.n_relations, self.n_values) < 1:
            raise ValueError("n_entities, n_relations and n_values must be >= 1")
        if self.grammar not in (0, 1):
            raise ValueError(f"unknown grammar id {self.grammar}")
        if self.n_relations > 200:
            raise ValueError("n_relations above 200 exhausts the phrase pool")
        space = sum((self.n_entities * self.n_relations * self.n_values) ** k
                    for k in range(1, self.max_triples + 1))
        if self.size > space:
            raise ValueError(f"size {self.size} exceeds the {space} distinct examples available")

    def to_dict(self):
        return asdict(self)


def relation_phrases(spec: SynthTaskSpec) -> List[List[str]]:
    """Distinct 1-3 word phrase per relation, fixed by ``spec.seed``."""
    rng = np.random.default_rng([spec.seed, 7919])
    seen = set()
    phrases = []
    while len(phrases) < spec.n_relations:
        n = int(rng.integers(1, 4))
        words = tuple(_PHRASE_WORDS[i] for i in rng.choice(len(_PHRASE_WORDS), size=n, replace=False))
        if words not in seen:
            seen.add(words)
            phrases.append(list(words))
    return phrases


def parse_triples(src: Sequence[str]) -> List[Tuple[str, str, str]]:
    triples, cur = [], []
    for tok in src:
        if tok == "|":
            triples.append(tuple(cur))
            cur = []
        else:
            cur.append(tok)
    triples.append(tuple(cur))
    return triples


def render_target(src: Sequence[str], spec: SynthTaskSpec, phrases=None) -> List[str]:
    """The deterministic source-to-target mapping of the task."""
    phrases = relation_phrases(spec) if phrases is None else phrases
    clauses = []
    for ent, rel, val in parse_triples(src):
        clauses.append([ent] + phrases[int(rel[1:])] + [val])
    out = []
    for k, clause in enumerate(clauses):
        if spec.grammar == 0:
            out += clause + ["."]
        else:
            if k:
                out.append("and")
            out += clause
    if spec.grammar == 1:
        out.append(".")
    return out


def generate_synthetic(spec: SynthTaskSpec) -> List[Pair]:
    """``spec.size`` distinct (source, target) examples, a pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    phrases = relation_phrases(spec)
    seen = set()
    pairs = []
    while len(pairs) < spec.size:
        n = int(rng.integers(1, spec.max_triples + 1))
        src = []
        for k in range(n):
            if k:
                src.append("|")
            src += [f"e{rng.integers(spec.n_entities)}",
                    f"r{rng.integers(spec.n_relations)}",
                    f"v{rng.integers(spec.n_values)}"]
        key = tuple(src)
        if key in seen:
            continue
        seen.add(key)
        pairs.append((src, render_target(src, spec, phrases)))
    return pairs


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class DataSplit:
    labeled: List[Pair]
    unlabeled_src: List[List[str]]
    unlabeled_tgt: List[List[str]]
    dev: List[Pair]
    test: List[Pair]
    seed: int = 0
    indices: dict = field(default_factory=dict)

    def sizes(self):
        return {"labeled": len(self.labeled), "unlabeled_src": len(self.unlabeled_src),
                "unlabeled_tgt": len(self.unlabeled_tgt), "dev": len(self.dev),
                "test": len(self.test)}


def make_split(corpus: Sequence[Pair], n_labeled: int, n_unlabeled_src: int,
               n_unlabeled_tgt: int, n_dev: int, n_test: int, seed: int = 0) -> DataSplit:
    """Disjoint seeded draws. Unlabeled pools come from separate examples and
    keep only one side, so nothing downstream can re-pair them."""
    need = {"labeled": n_labeled, "unlabeled_src": n_unlabeled_src,
            "unlabeled_tgt": n_unlabeled_tgt, "dev": n_dev, "test": n_test}
    if any(v < 0 for v in need.values()):
        raise SizingError(f"split sizes must be non-negative: {need}")
    total = sum(need.values())
    if total > len(corpus):
        detail = ", ".join(f"{k}={v}" for k, v in need.items())
        raise SizingError(f"corpus has {len(corpus)} examples but the split needs {total} ({detail})")
    perm = np.random.default_rng(seed).permutation(len(corpus))
    idx, start = {}, 0
    for name, n in need.items():
        idx[name] = [int(i) for i in perm[start:start + n]]
        start += n
    return DataSplit(
        labeled=[corpus[i] for i in idx["labeled"]],
        unlabeled_src=[corpus[i][0] for i in idx["unlabeled_src"]],
        unlabeled_tgt=[corpus[i][1] for i in idx["unlabeled_tgt"]],
        dev=[corpus[i] for i in idx["dev"]],
        test=[corpus[i] for i in idx["test"]],
        seed=seed,
        indices=idx,
    )
