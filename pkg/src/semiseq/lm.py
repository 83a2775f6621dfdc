"""Interpolated trigram language model and the per-token LM reward."""
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import BOS, EOS

FORMAT_TAG = "semiseq-lm v1"
DEFAULT_LAMBDAS = (0.7, 0.2, 0.09)


@dataclass
class NGramModel:
    unigrams: Counter
    bigrams: Counter
    trigrams: Counter
    total: int
    vocab_size: int
    lambdas: tuple = DEFAULT_LAMBDAS
    epsilon: float = 0.0
    bos: int = BOS
    eos: int = EOS
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        l3, l2, l1 = self.lambdas
        if min(self.lambdas) < 0 or l3 + l2 + l1 > 1.0 + 1e-12:
            raise ValueError(f"interpolation weights must be >= 0 and sum to <= 1: {self.lambdas}")
        if self.epsilon <= 0:
            self.epsilon = 0.01 / self.vocab_size


def _padded(sent, bos, eos):
    return [bos, bos] + list(sent) + [eos]


def train_lm(corpus, vocab_size=None, lambdas=DEFAULT_LAMBDAS, epsilon=None, bos=BOS, eos=EOS):
    """Count 1/2/3-grams over sentences padded as ``BOS BOS w1 .. wn EOS``.

    ``vocab_size`` sets the floor ``epsilon = 0.01 / V`` unless ``epsilon``
    is given; it defaults to the number of distinct padded token types.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot train a language model on an empty corpus")
    uni, bi, tri = Counter(), Counter(), Counter()
    for sent in corpus:
        p = _padded(sent, bos, eos)
        uni.update(p)
        bi.update(zip(p, p[1:]))
        tri.update(zip(p, p[1:], p[2:]))
    V = vocab_size if vocab_size is not None else len(uni)
    return NGramModel(uni, bi, tri, sum(uni.values()), V, tuple(lambdas),
                      epsilon if epsilon is not None else 0.0, bos, eos)


def trigram_prob(model, w1, w2, w3):
    """Interpolated ``P(w3 | w1 w2)`` plus floor, clamped to 1.

    Terms whose history count is zero contribute nothing.
    """
    key = (w1, w2, w3)
    hit = model._cache.get(key)
    if hit is not None:
        return hit
    l3, l2, l1 = model.lambdas
    p = model.epsilon
    c12 = model.bigrams.get((w1, w2), 0)
    if c12:
        p += l3 * model.trigrams.get(key, 0) / c12
    c2 = model.unigrams.get(w2, 0)
    if c2:
        p += l2 * model.bigrams.get((w2, w3), 0) / c2
    if model.total:
        p += l1 * model.unigrams.get(w3, 0) / model.total
    p = min(p, 1.0)
    model._cache[key] = p
    return p


def sequence_rewards(model, seq):
    """Reward of every token: mean log-probability of the three trigrams
    that contain it, on the sequence padded with two BOS and two EOS."""
    if len(seq) == 0:
        raise ValueError("cannot score an empty sequence")
    p = [model.bos, model.bos] + [int(w) for w in seq] + [model.eos, model.eos]
    logs = [math.log(trigram_prob(model, p[k], p[k + 1], p[k + 2])) for k in range(len(p) - 2)]
    # token t (padded position t+2) sits in windows starting at t, t+1, t+2
    return np.array([(logs[t] + logs[t + 1] + logs[t + 2]) / 3.0 for t in range(len(seq))])


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

def save_lm(model, path, itos=None):
    """Write counts per order as ``count<TAB>w1 w2 w3`` under an ARPA-like
    header. ``itos`` renders ids as tokens; without it ids are written."""
    name = (lambda i: itos[i]) if itos is not None else str
    l3, l2, l1 = model.lambdas
    lines = [
        f"# {FORMAT_TAG}",
        "order 3",
        f"lambda3 {l3!r}",
        f"lambda2 {l2!r}",
        f"lambda1 {l1!r}",
        f"epsilon {model.epsilon!r}",
        f"vocab_size {model.vocab_size}",
        f"total {model.total}",
        f"bos {name(model.bos)}",
        f"eos {name(model.eos)}",
    ]
    for order, table in ((1, model.unigrams), (2, model.bigrams), (3, model.trigrams)):
        entries = []
        for key, c in table.items():
            key = (key,) if order == 1 else key
            entries.append((" ".join(name(k) for k in key), c))
        entries.sort()
        lines.append("")
        lines.append(f"\\{order}-grams: {len(entries)}")
        lines += [f"{c}\t{gram}" for gram, c in entries]
    lines += ["", "\\end\\", ""]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines))


def load_lm(path, stoi=None, unk=None):
    """Read a file written by :func:`save_lm`.

    With ``stoi`` tokens map to ids (unknown ones to ``unk``; colliding
    n-grams have their counts summed). Without it ids are parsed as ints.
    """
    def ident(tok):
        if stoi is None:
            return int(tok)
        if tok in stoi:
            return stoi[tok]
        if unk is None:
            raise KeyError(f"token {tok!r} not in vocabulary")
        return unk

    header, tables, order = {}, {1: Counter(), 2: Counter(), 3: Counter()}, None
    with open(path, encoding="utf-8") as f:
        first = f.readline().strip()
        if first != f"# {FORMAT_TAG}":
            raise ValueError(f"{path}: not a {FORMAT_TAG} file")
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("\\end\\"):
                break
            if line.startswith("\\") and "-grams:" in line:
                order = int(line[1])
                continue
            if order is None:
                k, v = line.split(" ", 1)
                header[k] = v
                continue
            c, gram = line.split("\t")
            ids = tuple(ident(t) for t in gram.split(" "))
            tables[order][ids[0] if order == 1 else ids] += int(c)
    return NGramModel(
        tables[1], tables[2], tables[3],
        total=int(header["total"]),
        vocab_size=int(header["vocab_size"]),
        lambdas=(float(header["lambda3"]), float(header["lambda2"]), float(header["lambda1"])),
        epsilon=float(header["epsilon"]),
        bos=ident(header["bos"]),
        eos=ident(header["eos"]),
    )
