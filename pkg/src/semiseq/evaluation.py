"""Corpus BLEU, perplexity and token accuracy."""
import math
from collections import Counter

import numpy as np


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses, references, max_order=4):
    """Clipped match counts and totals per order plus corpus lengths."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu(hypotheses, references, max_order=4):
    """Corpus BLEU in [0, 100], multi-bleu style: no smoothing, so any
    order with zero matches gives 0.

    An order for which the hypotheses contain no n-grams at all (every
    hypothesis shorter than n) has precision 0/0; it is left out of the
    geometric mean instead of zeroing the score.
    """
    if not references:
        raise ValueError("BLEU needs at least one reference")
    matches, totals, hyp_len, ref_len = bleu_stats(hypotheses, references, max_order)
    orders = [(m, t) for m, t in zip(matches, totals) if t > 0]
    if hyp_len == 0 or any(m == 0 for m, _ in orders):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in orders) / len(orders)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def token_accuracy(hypotheses, references):
    """Position-wise matches over the total number of reference tokens."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    hits = total = 0
    for hyp, ref in zip(hypotheses, references):
        hits += sum(1 for a, b in zip(hyp, ref) if a == b)
        total += len(ref)
    return hits / total if total else 0.0


def token_nll(model, pairs, batch_size=64):
    """Summed teacher-forced negative log-likelihood and token count
    (targets include the closing EOS), in eval mode."""
    from .data import EOS

    nll, count = 0.0, 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        enc = model.encode([s for s, _ in chunk], "source", training=False)
        dec = model.decode_teacher_forced(enc, [list(t) + [EOS] for _, t in chunk], training=False)
        gold = np.take_along_axis(dec.probs.data, dec.tokens[..., None], axis=-1)[..., 0]
        nll -= float(np.sum(np.log(gold) * dec.mask))
        count += int(dec.mask.sum())
    return nll, count


def perplexity(model, pairs, batch_size=64):
    """``exp`` of the mean per-token cross entropy over id-encoded pairs."""
    if not pairs:
        raise ValueError("perplexity needs a nonempty corpus")
    nll, count = token_nll(model, pairs, batch_size)
    return math.exp(nll / count)
