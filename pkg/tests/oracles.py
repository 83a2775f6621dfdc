"""Independent reference implementations used as test oracles.

Nothing here imports the package's counting, BLEU or noise code; each
function recomputes its quantity from the definition with plain loops.
"""
import math

BOS, EOS = 1, 2


def padded(sentence):
    return [BOS, BOS] + list(sentence) + [EOS]


def count_gram(corpus, gram):
    """Occurrences of the tuple ``gram`` in the padded corpus, by scanning."""
    n = 0
    k = len(gram)
    for sent in corpus:
        p = padded(sent)
        for i in range(len(p) - k + 1):
            if tuple(p[i:i + k]) == tuple(gram):
                n += 1
    return n


def interpolated_prob(corpus, w1, w2, w3, vocab_size, lambdas=(0.7, 0.2, 0.09)):
    l3, l2, l1 = lambdas
    N = sum(len(padded(s)) for s in corpus)
    p = 0.01 / vocab_size
    c12 = count_gram(corpus, (w1, w2))
    if c12 > 0:
        p += l3 * count_gram(corpus, (w1, w2, w3)) / c12
    c2 = count_gram(corpus, (w2,))
    if c2 > 0:
        p += l2 * count_gram(corpus, (w2, w3)) / c2
    p += l1 * count_gram(corpus, (w3,)) / N
    return min(p, 1.0)


def clipped_unigram_precision(hyp, ref):
    """Clipped 1-gram matches over hypothesis length, by explicit tallies."""
    used = {}
    matches = 0
    for w in hyp:
        limit = sum(1 for r in ref if r == w)
        if used.get(w, 0) < limit:
            used[w] = used.get(w, 0) + 1
            matches += 1
    return matches, len(hyp)


def uniform_ce(V):
    return math.log(V)
