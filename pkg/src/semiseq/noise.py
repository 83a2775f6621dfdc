"""Word-level corruption used as the denoising function of the DAE route."""
from dataclasses import dataclass

import numpy as np

KEEP, DELETE, DUPLICATE, SWAP = "keep", "delete", "duplicate", "swap"


@dataclass
class NoiseConfig:
    p_delete: float = 0.1
    p_duplicate: float = 0.1
    p_swap: float = 0.1
    seed: int = 0

    def __post_init__(self):
        probs = (self.p_delete, self.p_duplicate, self.p_swap)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError(f"noise probabilities must lie in [0, 1], got {probs}")
        if sum(probs) > 1.0 + 1e-12:
            raise ValueError(f"noise probabilities sum to {sum(probs)} > 1")


def corrupt_trace(tokens, cfg, rng=None):
    """Corrupt ``tokens`` and also return the operation drawn at each step.

    One categorical draw per visited position picks delete, duplicate,
    swap-with-next or keep. A swap consumes the next position, which gets
    no draw of its own; at the last position it degrades to keep. A fully
    deleted sentence falls back to its first token.
    """
    if len(tokens) == 0:
        raise ValueError("cannot corrupt an empty sequence")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    c_del = cfg.p_delete
    c_dup = c_del + cfg.p_duplicate
    c_swap = c_dup + cfg.p_swap
    out, ops = [], []
    n = len(tokens)
    i = 0
    while i < n:
        u = rng.random()
        if u < c_del:
            ops.append(DELETE)
        elif u < c_dup:
            out += [tokens[i], tokens[i]]
            ops.append(DUPLICATE)
        elif u < c_swap:
            ops.append(SWAP)
            if i + 1 < n:
                out += [tokens[i + 1], tokens[i]]
                i += 1
            else:
                out.append(tokens[i])
        else:
            out.append(tokens[i])
            ops.append(KEEP)
        i += 1
    if not out:
        out = [tokens[0]]
    return out, ops


def corrupt(tokens, cfg, rng=None):
    return corrupt_trace(tokens, cfg, rng)[0]
