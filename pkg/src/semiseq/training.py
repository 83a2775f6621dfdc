"""Losses and the three-route joint training loop.

Route 1 trains ``enc_s`` + ``dec_t`` on labeled pairs, route 2 trains
``enc_t`` + ``dec_t`` as a denoising auto-encoder on target-side text, and
route 3 trains ``enc_s`` + ``dec_t`` with REINFORCE on source-side text
scored by the frozen n-gram LM. Each step picks one route at random.
"""
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as tn
from .data import EOS, DataSplit
from .evaluation import bleu, token_accuracy, token_nll
from .lm import sequence_rewards
from .noise import NoiseConfig, corrupt

log = logging.getLogger(__name__)

ROUTE_PARAMS = {1: ("enc_s", "dec_t"), 2: ("enc_t", "dec_t"), 3: ("enc_s", "dec_t")}

PRESETS = {
    "r1": {"route_weights": (1.0, 0.0, 0.0), "all_use_rl": False},
    "r1+lm": {"route_weights": (1.0, 0.0, 0.0), "all_use_rl": True},
    "r12+lm": {"route_weights": (0.5, 0.5, 0.0), "all_use_rl": True},
    "r123+lm": {"route_weights": (1 / 3, 1 / 3, 1 / 3), "all_use_rl": True},
}

METRIC_COLUMNS = ("step", "route1", "route2", "route3", "train_ce", "train_rl",
                  "dev_ce", "dev_ppl", "dev_bleu", "dev_acc")


@dataclass
class TrainConfig:
    alpha: float = 0.2
    all_use_rl: bool = False
    route_weights: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    learning_rate: float = 1.0
    clip_norm: float = 5.0
    dropout: float = 0.3
    batch_size: int = 16
    max_steps: int = 5000
    eval_every: int = 100
    patience: int = 10
    max_decode_len: int = 40
    rl_baseline: bool = False
    rollout_dropout: bool = True
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        self.route_weights = tuple(float(w) for w in self.route_weights)
        w = self.route_weights
        if len(w) != 3 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"route_weights must be 3 nonnegative numbers summing to 1, got {w}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")

    def uses_rl(self):
        return self.all_use_rl or self.route_weights[2] > 0

    def to_dict(self):
        d = asdict(self)
        d["route_weights"] = list(self.route_weights)
        return d


def preset_config(name, **overrides):
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


@dataclass
class LossBundle:
    ce: float
    rl: float
    combined: float


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _as_batch(P, Y, mask):
    """Accept one sequence (``P [T,V]``, ``Y [T]``) or a padded batch."""
    Y = np.asarray(Y, dtype=np.int64)
    if P.ndim == 2:
        if P.shape[0] != len(Y):
            raise ValueError(f"|P| = {P.shape[0]} but |Y| = {len(Y)}")
        P = tn.reshape(P, (P.shape[0], 1, P.shape[1]))
        Y = Y.reshape(-1, 1)
    if P.shape[:2] != Y.shape:
        raise ValueError(f"distributions {P.shape[:2]} and ids {Y.shape} differ in length")
    mask = np.ones(Y.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    return P, Y, mask


def _log_gold(P, Y):
    return tn.log(tn.pick(P, Y))


def cross_entropy(P, Y, mask=None):
    """Mean over the batch of ``-(1/|Y|) sum_t ln p_{t, y_t}``."""
    P, Y, mask = _as_batch(P, Y, mask)
    lengths = mask.sum(axis=0)
    weights = mask / (lengths * Y.shape[1])
    return tn.scale(tn.weighted_sum(_log_gold(P, Y), weights), -1.0)


def reinforce_loss(P, Y, rewards, mask=None):
    """Mean over the batch of ``-(1/|Y'|) sum_t r_t ln p_{t, y'_t}``.

    ``rewards`` has the shape of ``Y`` and is a constant: no gradient flows
    through it or through the choice of ``Y``.
    """
    P, Y, mask = _as_batch(P, Y, mask)
    r = np.asarray(rewards, dtype=np.float64).reshape(Y.shape)
    if r.shape != Y.shape:
        raise ValueError(f"rewards {r.shape} and ids {Y.shape} differ in length")
    lengths = mask.sum(axis=0)
    weights = r * mask / (lengths * Y.shape[1])
    return tn.scale(tn.weighted_sum(_log_gold(P, Y), weights), -1.0)


def combine(ce, rl, alpha):
    return tn.add(ce, tn.scale(rl, alpha))


# ---------------------------------------------------------------------------
# routes
# ---------------------------------------------------------------------------

class RewardBaseline:
    """Running mean of all per-token rewards seen so far."""

    def __init__(self):
        self.total = 0.0
        self.count = 0

    @property
    def value(self):
        return self.total / self.count if self.count else 0.0

    def update(self, rewards, mask):
        self.total += float(np.sum(rewards * mask))
        self.count += int(mask.sum())


@dataclass
class RouteContext:
    """Per-run mutable state shared by the route trainers."""
    lm: object = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    noise_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(1))
    baseline: Optional[RewardBaseline] = None
    # the most recent rollout Y'; when ``replay`` is set it is used instead
    # of sampling, which freezes Y' for finite-difference checks
    last_sample: Optional[list] = None
    replay: Optional[list] = None


def rollout_rewards(lm, decoding, baseline=None):
    """LM rewards for every produced token, ``[T, B]`` with zeros on padding."""
    rewards = np.zeros(decoding.tokens.shape)
    for b, seq in enumerate(decoding.sequences()):
        rewards[:len(seq), b] = sequence_rewards(lm, seq)
    if baseline is not None:
        b_val = baseline.value
        baseline.update(rewards, decoding.mask)
        rewards = (rewards - b_val) * decoding.mask
    return rewards


def _rl_term(model, enc, cfg, ctx):
    if ctx.lm is None:
        raise ValueError("an RL loss was requested but no language model was given")
    if cfg.rollout_dropout:
        # differentiate straight through the stepwise rollout, dropout included
        mode = "sample" if ctx.replay is None else "greedy"
        roll = model.decode_autoregressive(enc, mode, cfg.max_decode_len, ctx.rng,
                                           training=True, forced=ctx.replay)
        ctx.last_sample = roll.sequences()
        rewards = rollout_rewards(ctx.lm, roll, ctx.baseline)
        return reinforce_loss(roll.probs, roll.tokens, rewards, roll.mask)
    # sample without recording, then rescore Y' in one teacher-forced pass;
    # without dropout both passes give the same distributions
    with tn.no_grad():
        # a copy, so attention keys cached here (unrecorded) are not reused below
        mode = "sample" if ctx.replay is None else "greedy"
        roll = model.decode_autoregressive(replace(enc, keys=None), mode,
                                           cfg.max_decode_len, ctx.rng, forced=ctx.replay)
    ctx.last_sample = roll.sequences()
    rewards = rollout_rewards(ctx.lm, roll, ctx.baseline)
    dec = model.decode_teacher_forced(enc, ctx.last_sample, training=False)
    return reinforce_loss(dec.probs, dec.tokens, rewards, dec.mask)


def _supervised_loss(model, enc, targets, cfg, ctx):
    dec = model.decode_teacher_forced(enc, [list(y) + [EOS] for y in targets], True, ctx.rng)
    ce = cross_entropy(dec.probs, dec.tokens, dec.mask)
    if not cfg.all_use_rl:
        return ce, None, ce
    rl = _rl_term(model, enc, cfg, ctx)
    return ce, rl, combine(ce, rl, cfg.alpha)


def _update(model, route, loss_fn, cfg):
    with tn.Tape() as tape:
        ce, rl, loss = loss_fn()
        tape.backward(loss)
    tn.sgd_step(model.params(*ROUTE_PARAMS[route]), cfg.learning_rate, cfg.clip_norm)
    model.zero_grad()
    return LossBundle(ce.item() if ce is not None else 0.0,
                      rl.item() if rl is not None else 0.0, loss.item())


def route1_loss(model, pairs, cfg, ctx):
    enc = model.encode([x for x, _ in pairs], "source", True, ctx.rng)
    return _supervised_loss(model, enc, [y for _, y in pairs], cfg, ctx)


def route2_loss(model, targets, cfg, ctx):
    noisy = [corrupt(y, cfg.noise, ctx.noise_rng) for y in targets]
    enc = model.encode(noisy, "target", True, ctx.rng)
    return _supervised_loss(model, enc, targets, cfg, ctx)


def route3_loss(model, sources, cfg, ctx):
    enc = model.encode(sources, "source", True, ctx.rng)
    rl = _rl_term(model, enc, cfg, ctx)
    return None, rl, rl


def train_route1(pairs, model, cfg, ctx):
    """Supervised step on labeled (source ids, target ids) pairs."""
    return _update(model, 1, lambda: route1_loss(model, pairs, cfg, ctx), cfg)


def train_route2(targets, model, cfg, ctx):
    """Denoising auto-encoder step on target-side id sequences."""
    return _update(model, 2, lambda: route2_loss(model, targets, cfg, ctx), cfg)


def train_route3(sources, model, cfg, ctx):
    """REINFORCE step on source-side id sequences, rewarded by ``ctx.lm``."""
    return _update(model, 3, lambda: route3_loss(model, sources, cfg, ctx), cfg)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def greedy_decode(model, sources, max_len=40, batch_size=64, which="source"):
    out = []
    for start in range(0, len(sources), batch_size):
        enc = model.encode(sources[start:start + batch_size], which, training=False)
        dec = model.decode_autoregressive(enc, "greedy", max_len)
        for seq in dec.sequences():
            out.append(seq[:-1] if seq and seq[-1] == EOS else seq)
    return out


def evaluate_pairs(model, pairs, max_len=40):
    """Dev/test metrics on id-encoded pairs: CE, PPL, BLEU and token accuracy."""
    nll, count = token_nll(model, pairs)
    hyps = greedy_decode(model, [s for s, _ in pairs], max_len)
    refs = [list(t) for _, t in pairs]
    return {
        "ce": nll / count,
        "ppl": math.exp(nll / count),
        "bleu": bleu(hyps, refs),
        "acc": token_accuracy(hyps, refs),
    }


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------

@dataclass
class EncodedSplit:
    """A :class:`DataSplit` mapped to ids."""
    labeled: List[tuple]
    unlabeled_src: List[list]
    unlabeled_tgt: List[list]
    dev: List[tuple]
    test: List[tuple]

    @classmethod
    def from_split(cls, split: DataSplit, src_vocab, tgt_vocab):
        pair = lambda p: (src_vocab.encode(p[0]), tgt_vocab.encode(p[1]))
        return cls([pair(p) for p in split.labeled],
                   [src_vocab.encode(s) for s in split.unlabeled_src],
                   [tgt_vocab.encode(t) for t in split.unlabeled_tgt],
                   [pair(p) for p in split.dev],
                   [pair(p) for p in split.test])

    def route_pools(self):
        return {
            1: self.labeled,
            2: [y for _, y in self.labeled] + self.unlabeled_tgt,
            3: [x for x, _ in self.labeled] + self.unlabeled_src,
        }


@dataclass
class TrainResult:
    log: List[dict]
    best_step: int
    best_dev_ce: float
    steps: int
    route_counts: List[int]
    stopped_early: bool
    timings: List[Tuple[int, float]]


def seed_streams(seed):
    """Independent generators: route draws, batch sampling, model randomness
    (dropout, sampling), noise."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def effective_route_weights(weights, pools):
    w = np.array(weights, dtype=np.float64)
    for route in (1, 2, 3):
        if w[route - 1] > 0 and not pools[route]:
            log.warning("route %d has no data; its weight is set to 0", route)
            w[route - 1] = 0.0
    if w.sum() <= 0:
        raise ValueError("no route has both a positive weight and data")
    return w / w.sum()


def train(data: EncodedSplit, cfg: TrainConfig, model, lm=None, on_eval=None):
    """Random-route joint training with best-dev-loss early stopping.

    Every ``eval_every`` steps dev metrics are logged; training stops at
    ``max_steps`` or after ``patience`` evaluations without a dev-CE
    improvement, and the best-dev parameters are restored into ``model``.
    """
    if cfg.uses_rl() and lm is None:
        raise ValueError("this configuration uses the RL loss but no language model was given")
    route_rng, batch_rng, model_rng, noise_rng = seed_streams(cfg.seed)
    ctx = RouteContext(lm, model_rng, noise_rng, RewardBaseline() if cfg.rl_baseline else None)
    pools = data.route_pools()
    weights = effective_route_weights(cfg.route_weights, pools)
    trainers = {1: train_route1, 2: train_route2, 3: train_route3}

    counts = [0, 0, 0]
    ce_sum = rl_sum = 0.0
    n_ce = n_rl = 0
    rows, timings = [], []
    best = (math.inf, 0, model.snapshot())
    bad = 0
    stopped = False
    t0 = time.perf_counter()
    step = 0
    for step in range(1, cfg.max_steps + 1):
        route = int(route_rng.choice(3, p=weights)) + 1
        pool = pools[route]
        batch = [pool[i] for i in batch_rng.integers(0, len(pool), size=cfg.batch_size)]
        losses = trainers[route](batch, model, cfg, ctx)
        counts[route - 1] += 1
        if route != 3:
            ce_sum += losses.ce
            n_ce += 1
        if route == 3 or cfg.all_use_rl:
            rl_sum += losses.rl
            n_rl += 1
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            dev = evaluate_pairs(model, data.dev, cfg.max_decode_len)
            row = {"step": step, "route1": counts[0], "route2": counts[1], "route3": counts[2],
                   "train_ce": ce_sum / n_ce if n_ce else 0.0,
                   "train_rl": rl_sum / n_rl if n_rl else 0.0,
                   "dev_ce": dev["ce"], "dev_ppl": dev["ppl"], "dev_bleu": dev["bleu"],
                   "dev_acc": dev["acc"]}
            rows.append(row)
            timings.append((step, (time.perf_counter() - t0) * 1000.0))
            ce_sum = rl_sum = 0.0
            n_ce = n_rl = 0
            log.info("step %d routes %s dev ppl %.3f bleu %.2f acc %.3f",
                     step, counts, dev["ppl"], dev["bleu"], dev["acc"])
            if on_eval is not None:
                on_eval(row)
            if dev["ce"] < best[0]:
                best = (dev["ce"], step, model.snapshot())
                bad = 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    stopped = True
                    break
    if rows:
        model.restore(best[2])
    return TrainResult(rows, best[1], best[0], step, counts, stopped, timings)
