"""Attentional LSTM encoder-decoder with two encoders and one shared decoder.

``enc_s`` reads source-side sequences and ``enc_t`` target-side ones; both
feed the same decoder ``dec_t`` (which owns the target embedding, the
bilinear attention matrix and the output projection). Arrays are
time-major: token batches are ``[T, B]``, hidden sequences ``[T, B, D]``.
"""
import hashlib
import json
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np

from . import tensor as tn
from .data import BOS, EOS, PAD
from .tensor import Tensor

CHECKPOINT_FORMAT = "semiseq-ckpt/1"
GROUPS = ("enc_s", "enc_t", "dec_t")


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 64
    enc_layers: int = 1
    dec_layers: int = 1
    dropout: float = 0.3
    init_scale: float = 0.08


def pad_batch(seqs):
    """Right-pad id sequences with PAD; returns ``ids [T,B]`` and ``mask [T,B]``."""
    T = max(len(s) for s in seqs)
    ids = np.full((T, len(seqs)), PAD, dtype=np.int64)
    mask = np.zeros((T, len(seqs)))
    for b, s in enumerate(seqs):
        ids[:len(s), b] = s
        mask[:len(s), b] = 1.0
    return ids, mask


class LstmParams:
    """One direction of one LSTM layer. Gate order: input, forget, cell, output."""

    def __init__(self, prefix, input_dim, hidden_dim, rng, init_scale):
        u = lambda *shape: rng.uniform(-init_scale, init_scale, size=shape)
        H = hidden_dim
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        self.input_weights = Tensor(u(input_dim, 4 * H), True, f"{prefix}.input_weights")
        self.recurrent_weights = Tensor(u(H, 4 * H), True, f"{prefix}.recurrent_weights")
        b = u(4 * H)
        b[H:2 * H] = 1.0
        self.biases = Tensor(b, True, f"{prefix}.biases")

    def params(self):
        return [self.input_weights, self.recurrent_weights, self.biases]

    def run(self, x, h0, c0, mask=None, reverse=False):
        xw = tn.add(tn.matmul(x, self.input_weights), self.biases)
        return tn.lstm(xw, self.recurrent_weights, h0, c0, mask, reverse)


class Encoder:
    """Stacked bidirectional LSTM plus a tanh bridge to the decoder's initial
    hidden state (one bridge per decoder layer)."""

    def __init__(self, name, cfg, rng):
        self.name = name
        H = cfg.hidden_dim
        self.layers = []
        for l in range(cfg.enc_layers):
            in_dim = cfg.embed_dim if l == 0 else 2 * H
            self.layers.append((
                LstmParams(f"{name}.layer{l}.fwd", in_dim, H, rng, cfg.init_scale),
                LstmParams(f"{name}.layer{l}.bwd", in_dim, H, rng, cfg.init_scale),
            ))
        s = cfg.init_scale
        self.bridge = [
            (Tensor(rng.uniform(-s, s, (2 * H, H)), True, f"{name}.bridge{l}.weights"),
             Tensor(rng.uniform(-s, s, H), True, f"{name}.bridge{l}.biases"))
            for l in range(cfg.dec_layers)
        ]

    def params(self):
        out = []
        for fwd, bwd in self.layers:
            out += fwd.params() + bwd.params()
        for w, b in self.bridge:
            out += [w, b]
        return out


@dataclass
class EncoderOutput:
    H: Tensor                 # [S, B, 2H] per-position states, both directions
    mask: np.ndarray          # [S, B]
    init_state: list          # per decoder layer: (h [B,H], c [B,H])
    lengths: List[int]
    keys: Optional[Tensor] = None   # H projected by the attention matrix, lazily

    def __len__(self):
        return self.H.shape[0]


@dataclass
class AttentionStep:
    scores: np.ndarray   # [T, B, S]
    weights: np.ndarray  # [T, B, S]
    context: Tensor      # [T, B, 2H]


@dataclass
class DecoderState:
    layers: list  # per layer: (h [B,H], c [B,H])

    @property
    def top(self):
        return self.layers[-1][0]


@dataclass
class Decoding:
    probs: Tensor          # [T, B, V]
    tokens: np.ndarray     # [T, B] gold (teacher forcing) or produced ids
    mask: np.ndarray       # [T, B] 1 on real positions
    attention: np.ndarray  # [T, B, S]

    def sequences(self):
        """Per-example id lists (including EOS if produced)."""
        lengths = self.mask.sum(axis=0).astype(int)
        return [self.tokens[:n, b].tolist() for b, n in enumerate(lengths)]


class Seq2SeqModel:
    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        s, E, H, V = cfg.init_scale, cfg.embed_dim, cfg.hidden_dim, cfg.tgt_vocab_size
        self.src_embedding = Tensor(rng.uniform(-s, s, (cfg.src_vocab_size, E)), True, "src_embedding")
        self.tgt_embedding = Tensor(rng.uniform(-s, s, (V, E)), True, "tgt_embedding")
        self.enc_s = Encoder("enc_s", cfg, rng)
        self.enc_t = Encoder("enc_t", cfg, rng)
        self.dec_layers = [
            LstmParams(f"dec_t.layer{l}", E if l == 0 else H, H, rng, s)
            for l in range(cfg.dec_layers)
        ]
        self.attention_weights = Tensor(rng.uniform(-s, s, (2 * H, H)), True, "dec_t.attention.weights")
        self.output_weights = Tensor(rng.uniform(-s, s, (3 * H, V)), True, "dec_t.output.weights")
        self.output_biases = Tensor(rng.uniform(-s, s, V), True, "dec_t.output.biases")

    # -- parameter bookkeeping ------------------------------------------------

    def groups(self):
        dec = [self.tgt_embedding]
        for layer in self.dec_layers:
            dec += layer.params()
        dec += [self.attention_weights, self.output_weights, self.output_biases]
        return {
            "enc_s": [self.src_embedding] + self.enc_s.params(),
            "enc_t": self.enc_t.params(),
            "dec_t": dec,
        }

    def params(self, *groups):
        g = self.groups()
        out = []
        for name in groups or GROUPS:
            out += g[name]
        return out

    def named_params(self):
        return {p.name: p for p in self.params()}

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def snapshot(self):
        return {p.name: p.data.copy() for p in self.params()}

    def restore(self, snap):
        for p in self.params():
            p.data[...] = snap[p.name]

    def fingerprint(self, group):
        h = hashlib.sha256()
        for p in self.groups()[group]:
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- encoder ----------------------------------------------------------------

    def encode(self, batch, which="source", training=False, rng=None):
        """Encode a batch of id sequences with ``enc_s`` or ``enc_t``."""
        if which not in ("source", "target"):
            raise ValueError(f"which must be 'source' or 'target', got {which!r}")
        if not batch or any(len(s) == 0 for s in batch):
            raise ValueError("encode needs a nonempty batch of nonempty sequences")
        encoder, table = ((self.enc_s, self.src_embedding) if which == "source"
                          else (self.enc_t, self.tgt_embedding))
        ids, mask = pad_batch(batch)
        S, B = ids.shape
        H = self.cfg.hidden_dim
        x = tn.lookup(table, ids)
        zeros = Tensor(np.zeros((B, H)))
        for l, (fwd, bwd) in enumerate(encoder.layers):
            hf, _ = fwd.run(x, zeros, zeros, mask, reverse=False)
            hb, _ = bwd.run(x, zeros, zeros, mask, reverse=True)
            x = tn.concat([hf, hb])
            if l + 1 < len(encoder.layers):
                x = tn.dropout(x, self.cfg.dropout, training, rng)
        # padding carries state, so the last row / first row hold each direction's final state
        final = tn.concat([tn.index(hf, S - 1), tn.index(hb, 0)])
        init = [(tn.tanh(tn.add(tn.matmul(final, w), b)), zeros) for w, b in encoder.bridge]
        H_out = tn.dropout(x, self.cfg.dropout, training, rng)
        return EncoderOutput(H_out, mask, init, [len(s) for s in batch])

    # -- attention --------------------------------------------------------------

    def _keys(self, enc):
        if enc.keys is None:
            enc.keys = tn.matmul(enc.H, self.attention_weights)
        return enc.keys

    def attend(self, queries, enc):
        """Bilinear scores ``q^T W h_j`` for queries ``[T,B,H]`` (or ``[B,H]``),
        softmax over encoder positions, context ``sum_j a_j h_j``."""
        if queries.ndim == 2:
            queries = tn.reshape(queries, (1,) + queries.shape)
        ctx, w, scores = tn.attention(queries, self._keys(enc), enc.H, enc.mask)
        return AttentionStep(scores, w, ctx)

    # -- decoder ----------------------------------------------------------------

    def initial_state(self, enc):
        return DecoderState(list(enc.init_state))

    def _project(self, top, ctx, training, rng):
        out = tn.concat([tn.dropout(top, self.cfg.dropout, training, rng), ctx])
        logits = tn.add(tn.matmul(out, self.output_weights), self.output_biases)
        return tn.softmax_rows(logits)

    def decode_step(self, prev_tokens, state, enc, training=False, rng=None):
        """One decoder step for a batch: returns ``(p_t [B,V], new_state, AttentionStep)``.

        Attention reads the pre-step top state; the output projection sees
        the post-step top state and the context.
        """
        prev = np.asarray(prev_tokens, dtype=np.int64)
        B = prev.shape[0]
        x = tn.reshape(tn.lookup(self.tgt_embedding, prev), (1, B, -1))
        att = self.attend(state.top, enc)
        new_layers = []
        for l, (layer, (h, c)) in enumerate(zip(self.dec_layers, state.layers)):
            hs, cs = layer.run(x, h, c)
            new_layers.append((tn.reshape(hs, (B, -1)), tn.reshape(cs, (B, -1))))
            x = hs if l + 1 == len(self.dec_layers) else tn.dropout(hs, self.cfg.dropout, training, rng)
        p = self._project(x, att.context, training, rng)
        return tn.reshape(p, (B, -1)), DecoderState(new_layers), att

    def decode_teacher_forced(self, enc, targets, training=False, rng=None):
        """Distributions for gold ``targets`` (id lists, EOS included by the
        caller); step t consumes BOS at t=0 and ``y_{t-1}`` after."""
        if not targets or any(len(y) == 0 for y in targets):
            raise ValueError("teacher forcing needs nonempty targets")
        gold, mask = pad_batch(targets)
        T, B = gold.shape
        inputs = np.vstack([np.full((1, B), BOS, dtype=np.int64), gold[:-1]])
        x = tn.lookup(self.tgt_embedding, inputs)
        for l, (layer, (h0, c0)) in enumerate(zip(self.dec_layers, enc.init_state)):
            hs, _ = layer.run(x, h0, c0, mask)
            x = hs if l + 1 == len(self.dec_layers) else tn.dropout(hs, self.cfg.dropout, training, rng)
        top0 = tn.reshape(enc.init_state[-1][0], (1, B, -1))
        queries = top0 if T == 1 else tn.concat([top0, tn.index(x, slice(0, T - 1))], axis=0)
        att = self.attend(queries, enc)
        probs = self._project(x, att.context, training, rng)
        return Decoding(probs, gold, mask, att.weights)

    def decode_autoregressive(self, enc, mode="greedy", max_len=40, rng=None,
                              training=False, forced=None):
        """Feed back the model's own outputs until EOS or ``max_len``.

        ``mode`` is ``greedy`` (argmax, lowest id on ties) or ``sample``.
        ``forced`` replays given id sequences instead of choosing, which
        reproduces a previous rollout exactly.
        """
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        if mode not in ("greedy", "sample"):
            raise ValueError(f"unknown decoding mode {mode!r}")
        B = enc.H.shape[1]
        if forced is not None:
            max_len = max(len(f) for f in forced)
        state = self.initial_state(enc)
        prev = np.full(B, BOS, dtype=np.int64)
        finished = np.zeros(B, dtype=bool)
        probs, toks, masks, atts = [], [], [], []
        for t in range(max_len):
            p, state, att = self.decode_step(prev, state, enc, training, rng)
            if forced is not None:
                tok = np.array([f[t] if t < len(f) else PAD for f in forced], dtype=np.int64)
                done_now = np.array([t >= len(f) for f in forced])
                finished = finished | done_now
            elif mode == "greedy":
                tok = np.argmax(p.data, axis=1)
            else:
                cdf = np.cumsum(p.data, axis=1)
                u = rng.random(B) * cdf[:, -1]
                tok = np.minimum((cdf < u[:, None]).sum(axis=1), p.shape[1] - 1)
            tok = np.where(finished, PAD, tok)
            probs.append(p)
            toks.append(tok)
            masks.append((~finished).astype(np.float64))
            atts.append(att.weights[0])
            finished = finished | (tok == EOS)
            if finished.all() and forced is None:
                break
            prev = np.where(finished, EOS, tok)
        return Decoding(tn.stack(probs), np.stack(toks), np.stack(masks), np.stack(atts))

    # -- checkpoints ------------------------------------------------------------

    def save(self, path, meta=None):
        """``.npz`` archive: one array per canonical parameter name plus a
        JSON ``__meta__`` entry (format tag, config, caller metadata)."""
        info = {"format": CHECKPOINT_FORMAT, "config": asdict(self.cfg)}
        info.update(meta or {})
        arrays = {p.name: p.data for p in self.params()}
        arrays["__meta__"] = np.frombuffer(json.dumps(info, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            info = json.loads(bytes(z["__meta__"]).decode())
            if info.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: unsupported checkpoint format {info.get('format')!r}")
            model = cls(ModelConfig(**info["config"]))
            for p in model.params():
                if p.name not in z:
                    raise ValueError(f"{path}: missing parameter {p.name}")
                if z[p.name].shape != p.shape:
                    raise ValueError(f"{path}: {p.name} has shape {z[p.name].shape}, want {p.shape}")
                p.data[...] = z[p.name]
        return model, info
