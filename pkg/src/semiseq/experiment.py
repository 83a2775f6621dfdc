"""Glue shared by the CLI, the scale sweep and the acceptance suite:
synthetic split construction, vocabulary/LM preparation and one seeded
training run of a preset."""
import logging
from dataclasses import dataclass
from typing import Optional

from .data import DataSplit, SynthTaskSpec, Vocab, build_vocab, generate_synthetic, make_split
from .lm import NGramModel, train_lm
from .model import ModelConfig, Seq2SeqModel
from .training import EncodedSplit, TrainConfig, TrainResult, evaluate_pairs, train

log = logging.getLogger(__name__)


def synthetic_split(spec: SynthTaskSpec, n_labeled, n_unlabeled_src, n_unlabeled_tgt,
                    n_dev, n_test, seed) -> DataSplit:
    """Generate a corpus just large enough for the requested split."""
    need = n_labeled + n_unlabeled_src + n_unlabeled_tgt + n_dev + n_test
    if spec.size < need:
        spec = SynthTaskSpec(**{**spec.to_dict(), "size": need})
    corpus = generate_synthetic(spec)
    return make_split(corpus, n_labeled, n_unlabeled_src, n_unlabeled_tgt, n_dev, n_test, seed)


@dataclass
class Prepared:
    data: EncodedSplit
    src_vocab: Vocab
    tgt_vocab: Vocab
    lm: NGramModel


def prepare(split: DataSplit, min_count=1, lm: Optional[NGramModel] = None) -> Prepared:
    """Vocabularies from training-side text only (labeled plus the matching
    unlabeled pool), then the target LM on Y_L and Y_U unless one is given."""
    src_vocab = build_vocab([s for s, _ in split.labeled] + list(split.unlabeled_src), min_count)
    tgt_vocab = build_vocab([t for _, t in split.labeled] + list(split.unlabeled_tgt), min_count)
    data = EncodedSplit.from_split(split, src_vocab, tgt_vocab)
    if lm is None:
        lm = train_lm([y for _, y in data.labeled] + data.unlabeled_tgt, vocab_size=len(tgt_vocab))
    return Prepared(data, src_vocab, tgt_vocab, lm)


@dataclass
class RunOutcome:
    model: Seq2SeqModel
    result: TrainResult
    test: dict


def run(prep: Prepared, train_cfg: TrainConfig, embed_dim=64, hidden_dim=64,
        enc_layers=1, dec_layers=1, on_eval=None) -> RunOutcome:
    """Build a model seeded by ``train_cfg.seed``, train it and score the
    restored best-dev checkpoint on the test pairs."""
    mcfg = ModelConfig(len(prep.src_vocab), len(prep.tgt_vocab), embed_dim, hidden_dim,
                       enc_layers, dec_layers, dropout=train_cfg.dropout)
    model = Seq2SeqModel(mcfg, seed=train_cfg.seed)
    lm = prep.lm if train_cfg.uses_rl() else None
    result = train(prep.data, train_cfg, model, lm, on_eval=on_eval)
    test = evaluate_pairs(model, prep.data.test, train_cfg.max_decode_len)
    return RunOutcome(model, result, test)
