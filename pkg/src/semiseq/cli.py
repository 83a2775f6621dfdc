"""Command-line experiment runner.

Subcommands: gen-data, lm-train, train, generate, evaluate, corrupt, sweep.
Run ``semiseq <command> --help`` for the flags of each.

Configuration (YAML) for ``train`` and ``sweep``::

    preset: r123+lm          # r1 | r1+lm | r12+lm | r123+lm
    seed: 0
    data:
      synthetic: {n_entities: 20, n_relations: 8, n_values: 20,
                  max_triples: 3, grammar: 0, seed: 0}
      # or  parallel: {src: corpus.src, tgt: corpus.tgt}
      split: {labeled: 100, unlabeled_src: 2000, unlabeled_tgt: 2000,
              dev: 200, test: 200}          # optional seed: defaults to `seed`
      min_count: 1
    lm: auto                 # auto (train on Y_L and Y_U) or a path from lm-train
    model: {embed_dim: 64, hidden_dim: 64, enc_layers: 1, dec_layers: 1}
    train: {max_steps: 5000, eval_every: 100, ...}   # any TrainConfig field

Precedence, lowest first: built-in defaults, the preset, keys in the
config file, ``--set dotted.key=value`` flags (values parsed as YAML).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
"""
import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields

import numpy as np
import yaml

from . import __version__, _kernels
from .data import (DataError, SynthTaskSpec, build_vocab, generate_synthetic, load_parallel,
                   load_text, make_split, write_parallel, write_text)
from .evaluation import bleu, perplexity, token_accuracy
from .experiment import Prepared, prepare, run
from .lm import load_lm, save_lm, train_lm
from .model import ModelConfig, Seq2SeqModel
from .noise import NoiseConfig, corrupt
from .training import METRIC_COLUMNS, PRESETS, TrainConfig, greedy_decode, preset_config

log = logging.getLogger("semiseq")

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4

DEFAULTS = {
    "preset": "r1",
    "seed": 0,
    "data": {
        "synthetic": {},
        "split": {"labeled": 500, "unlabeled_src": 0, "unlabeled_tgt": 0, "dev": 200, "test": 200},
        "min_count": 1,
    },
    "lm": None,
    "model": {"embed_dim": 64, "hidden_dim": 64, "enc_layers": 1, "dec_layers": 1},
    "train": {},
}
TOP_KEYS = set(DEFAULTS)
SWEEP_PRESETS = ("r1", "r123+lm")
SWEEP_AXES = {"labeled": "labeled", "unlabeled": ("unlabeled_src", "unlabeled_tgt")}
SWEEP_COLUMNS = ("preset", "axis", "scale", "seed", "best_step", "steps", "dev_ce", "dev_ppl",
                 "dev_bleu", "test_ce", "test_ppl", "test_bleu", "test_acc")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_overrides(pairs):
    """``["train.max_steps=10", "preset=r1"]`` -> nested dict."""
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"--set {key}: cannot parse {raw!r}: {exc}") from exc
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def load_config(path=None, overrides=None):
    """Resolve a full run configuration (see the module docstring)."""
    user = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                user = yaml.safe_load(f) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = _merge(_merge(DEFAULTS, user), parse_overrides(overrides))
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "synthetic" in user.get("data", {}) and "parallel" in cfg["data"]:
        raise ConfigError("data: give either synthetic or parallel, not both")
    if "parallel" in cfg["data"]:
        cfg["data"].pop("synthetic", None)
    if cfg["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {cfg['preset']!r}; choose from {sorted(PRESETS)}")
    train_cfg(cfg)  # validates the train section
    model_keys = {f.name for f in fields(ModelConfig)} - {"src_vocab_size", "tgt_vocab_size", "dropout"}
    bad = set(cfg["model"]) - model_keys
    if bad:
        raise ConfigError(f"unknown model keys: {sorted(bad)}")
    if train_cfg(cfg).uses_rl() and not cfg["lm"]:
        raise ConfigError(f"preset {cfg['preset']!r} uses the LM reward but no lm is configured "
                          "(set lm: auto or lm: <path>)")
    return cfg


def train_cfg(cfg):
    section = dict(cfg["train"])
    allowed = {f.name for f in fields(TrainConfig)}
    bad = set(section) - allowed
    if bad:
        raise ConfigError(f"unknown train keys: {sorted(bad)}")
    section.setdefault("seed", cfg["seed"])
    try:
        return preset_config(cfg["preset"], **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train section: {exc}") from exc


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def versions():
    out = {"semiseq": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "pyyaml": yaml.__version__, "kernels": _kernels.backend()}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:
        pass
    return out


# ---------------------------------------------------------------------------
# data assembly
# ---------------------------------------------------------------------------

def _synth_spec(section, size=None):
    try:
        spec = SynthTaskSpec(**{**section, **({"size": size} if size is not None else {})})
    except TypeError as exc:
        raise ConfigError(f"synthetic spec: {exc}") from exc
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"synthetic spec: {exc}") from exc
    return spec


def build_split(cfg):
    d = cfg["data"]
    sp = dict(d["split"])
    split_seed = sp.pop("seed", cfg["seed"])
    need = ["labeled", "unlabeled_src", "unlabeled_tgt", "dev", "test"]
    missing = [k for k in need if k not in sp]
    if missing or set(sp) - set(need):
        raise ConfigError(f"data.split needs exactly {need} (+ optional seed), got {sorted(sp)}")
    if "parallel" in d:
        corpus = load_parallel(d["parallel"]["src"], d["parallel"]["tgt"])
    else:
        total = sum(sp[k] for k in need)
        spec = _synth_spec(d.get("synthetic") or {}, size=d.get("synthetic", {}).get("size", total))
        corpus = generate_synthetic(spec)
    return make_split(corpus, sp["labeled"], sp["unlabeled_src"], sp["unlabeled_tgt"],
                      sp["dev"], sp["test"], split_seed)


def prepare_run(cfg):
    split = build_split(cfg)
    prep = prepare(split, cfg["data"].get("min_count", 1))
    lm_src = cfg["lm"]
    if lm_src and lm_src != "auto":
        lm = load_lm(lm_src, stoi=prep.tgt_vocab.stoi, unk=3)
        prep = Prepared(prep.data, prep.src_vocab, prep.tgt_vocab, lm)
    return prep


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    section = {}
    if args.spec:
        with open(args.spec, encoding="utf-8") as f:
            section = yaml.safe_load(f) or {}
    split = section.pop("split", None)
    if args.size is not None:
        section["size"] = args.size
    if args.seed is not None:
        section["seed"] = args.seed
    spec = _synth_spec(section)
    corpus = generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    write_parallel(corpus, os.path.join(args.out, "corpus.src"), os.path.join(args.out, "corpus.tgt"))
    manifest = {"spec": spec.to_dict(), "examples": len(corpus)}
    if split:
        s = make_split(corpus, split.get("labeled", 0), split.get("unlabeled_src", 0),
                       split.get("unlabeled_tgt", 0), split.get("dev", 0), split.get("test", 0),
                       split.get("seed", spec.seed))
        for name in ("labeled", "dev", "test"):
            write_parallel(getattr(s, name), os.path.join(args.out, f"{name}.src"),
                           os.path.join(args.out, f"{name}.tgt"))
        write_text(s.unlabeled_src, os.path.join(args.out, "unlabeled.src"))
        write_text(s.unlabeled_tgt, os.path.join(args.out, "unlabeled.tgt"))
        manifest["split"] = {"seed": s.seed, "sizes": s.sizes(), "indices": s.indices}
    write_json(os.path.join(args.out, "manifest.json"), manifest)
    print(f"wrote {len(corpus)} examples to {args.out}")


def cmd_lm_train(args):
    corpus = []
    for path in args.corpus:
        corpus += load_text(path)
    corpus = [s for s in corpus if s]
    if not corpus:
        raise DataError("language-model corpus is empty")
    vocab = build_vocab(corpus)
    lm = train_lm([vocab.encode(s) for s in corpus], vocab_size=len(vocab))
    save_lm(lm, args.out, itos=vocab.itos)
    print(f"trigram LM over {len(corpus)} sentences, V={len(vocab)} -> {args.out}")


def _train_one(cfg, out_dir, quiet=False):
    """Train one configuration and write its artefacts; returns the report."""
    tcfg = train_cfg(cfg)
    prep = prepare_run(cfg)
    outcome = run(prep, tcfg, **cfg["model"])
    res = outcome.result
    os.makedirs(out_dir, exist_ok=True)
    chash = config_hash(cfg)
    outcome.model.save(os.path.join(out_dir, "checkpoint.npz"), {
        "src_vocab": prep.src_vocab.itos, "tgt_vocab": prep.tgt_vocab.itos,
        "src_vocab_digest": prep.src_vocab.digest(), "tgt_vocab_digest": prep.tgt_vocab.digest(),
        "config_hash": chash, "seed": tcfg.seed, "best_step": res.best_step,
    })
    write_csv(os.path.join(out_dir, "metrics.csv"), METRIC_COLUMNS, res.log)
    write_csv(os.path.join(out_dir, "timing.csv"), ("step", "wall_ms"),
              [{"step": s, "wall_ms": ms} for s, ms in res.timings])
    best = next((r for r in res.log if r["step"] == res.best_step), {})
    report = {
        "config_hash": chash, "preset": cfg["preset"], "seed": tcfg.seed,
        "best_step": res.best_step, "steps": res.steps, "stopped_early": res.stopped_early,
        "route_counts": res.route_counts,
        "dev": {k: best.get(f"dev_{k}") for k in ("ce", "ppl", "bleu", "acc")},
        "test": outcome.test,
        "vocab": {"src": len(prep.src_vocab), "tgt": len(prep.tgt_vocab)},
    }
    write_json(os.path.join(out_dir, "report.json"), report)
    write_json(os.path.join(out_dir, "manifest.json"), {
        "config": cfg, "config_hash": chash, "train_config": tcfg.to_dict(), "seed": tcfg.seed,
        "versions": versions(), "argv": sys.argv[1:],
    })
    if not quiet:
        log.info("best step %d: test BLEU %.2f PPL %.3f", res.best_step,
                 outcome.test["bleu"], outcome.test["ppl"])
    return report


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    report = _train_one(cfg, args.out)
    print(json.dumps({"best_step": report["best_step"], "test": report["test"]}, sort_keys=True))


def _load_checkpoint(path):
    model, info = Seq2SeqModel.load(path)
    for key in ("src_vocab", "tgt_vocab"):
        if key not in info:
            raise DataError(f"{path}: checkpoint has no {key}")
    return model, info


def cmd_generate(args):
    from .data import Vocab, SPECIALS
    model, info = _load_checkpoint(args.checkpoint)
    src_vocab = Vocab(info["src_vocab"][len(SPECIALS):])
    tgt_vocab = Vocab(info["tgt_vocab"][len(SPECIALS):])
    sources = load_text(args.input)
    if any(len(s) == 0 for s in sources):
        raise DataError(f"{args.input}: empty source line")
    hyps = greedy_decode(model, [src_vocab.encode(s) for s in sources], args.max_len) if sources else []
    write_text([tgt_vocab.decode(h) for h in hyps], args.out)
    print(f"wrote {len(hyps)} hypotheses to {args.out}")


def cmd_evaluate(args):
    hyps, refs = load_text(args.hyp), load_text(args.ref)
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not refs:
        raise DataError("no references")
    out = {"n": len(refs), "bleu": bleu(hyps, refs), "acc": token_accuracy(hyps, refs)}
    if args.checkpoint:
        if not args.src:
            raise ConfigError("--checkpoint needs --src to score perplexity")
        from .data import Vocab, SPECIALS
        model, info = _load_checkpoint(args.checkpoint)
        sv = Vocab(info["src_vocab"][len(SPECIALS):])
        tv = Vocab(info["tgt_vocab"][len(SPECIALS):])
        pairs = [(sv.encode(s), tv.encode(r)) for s, r in zip(load_text(args.src), refs)]
        out["ppl"] = perplexity(model, pairs)
    print(json.dumps(out, sort_keys=True))


def cmd_corrupt(args):
    try:
        cfg = NoiseConfig(args.p_delete, args.p_duplicate, args.p_swap, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rng = np.random.default_rng(args.seed)
    sents = load_text(args.input)
    out = [corrupt(s, cfg, rng) if s else [] for s in sents]
    if args.out:
        write_text(out, args.out)
    else:
        for s in out:
            print(" ".join(s))


def _sweep_point(job):
    cfg, out_dir, preset, axis, scale, seed = job
    logging.getLogger("semiseq.training").setLevel(logging.WARNING)
    report = _train_one(cfg, out_dir, quiet=True)
    row = {"preset": preset, "axis": axis, "scale": scale, "seed": seed,
           "best_step": report["best_step"], "steps": report["steps"]}
    row.update({f"dev_{k}": report["dev"][k] for k in ("ce", "ppl", "bleu")})
    row.update({f"test_{k}": report["test"][k] for k in ("ce", "ppl", "bleu", "acc")})
    return row


def sweep_jobs(base, axis, values, seeds, out):
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {sorted(SWEEP_AXES)}")
    keys = SWEEP_AXES[axis]
    keys = (keys,) if isinstance(keys, str) else keys
    jobs = []
    for preset in SWEEP_PRESETS:
        for scale in values:
            for seed in seeds:
                cfg = copy.deepcopy(base)
                cfg["preset"], cfg["seed"] = preset, seed
                cfg["train"].pop("seed", None)
                for k in keys:
                    cfg["data"]["split"][k] = scale
                if train_cfg(cfg).uses_rl() and not cfg["lm"]:
                    cfg["lm"] = "auto"
                name = f"{preset}_{axis}{scale}_seed{seed}"
                jobs.append((cfg, os.path.join(out, "runs", name), preset, axis, scale, seed))
    return jobs


def plot_sweep(csv_path, out_dir):
    """Mean-over-seeds line plots of test BLEU and dev PPL; byte-stable SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path, encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise DataError(f"{csv_path}: no rows")
    axis = rows[0]["axis"]
    matplotlib.rcParams["svg.hashsalt"] = "semiseq"
    paths = []
    for metric, label in (("test_bleu", "test BLEU"), ("dev_ppl", "dev PPL")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for preset in sorted({r["preset"] for r in rows}):
            scales = sorted({int(r["scale"]) for r in rows if r["preset"] == preset})
            means = [np.mean([float(r[metric]) for r in rows
                              if r["preset"] == preset and int(r["scale"]) == s]) for s in scales]
            ax.plot(scales, means, marker="o", label=preset)
        ax.set_xlabel(f"{axis} examples")
        ax.set_ylabel(label)
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, f"{metric}_vs_{axis}.svg")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths


def cmd_sweep(args):
    csv_path = os.path.join(args.out, "sweep.csv")
    if args.replot:
        for p in plot_sweep(csv_path, args.out):
            print(p)
        return
    if not args.values:
        raise ConfigError("--values is required unless --replot is given")
    # the sweep sets the preset of every run itself (and lm: auto where needed)
    base = load_config(args.config, list(args.set or []) + ["preset=r1"])
    jobs = sweep_jobs(base, args.axis, args.values, args.seeds, args.out)
    os.makedirs(args.out, exist_ok=True)
    log.info("sweep: %d runs", len(jobs))
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    rows.sort(key=lambda r: (r["preset"], r["scale"], r["seed"]))
    write_csv(csv_path, SWEEP_COLUMNS, rows)
    for p in plot_sweep(csv_path, args.out):
        print(p)
    print(csv_path)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="semiseq", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic parallel corpus")
    g.add_argument("--spec", help="YAML with SynthTaskSpec fields and an optional split section")
    g.add_argument("--size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    l = sub.add_parser("lm-train", help="train the trigram LM on target-side text")
    l.add_argument("corpus", nargs="+", help="target-side text files")
    l.add_argument("--out", required=True, help="LM file to write")
    l.set_defaults(func=cmd_lm_train)

    t = sub.add_parser("train", help="train a preset")
    t.add_argument("--config", help="YAML config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    gen = sub.add_parser("generate", help="greedy-decode a source file")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--input", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--max-len", type=int, default=40)
    gen.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="BLEU/accuracy (and PPL with a checkpoint) as JSON")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--src", help="source file aligned with --ref, for perplexity")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("corrupt", help="apply the DAE noise to a text file")
    c.add_argument("--input", required=True)
    c.add_argument("--out")
    c.add_argument("--p-delete", type=float, default=0.1)
    c.add_argument("--p-duplicate", type=float, default=0.1)
    c.add_argument("--p-swap", type=float, default=0.1)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("sweep", help="r1 vs r123+lm across data scales")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--axis", choices=sorted(SWEEP_AXES), default="labeled")
    s.add_argument("--values", type=int, nargs="+")
    s.add_argument("--seeds", type=int, nargs="+", default=[0])
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--replot", action="store_true", help="only redraw SVGs from sweep.csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, UnicodeDecodeError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to an exit code
        log.exception("runtime failure: %s", exc)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
