import json
import os

import pytest
import yaml

from semiseq.cli import load_config, main, ConfigError
from semiseq.data import load_text
from semiseq.lm import load_lm


def _write_yaml(path, obj):
    with open(path, "w") as f:
        yaml.safe_dump(obj, f)
    return str(path)


@pytest.fixture
def small_cfg(tmp_path):
    def make(**over):
        cfg = {
            "preset": "r1", "seed": 1,
            "data": {"synthetic": {"max_triples": 2},
                     "split": {"labeled": 40, "unlabeled_src": 20, "unlabeled_tgt": 20,
                               "dev": 10, "test": 10}},
            "model": {"embed_dim": 8, "hidden_dim": 8},
            "train": {"max_steps": 12, "eval_every": 6},
        }
        cfg.update(over)
        return _write_yaml(tmp_path / "cfg.yaml", cfg)
    return make


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--size", "25", "--seed", "4", "--out", str(tmp_path / name)]) == 0
    for fn in ("corpus.src", "corpus.tgt"):
        with open(tmp_path / "a" / fn) as fa, open(tmp_path / "b" / fn) as fb:
            assert fa.read() == fb.read()
    assert len(load_text(str(tmp_path / "a" / "corpus.src"))) == 25


def test_gen_data_size_zero_is_config_error(tmp_path):
    assert main(["gen-data", "--size", "0", "--out", str(tmp_path / "g")]) == 2


def test_gen_data_with_split_writes_all_files(tmp_path):
    spec = _write_yaml(tmp_path / "spec.yaml", {
        "size": 60, "split": {"labeled": 20, "unlabeled_src": 10, "unlabeled_tgt": 10,
                              "dev": 10, "test": 10}})
    out = tmp_path / "d"
    assert main(["gen-data", "--spec", spec, "--out", str(out)]) == 0
    for stem, n in (("labeled", 20), ("dev", 10), ("test", 10)):
        assert len(load_text(str(out / f"{stem}.src"))) == n
        assert len(load_text(str(out / f"{stem}.tgt"))) == n
    assert os.path.exists(out / "manifest.json")


def test_lm_train_counts_and_reproducible(tmp_path):
    corpus = tmp_path / "c.txt"
    corpus.write_text("a b c\na b\nb c a\n")
    assert main(["lm-train", str(corpus), "--out", str(tmp_path / "a.lm")]) == 0
    assert main(["lm-train", str(corpus), "--out", str(tmp_path / "b.lm")]) == 0
    assert (tmp_path / "a.lm").read_bytes() == (tmp_path / "b.lm").read_bytes()
    lm = load_lm(str(tmp_path / "a.lm"), stoi={"<s>": 1, "</s>": 2, "a": 10, "b": 11, "c": 12})
    # 3 sentences of 3+2+3 words, each padded with two BOS and one EOS
    assert lm.total == 8 + 3 * 3
    assert lm.unigrams[11] == 3
    assert lm.bigrams[(10, 11)] == 2
    assert lm.trigrams[(1, 1, 10)] == 2


def test_lm_train_empty_corpus_is_data_error(tmp_path):
    corpus = tmp_path / "empty.txt"
    corpus.write_text("")
    assert main(["lm-train", str(corpus), "--out", str(tmp_path / "e.lm")]) == 3


def test_missing_file_is_data_error(tmp_path):
    assert main(["generate", "--checkpoint", str(tmp_path / "none.npz"),
                 "--input", str(tmp_path / "none.src"), "--out", str(tmp_path / "h")]) == 3


def test_rl_preset_without_lm_is_config_error(small_cfg, tmp_path):
    cfg = small_cfg(preset="r123+lm")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 2
    with pytest.raises(ConfigError):
        load_config(cfg, [])


def test_unknown_keys_and_bad_overrides_are_config_errors(small_cfg, tmp_path):
    cfg = small_cfg()
    assert main(["train", "--config", cfg, "--set", "bogus=1", "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--config", cfg, "--set", "train.nope=1", "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--config", cfg, "--set", "preset=r9", "--out", str(tmp_path / "r")]) == 2


def test_override_precedence(small_cfg):
    cfg = load_config(small_cfg(), ["train.max_steps=3", "seed=9"])
    assert cfg["train"]["max_steps"] == 3
    assert cfg["train"]["eval_every"] == 6
    assert cfg["seed"] == 9
    # keys missing from the file keep their built-in defaults
    cfg = load_config(small_cfg(preset="r12+lm", lm="auto"), [])
    assert cfg["preset"] == "r12+lm" and cfg["lm"] == "auto"


def test_train_writes_artefacts_and_is_bitwise_reproducible(small_cfg, tmp_path):
    cfg = small_cfg(preset="r123+lm", lm="auto")
    for name in ("r1", "r2"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    for fn in ("checkpoint.npz", "metrics.csv", "timing.csv", "report.json", "manifest.json"):
        assert os.path.exists(tmp_path / "r1" / fn)
    assert (tmp_path / "r1" / "metrics.csv").read_bytes() == (tmp_path / "r2" / "metrics.csv").read_bytes()
    header = (tmp_path / "r1" / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("step,route1,route2,route3")
    manifest = json.loads((tmp_path / "r1" / "manifest.json").read_text())
    assert "config_hash" in manifest and "versions" in manifest


def test_generate_evaluate_roundtrip(tmp_path, capsys):
    data = tmp_path / "d"
    spec = _write_yaml(tmp_path / "spec.yaml", {
        "size": 60, "max_triples": 2,
        "split": {"labeled": 30, "unlabeled_src": 0, "unlabeled_tgt": 0, "dev": 10, "test": 20}})
    assert main(["gen-data", "--spec", spec, "--out", str(data)]) == 0
    cfg = _write_yaml(tmp_path / "cfg.yaml", {
        "preset": "r1",
        "data": {"parallel": {"src": str(data / "corpus.src"), "tgt": str(data / "corpus.tgt")},
                 "split": {"labeled": 30, "unlabeled_src": 0, "unlabeled_tgt": 0,
                           "dev": 10, "test": 20}},
        "model": {"embed_dim": 8, "hidden_dim": 8},
        "train": {"max_steps": 6, "eval_every": 3}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
    ckpt = str(tmp_path / "run" / "checkpoint.npz")
    for name in ("h1", "h2"):
        assert main(["generate", "--checkpoint", ckpt, "--input", str(data / "test.src"),
                     "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "h1").read_text() == (tmp_path / "h2").read_text()
    assert len(load_text(str(tmp_path / "h1"))) == 20
    capsys.readouterr()
    assert main(["evaluate", "--hyp", str(data / "test.tgt"), "--ref", str(data / "test.tgt")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["bleu"] == 100.0 and report["acc"] == 1.0


def test_corrupt_with_zero_rates_is_identity(tmp_path, capsys):
    src = tmp_path / "t.txt"
    src.write_text("a b c d\ne f\n")
    assert main(["corrupt", "--input", str(src), "--p-delete", "0", "--p-duplicate", "0",
                 "--p-swap", "0"]) == 0
    assert capsys.readouterr().out == "a b c d\ne f\n"


def test_sweep_rows_and_replot_identical(small_cfg, tmp_path):
    cfg = small_cfg(train={"max_steps": 4, "eval_every": 2})
    out = tmp_path / "sw"
    assert main(["sweep", "--config", cfg, "--values", "10", "20", "--seeds", "0", "1",
                 "--out", str(out)]) == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2 * 2
    svgs = sorted(p for p in os.listdir(out) if p.endswith(".svg"))
    assert len(svgs) == 2
    before = {p: (out / p).read_bytes() for p in svgs}
    assert main(["sweep", "--out", str(out), "--replot"]) == 0
    assert {p: (out / p).read_bytes() for p in svgs} == before
