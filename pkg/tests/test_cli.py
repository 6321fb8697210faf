import subprocess
import sys

import pytest

from mmnmt.cli import ConfigError, main, parse_args, read_config, write_manifest

from conftest import write_corpus

SMALL = ["--embed", "6", "--hidden", "5", "--att", "4", "--batch-size", "4", "--eval-every", "5",
         "--beam", "2", "--max-len", "8"]


@pytest.fixture
def corpus(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    write_corpus(tmp_path, n=10, seed=1)
    write_corpus(tmp_path, n=4, seed=2, prefix="valid")
    return tmp_path


def _pre(extra=()):
    return main(["preprocess", "--train-src", "train.en", "--train-tgt", "train.de",
                 "--valid-src", "valid.en", "--valid-tgt", "valid.de", "--out-dir", "data", *extra])


def _train(mode="multimodal", extra=()):
    feats = ["--train-features", "train.feat", "--valid-features", "valid.feat"] if mode == "multimodal" else []
    return main(["train", "--data-dir", "data", "--out-dir", "run", "--mode", mode, *feats, *SMALL,
                 "--max-updates", "10", *extra])


class TestConfigFiles:
    def test_round_trip(self, tmp_path):
        write_manifest(tmp_path / "m", {"b": 2, "a": "x", "skip": None, "lst": ["p", "q"]})
        assert (tmp_path / "m").read_text() == "a=x\nb=2\nlst=p,q\n"
        assert read_config(tmp_path / "m") == {"a": "x", "b": "2", "lst": "p,q"}

    def test_dash_keys_and_comments(self, tmp_path):
        (tmp_path / "c").write_text("# comment\n\nmax-len = 7\n")
        assert read_config(tmp_path / "c") == {"max_len": "7"}

    def test_malformed(self, tmp_path):
        (tmp_path / "c").write_text("oops\n")
        with pytest.raises(ConfigError):
            read_config(tmp_path / "c")

    def test_config_supplies_required_options_and_flags_win(self, tmp_path):
        (tmp_path / "c").write_text("hyp=h.txt\nref=r1,r2\nsmooth=true\n")
        args = parse_args(["score", "--config", str(tmp_path / "c")])
        assert args.hyp == "h.txt" and args.ref == ["r1", "r2"] and args.smooth is True
        args = parse_args(["score", "--config", str(tmp_path / "c"), "--ref", "r3", "--hyp", "x"])
        assert args.ref == ["r3"] and args.hyp == "x"

    def test_config_values_are_typed(self, tmp_path):
        (tmp_path / "c").write_text("data_dir=d\nout_dir=o\nlr=0.01\nbatch_size=3\nsort_by_src_len=false\n")
        args = parse_args(["train", "--config", str(tmp_path / "c")])
        assert args.lr == 0.01 and args.batch_size == 3 and args.sort_by_src_len is False

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c").write_text("hyp=h\nref=r\nbogus=1\n")
        assert main(["score", "--config", str(tmp_path / "c")]) == 1


class TestPreprocess:
    def test_outputs_and_stats(self, corpus, capsys):
        assert _pre() == 0
        out = capsys.readouterr().out
        assert "train_pairs=10" in out and "valid_pairs=4" in out
        for name in ("src.vocab", "tgt.vocab", "train.src.ids", "train.tgt.ids", "train.kept",
                     "valid.src.ids", "valid.tgt.ids", "preprocess.manifest"):
            assert (corpus / "data" / name).is_file(), name
        ids = (corpus / "data" / "train.src.ids").read_text().splitlines()
        assert all(line.startswith("1 ") and line.endswith(" 2") for line in ids)

    def test_filter_counts(self, corpus, capsys):
        (corpus / "train.en").write_text("a b\na b c\n" + " ".join(["a"] * 10) + "\n")
        (corpus / "train.de").write_text("x y z\nx y z\nx y z\n")
        assert main(["preprocess", "--train-src", "train.en", "--train-tgt", "train.de",
                     "--out-dir", "data"]) == 0
        out = capsys.readouterr().out
        assert "kept=1" in out and "dropped_too_short=1" in out and "dropped_ratio=1" in out
        assert (corpus / "data" / "train.kept").read_text() == "1\n"

    def test_manifest_replays(self, corpus):
        assert _pre(["--src-cap", "5"]) == 0
        before = (corpus / "data" / "src.vocab").read_bytes()
        (corpus / "data" / "src.vocab").unlink()
        assert main(["preprocess", "--config", "data/preprocess.manifest"]) == 0
        assert (corpus / "data" / "src.vocab").read_bytes() == before
        assert len(before.splitlines()) == 5

    def test_missing_input(self, corpus):
        assert main(["preprocess", "--train-src", "nope", "--train-tgt", "train.de", "--out-dir", "d"]) == 1

    def test_misaligned_is_data_error(self, corpus):
        (corpus / "train.de").write_text("x y z\n")
        assert _pre() == 2

    def test_empty_corpus_leaves_no_outputs(self, corpus):
        (corpus / "train.en").write_text("")
        (corpus / "train.de").write_text("")
        assert main(["preprocess", "--train-src", "train.en", "--train-tgt", "train.de",
                     "--out-dir", "data"]) == 2
        assert not (corpus / "data").exists()

    def test_usage_error(self, corpus):
        with pytest.raises(SystemExit) as exc:
            main(["preprocess"])
        assert exc.value.code == 1


class TestTrainAndDecode:
    def test_multimodal_pipeline(self, corpus, capsys):
        assert _pre() == 0
        assert _train(extra=["--plot"]) == 0
        run = corpus / "run"
        for name in ("train.manifest", "train.log", "model.ckpt", "model.ckpt.last", "model.ckpt.last.optim",
                     "train.png"):
            assert (run / name).is_file(), name
        log = (run / "train.log").read_text().splitlines()
        assert [l.split()[0] for l in log] == ["update=0", "update=5", "update=10"]
        assert "updates=10" in capsys.readouterr().out
        manifest = read_config(run / "train.manifest")
        assert manifest["optimizer"] == "adam" and manifest["l2_lambda"] == "0.0001"

        assert main(["translate", "--checkpoint", "run/model.ckpt", "--data-dir", "data", "--input",
                     "valid.en", "--features", "valid.feat", "--beam", "3", "--output", "hyp.txt",
                     "--meta", "hyp.tsv"]) == 0
        hyps = (corpus / "hyp.txt").read_text().splitlines()
        assert len(hyps) == 4 and (corpus / "hyp.txt.manifest").is_file()
        assert len((corpus / "hyp.tsv").read_text().splitlines()) == 5

        assert main(["multisource", "--checkpoint", "run/model.ckpt", "--data-dir", "data",
                     "--input", "valid.en", "--input", "valid.en", "--features", "valid.feat",
                     "--greedy", "--output", "multi.txt"]) == 0
        assert len((corpus / "multi.txt").read_text().splitlines()) == 4

        assert main(["score", "--hyp", "hyp.txt", "--ref", "valid.de", "--output", "bleu.txt",
                     "--plot", "bleu.png"]) == 0
        report = (corpus / "bleu.txt").read_text()
        assert report.startswith("bleu1=") and "meteor=NA" in report
        assert (corpus / "bleu.png").stat().st_size > 0

    def test_beam_one_equals_greedy_flag(self, corpus):
        assert _pre() == 0 and _train() == 0
        common = ["translate", "--checkpoint", "run/model.ckpt", "--data-dir", "data", "--input",
                  "valid.en", "--features", "valid.feat"]
        assert main([*common, "--beam", "1", "--output", "b1.txt"]) == 0
        assert main([*common, "--greedy", "--output", "g.txt"]) == 0
        assert (corpus / "b1.txt").read_bytes() == (corpus / "g.txt").read_bytes()

    def test_generate_multisource_five_sources(self, corpus):
        assert _pre() == 0 and _train() == 0
        inputs = []
        for k in range(5):
            write_corpus(corpus, n=4, seed=10 + k, prefix=f"desc{k}")
            inputs += ["--input", f"desc{k}.en"]
        assert main(["generate-multisource", "--checkpoint", "run/model.ckpt", "--data-dir", "data",
                     *inputs, "--features", "valid.feat", "--beam", "2", "--output", "m.txt",
                     "--meta", "m.tsv"]) == 0
        assert len((corpus / "m.txt").read_text().splitlines()) == 4
        before = (corpus / "m.txt").read_bytes()
        (corpus / "m.txt").unlink()
        assert main(["generate-multisource", "--config", "m.txt.manifest"]) == 0
        assert (corpus / "m.txt").read_bytes() == before

    def test_monomodal_train_and_replay(self, corpus):
        assert _pre() == 0
        assert _train("monomodal") == 0
        manifest = read_config(corpus / "run" / "train.manifest")
        assert manifest["optimizer"] == "adadelta" and manifest["init"] == "gaussian"
        log = (corpus / "run" / "train.log").read_bytes()
        assert main(["train", "--config", "run/train.manifest"]) == 0
        assert (corpus / "run" / "train.log").read_bytes() == log

    def test_multimodal_without_features_fails_fast(self, corpus):
        assert _pre() == 0
        rc = main(["train", "--data-dir", "data", "--out-dir", "run", "--mode", "multimodal"])
        assert rc == 1 and not (corpus / "run").exists()

    def test_feature_count_mismatch(self, corpus):
        assert _pre() == 0
        write_corpus(corpus, n=3, seed=5, prefix="short")
        rc = main(["train", "--data-dir", "data", "--out-dir", "run", "--mode", "multimodal",
                   "--train-features", "short.feat", "--valid-features", "valid.feat", *SMALL])
        assert rc == 2

    def test_bad_config_value(self, corpus):
        assert _pre() == 0
        (corpus / "c").write_text("data_dir=data\nout_dir=run\noptimizer=sgd\n")
        assert main(["train", "--config", "c"]) == 1
        with pytest.raises(SystemExit) as exc:
            _train("monomodal", ["--optimizer", "sgd"])
        assert exc.value.code == 1

    def test_translate_multimodal_checkpoint_needs_features(self, corpus):
        assert _pre() == 0 and _train() == 0
        assert main(["translate", "--checkpoint", "run/model.ckpt", "--data-dir", "data",
                     "--input", "valid.en", "--output", "o.txt"]) == 1


def test_score_misaligned(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "h").write_text("a b\n")
    (tmp_path / "r").write_text("a b\nc\n")
    assert main(["score", "--hyp", "h", "--ref", "r"]) == 2


def test_score_prints_report(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "h").write_text("a b c d\n")
    (tmp_path / "r").write_text("a b c d\n")
    assert main(["score", "--hyp", "h", "--ref", "r"]) == 0
    assert capsys.readouterr().out.splitlines()[3] == "bleu4=100.00"
    assert not list(tmp_path.glob("*.manifest"))


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mmnmt", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "preprocess" in proc.stdout
