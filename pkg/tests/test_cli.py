"""Command-line interface: exit codes, config handling, and a miniature
end-to-end workflow through every command."""

import json
import os

import pytest

from entlink.cli import dispatch, parse_config_file, resolve_threads


class TestExitCodes:
    def test_unknown_command(self, capsys):
        assert dispatch(["frobnicate"]) == 1
        assert "unknown command" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert dispatch(["gen-corpus", "--out", "x", "--bogus", "1"]) == 1
        err = capsys.readouterr().err
        assert "usage" in err.lower()

    def test_missing_required_flag_named(self, capsys):
        assert dispatch(["train-retriever", "--docs", "d.jsonl", "--out", "o"]) == 1
        assert "--kb" in capsys.readouterr().err

    def test_missing_file_is_validation_error(self, tmp_path):
        assert (
            dispatch(
                [
                    "build-index",
                    "--ckpt",
                    str(tmp_path / "none.ckpt"),
                    "--kb",
                    str(tmp_path / "none.jsonl"),
                    "--out",
                    str(tmp_path / "o.idx"),
                ]
            )
            == 1
        )

    def test_help_exits_zero(self, capsys):
        assert dispatch([]) == 0
        assert "commands:" in capsys.readouterr().out


class TestConfigFile:
    def test_parse(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nn-entities = 40\nvocab_size=600  # inline\n\n")
        assert parse_config_file(str(path)) == {"n-entities": "40", "vocab-size": "600"}

    def test_bad_line_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("this is not a pair\n")
        with pytest.raises(Exception):
            parse_config_file(str(path))

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("not-a-real-key = 1\n")
        code = dispatch(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "c")])
        assert code == 1
        assert "not-a-real-key" in capsys.readouterr().err

    def test_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "n-entities = 25\nvocab-size = 500\nn-docs = 4\nmentions-per-doc = 2\n"
            "doc-len-min = 20\ndoc-len-max = 28\nn-categories = 3\n"
        )
        out = tmp_path / "corpus"
        assert dispatch(["gen-corpus", "--config", str(cfg), "--out", str(out), "--n-docs", "6"]) == 0
        manifest = (out / "manifest.txt").read_text()
        assert "n-docs = 6" in manifest  # flag wins
        assert "n-entities = 25" in manifest  # config applies
        n_lines = len((out / "docs.train.jsonl").read_text().splitlines())
        assert n_lines == 6


class TestThreads:
    def test_env_fallback(self, monkeypatch):
        monkeypatch.setenv("ENTQA_THREADS", "3")
        assert resolve_threads({}) == 3

    def test_flag_beats_env(self, monkeypatch):
        monkeypatch.setenv("ENTQA_THREADS", "3")
        assert resolve_threads({"threads": 2}) == 2

    def test_bad_env_rejected(self, monkeypatch):
        monkeypatch.setenv("ENTQA_THREADS", "lots")
        with pytest.raises(Exception):
            resolve_threads({})


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Run the whole CLI workflow once on a miniature corpus."""
    root = tmp_path_factory.mktemp("cliws")
    corpus = root / "corpus"
    assert (
        dispatch(
            [
                "gen-corpus",
                "--out", str(corpus),
                "--n-entities", "30",
                "--vocab-size", "600",
                "--n-docs", "10",
                "--mentions-per-doc", "4",
                "--doc-len-min", "18",
                "--doc-len-max", "26",
                "--n-categories", "3",
                "--seed", "5",
            ]
        )
        == 0
    )
    kb = str(corpus / "kb.jsonl")
    docs = str(corpus / "docs.train.jsonl")
    val = str(corpus / "docs.val.jsonl")
    retr = str(root / "retr.ckpt")
    assert (
        dispatch(
            [
                "train-retriever",
                "--kb", kb, "--docs", docs, "--out", retr,
                "--d", "16", "--window-length", "12", "--stride", "6",
                "--epochs", "1", "--n-neg", "8", "--eval-k", "8",
                "--batch-size", "2", "--seed", "5",
            ]
        )
        == 0
    )
    index = str(root / "entities.idx")
    assert dispatch(["build-index", "--ckpt", retr, "--kb", kb, "--out", index]) == 0
    reader_ckpt = str(root / "reader.ckpt")
    assert (
        dispatch(
            [
                "train-reader",
                "--ckpt-retriever", retr, "--index", index,
                "--kb", kb, "--docs", docs, "--out", reader_ckpt,
                "--epochs", "1", "--k-train", "6", "--batch-size", "2", "--seed", "5",
            ]
        )
        == 0
    )
    return {
        "root": root,
        "kb": kb,
        "docs": docs,
        "val": val,
        "retr": retr,
        "index": index,
        "reader": reader_ckpt,
    }


class TestWorkflow:
    def test_link_defaults_and_eval(self, workspace, capsys):
        pred = str(workspace["root"] / "pred.jsonl")
        code = dispatch(
            [
                "link",
                "--ckpt-retriever", workspace["retr"],
                "--ckpt-reader", workspace["reader"],
                "--index", workspace["index"],
                "--kb", workspace["kb"],
                "--docs", workspace["val"],
                "--out", pred,
            ]
        )
        assert code == 0
        manifest = open(pred + ".manifest").read()
        # paper-anchored defaults echoed
        assert "k = 100" in manifest
        assert "p = 3" in manifest
        assert "gamma = 0.05" in manifest
        assert os.path.exists(pred)

        capsys.readouterr()
        assert dispatch(["eval", "--pred", pred, "--docs", workspace["val"]]) == 0
        out = capsys.readouterr().out
        assert "micro_f1[full]" in out

    def test_eval_md_only_and_ed_level(self, workspace, capsys, tmp_path):
        pred = str(workspace["root"] / "pred.jsonl")
        report = str(tmp_path / "report.jsonl")
        code = dispatch(
            [
                "eval",
                "--pred", pred,
                "--docs", workspace["val"],
                "--md-only", "true",
                "--ed-level", "passage",
                "--window-length", "12",
                "--stride", "6",
                "--report", report,
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "micro_f1[md_only]" in out
        assert "ed_f1[passage]" in out
        records = [json.loads(l) for l in open(report)]
        assert len(records) == 2

    def test_eval_perfect_predictions(self, workspace, capsys, tmp_path):
        """Evaluating the gold annotations as predictions gives F1 = 1."""
        from entlink import kbstore

        docs = kbstore.load_documents(workspace["val"], kb=None)
        pred_path = str(tmp_path / "gold_as_pred.jsonl")
        items = []
        for d in docs:
            mentions = [
                kbstore.LabeledMention(m.doc_start, m.doc_end, m.entity_id, 1.0)
                for m in kbstore.gold_token_mentions(d)
            ]
            items.append((d.id, mentions))
        kbstore.write_predictions(pred_path, items)
        assert dispatch(["eval", "--pred", pred_path, "--docs", workspace["val"], "--md-only", "true"]) == 0
        out = capsys.readouterr().out
        assert "1.0000" in out

    def test_sweep_threshold(self, workspace, capsys):
        curve = str(workspace["root"] / "curve.jsonl")
        code = dispatch(
            [
                "sweep-threshold",
                "--ckpt-retriever", workspace["retr"],
                "--ckpt-reader", workspace["reader"],
                "--index", workspace["index"],
                "--kb", workspace["kb"],
                "--docs", workspace["val"],
                "--out", curve,
                "--k", "8",
            ]
        )
        out = capsys.readouterr().out
        if code == 0:
            records = [json.loads(l) for l in open(curve)]
            assert all("gamma" in r and "f1" in r for r in records)
            assert "best gamma" in out
        else:
            # a tiny untrained model may emit no candidate mentions at all
            assert code == 1

    def test_gradcheck_command(self, capsys):
        assert dispatch(["gradcheck", "--d", "8", "--vocab-size", "50"]) == 0
        out = capsys.readouterr().out
        assert "retriever-nce-multilabel" in out
        assert "PASS" in out

    def test_stale_index_rejected(self, workspace, tmp_path, capsys):
        """Linking with an index built from different parameters fails."""
        other = str(tmp_path / "other.ckpt")
        assert (
            dispatch(
                [
                    "train-retriever",
                    "--kb", workspace["kb"], "--docs", workspace["docs"], "--out", other,
                    "--d", "16", "--window-length", "12", "--stride", "6",
                    "--epochs", "1", "--n-neg", "4", "--eval-k", "4",
                    "--batch-size", "2", "--seed", "99",
                ]
            )
            == 0
        )
        code = dispatch(
            [
                "link",
                "--ckpt-retriever", other,
                "--ckpt-reader", workspace["reader"],
                "--index", workspace["index"],
                "--kb", workspace["kb"],
                "--docs", workspace["val"],
                "--out", str(tmp_path / "p.jsonl"),
            ]
        )
        assert code == 1
        assert "fingerprint" in capsys.readouterr().err
