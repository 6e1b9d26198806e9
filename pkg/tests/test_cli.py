import csv
import io
import json

import pytest

from smar.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_USAGE, RunConfig, UsageError, build_parser, main
from smar.retrieval import METRICS_HEADER

TINY = ["--model-dim", "8", "--heads", "2", "--batch-size", "8"]


def gen(out, *extra):
    return main(["gen-data", "--items", "60", "--queries", "10", "--train-queries", "40",
                 "--synthetic-factor", "0.5", "--seed", "3", "--out", str(out), *extra])


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert gen(d) == 0
    return d


@pytest.fixture(scope="module")
def trained(corpus_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["pretrain", "--corpus", str(corpus_dir), "--out", str(d), "--epochs", "1", *TINY]) == 0
    assert main(["finetune", "--corpus", str(corpus_dir), "--ckpt", str(d / "pretrained.ckpt"), "--out", str(d),
                 "--finetune-epochs", "1", *TINY]) == 0
    return d


def test_gen_data_files_summary_and_determinism(tmp_path, capsys):
    assert gen(tmp_path / "a") == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["items"] == 60 and summary["eval_queries"] == 10 and not summary["control"]
    assert gen(tmp_path / "b") == 0
    for name in ("items.jsonl", "queries.jsonl", "pairs.jsonl", "qrels.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_data_control_flag(tmp_path, capsys):
    assert gen(tmp_path, "--color-fraction", "0") == 0
    assert json.loads(capsys.readouterr().out)["control"] is True


def test_existing_output_needs_force(tmp_path, capsys):
    assert gen(tmp_path) == 0
    assert gen(tmp_path) == EXIT_USAGE
    assert "--force" in capsys.readouterr().err
    assert gen(tmp_path, "--force") == 0


def test_pretrain_finetune_eval(trained, corpus_dir, tmp_path, capsys):
    assert (trained / "pretrained.ckpt").exists() and (trained / "finetuned.ckpt").exists()
    logs = (trained / "finetune_log.jsonl").read_text().splitlines()
    assert logs and "L_total" in json.loads(logs[0])
    capsys.readouterr()
    assert main(["eval", "--corpus", str(corpus_dir), "--ckpt", str(trained), "--k", "1,5",
                 "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    rows = list(csv.DictReader(io.StringIO(printed)))
    assert list(rows[0]) == METRICS_HEADER
    assert {r["split"] for r in rows} == {"overall", "fashion", "not-fashion"}
    assert len(rows) == 6
    assert (tmp_path / "metrics.csv").read_text() == printed
    assert len((tmp_path / "run.jsonl").read_text().splitlines()) == 10


def test_pretrain_is_idempotent_with_force(corpus_dir, tmp_path):
    args = ["pretrain", "--corpus", str(corpus_dir), "--out", str(tmp_path), "--epochs", "1", *TINY]
    assert main(args) == 0
    first = (tmp_path / "pretrained.ckpt").read_bytes()
    assert main(args) == EXIT_USAGE
    assert main(args + ["--force"]) == 0
    assert (tmp_path / "pretrained.ckpt").read_bytes() == first


def test_config_file_with_flag_override(corpus_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"corpus": str(corpus_dir), "epochs": 1, "model_dim": 8, "heads": 2,
                               "batch_size": 8, "alpha": 5.0}))
    args = build_parser().parse_args(["pretrain", "--config", str(cfg), "--alpha", "1", "--gamma", "2"])
    from smar.cli import load_run_config

    rc = load_run_config(args)
    assert rc.alpha == 1.0 and rc.gamma == 2.0 and rc.epochs == 1
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0


def test_config_errors_are_enumerated(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"alpha": -1, "threshold": 2.0, "corpus": str(tmp_path / "nope")}))
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "alpha" in err and "threshold" in err and "corpus" in err
    bad.write_text(json.dumps({"colour": 1}))
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_zero_weights_rejected():
    with pytest.raises(UsageError, match="positive"):
        RunConfig(alpha=0, beta=0, gamma=0).validate()


def test_unknown_flag_and_missing_command():
    assert _exit_code(["pretrain", "--bogus"]) == EXIT_USAGE
    assert _exit_code([]) == EXIT_USAGE


def _exit_code(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


@pytest.mark.parametrize("cmd", ["gen-data", "pretrain", "finetune", "eval", "ablate", "sweep"])
def test_help_documents_every_flag(cmd, capsys):
    assert _exit_code([cmd, "--help"]) == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text
        if action.option_strings and action.dest != "help":
            assert action.help


def test_corrupt_checkpoint_is_data_error(corpus_dir, tmp_path, capsys):
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    assert main(["eval", "--corpus", str(corpus_dir), "--ckpt", str(tmp_path / "x.ckpt")]) == EXIT_DATA
    assert capsys.readouterr().err.count("\n") == 1


def test_divergence_exit_code_and_last_good(corpus_dir, tmp_path, monkeypatch):
    from smar import cli
    from smar.training import TrainConfig

    real = TrainConfig.desk
    monkeypatch.setattr(cli.TrainConfig, "desk", staticmethod(lambda **kw: real(**{**kw, "max_loss": 1e-3})))
    code = main(["pretrain", "--corpus", str(corpus_dir), "--out", str(tmp_path), "--epochs", "1", *TINY])
    assert code == EXIT_DIVERGED
    assert (tmp_path / "last_good.ckpt").exists()


def test_sweep_and_ablate_shapes(corpus_dir, tmp_path, capsys):
    common = ["--corpus", str(corpus_dir), "--epochs", "1", "--finetune-epochs", "1", "--k", "1,5", *TINY]
    assert main(["sweep", "--param", "gamma", "--values", "0.1,1", "--seeds", "1,2",
                 "--out", str(tmp_path / "s"), *common]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "s" / "sweep.csv").read_text())))
    assert len(rows) == 2 * 2 * 3
    assert {"param", "value", "seed", "split", "R@5", "P@5", "F1@5"} <= set(rows[0])
    assert main(["ablate", "--variants", "smar,dpsr", "--seeds", "0", "--out", str(tmp_path / "a"), *common]) == 0
    table = list(csv.DictReader(io.StringIO((tmp_path / "a" / "ablation.csv").read_text())))
    assert [r["variant"] for r in table] == ["smar", "dpsr"]
    long = list(csv.DictReader(io.StringIO((tmp_path / "a" / "metrics.csv").read_text())))
    assert len(long) == 2 * 3 * 2
