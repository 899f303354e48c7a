import json
from pathlib import Path

import pytest

from stitchdemo.cli import COMMANDS, build_parser, main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = run("synth", "--corpus-dir", root / "corpus", "--out-dir", root / "fx",
               "--videos", 24, "--train-queries", 10, "--test-queries", 4, "--seed", 2)
    assert code == 0
    return root


def files(path: Path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


SMALL_TRAIN = ["--epochs", 1, "--dim", 16, "--heads", 4, "--layers", 1, "--batch-size", 8]


def commands(root):
    c, fx = root / "corpus", root / "fx"
    q = fx / "queries"
    common = ["--corpus-dir", c, "--threads", 1]
    return {
        "ingest": ["ingest", *common],
        "localize": ["localize", *common],
        "map": ["map", *common, "--query", q / "test.jsonl"],
        "covers": ["covers", *common, "--query", q / "test.jsonl", "--top-k", 20],
        "gen-data": ["gen-data", *common, "--llm", "mock", "--pair-threshold", 0.5],
        "gen-negatives": ["gen-negatives", *common, "--samples", q / "train.jsonl", "--neg-kinds", "cor,con,osc"],
        "train": ["train", *common, "--train", q / "train.jsonl", q / "train_videos.jsonl", *SMALL_TRAIN],
        "stitch": ["stitch", *common, "--query", q / "test.jsonl", "--model", root / "out-train-0" / "model.json", "--top-k", 20],
        "eval": ["eval", *common, "--test", q / "test.jsonl", "--distractors", 49,
                 "--model", root / "out-train-0" / "model.json"],
        "capture-curve": ["capture-curve", *common, "--test", q / "test.jsonl", "--ks", "1,5,20", "--svg"],
        "synth": ["synth", "--corpus-dir", root / "corpus-again", "--videos", 12, "--train-queries", 2,
                  "--test-queries", 2, "--seed", 4],
    }


@pytest.fixture(scope="module")
def outputs(fixture_dir):
    cmds = commands(fixture_dir)
    order = ["train"] + [k for k in cmds if k != "train"]
    result = {}
    for rep in (0, 1):
        for name in order:
            out = fixture_dir / f"out-{name}-{rep}"
            assert run(*cmds[name], "--out-dir", out) == 0, name
            result[(name, rep)] = files(out)
    return result


def test_every_subcommand_is_covered():
    assert set(COMMANDS) == set(commands(Path("x")))


@pytest.mark.parametrize("name", sorted(COMMANDS))
def test_rerun_is_byte_identical(outputs, name):
    first, second = outputs[(name, 0)], outputs[(name, 1)]
    assert first and first.keys() == second.keys()
    for key in first:
        if key == "run_config.json":
            a, b = json.loads(first[key]), json.loads(second[key])
            a.pop("out_dir"), b.pop("out_dir")
            assert a == b
        else:
            assert first[key] == second[key], key


def test_expected_artifacts(outputs):
    assert "pool.jsonl" in outputs[("localize", 0)]
    assert "mapping.json" in outputs[("map", 0)]
    assert "candidates.jsonl" in outputs[("covers", 0)]
    assert {"model.json", "model.bin", "loss.csv"} <= outputs[("train", 0)].keys()
    header = outputs[("eval", 0)]["report.csv"].decode().splitlines()[0]
    assert header == "method,MR,R@1,R@5,R@50"
    assert {"capture_curve.csv", "capture_curve.svg"} <= outputs[("capture-curve", 0)].keys()
    stitched = [json.loads(x) for x in outputs[("stitch", 0)]["stitched.jsonl"].decode().splitlines()]
    assert len(stitched) == 4
    for name in COMMANDS:
        assert "run_config.json" in outputs[(name, 0)]


def test_run_config_records_resolved_values(outputs):
    cfg = json.loads(outputs[("train", 0)]["run_config.json"])
    assert cfg["command"] == "train" and cfg["epochs"] == 1 and cfg["lr"] == 3e-4


def test_eval_with_full_distractor_count(fixture_dir):
    q = fixture_dir / "fx" / "queries"
    out = fixture_dir / "eval499"
    assert run("eval", "--corpus-dir", fixture_dir / "corpus", "--test", q / "test.jsonl",
               "--distractors", 499, "--out-dir", out) == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0].split(",")[1:] == ["MR", "R@1", "R@5", "R@50"]
    assert [x.split(",")[0] for x in lines[1:]] == ["similarity", "text-only"]


def test_config_file_precedence(fixture_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"top_k": 3, "threshold": 0.7}))
    q = fixture_dir / "fx" / "queries" / "test.jsonl"
    out = tmp_path / "o"
    assert run("covers", "--corpus-dir", fixture_dir / "corpus", "--query", q, "--config", cfg,
               "--threshold", 0.8, "--out-dir", out) == 0
    rc = json.loads((out / "run_config.json").read_text())
    assert rc["top_k"] == 3 and rc["threshold"] == 0.8


@pytest.mark.parametrize("name", sorted(COMMANDS))
def test_help_for_every_subcommand(name, capsys):
    assert run(name, "--help") == 0
    assert "usage:" in capsys.readouterr().out


def test_usage_errors_exit_1(capsys):
    assert run("ingest", "--no-such-flag") == 1
    assert "usage:" in capsys.readouterr().err
    assert run("frobnicate") == 1
    assert run("gen-negatives", "--samples", "x", "--neg-kinds", "cor,zzz", "--corpus-dir", "nowhere") in (1, 2)


def test_bad_neg_kinds_is_usage_error(fixture_dir, tmp_path):
    q = fixture_dir / "fx" / "queries" / "train.jsonl"
    assert run("gen-negatives", "--corpus-dir", fixture_dir / "corpus", "--samples", q,
               "--neg-kinds", "cor,zzz", "--out-dir", tmp_path) == 1


def test_data_errors_exit_2(tmp_path, capsys):
    assert run("ingest", "--corpus-dir", tmp_path / "missing", "--out-dir", tmp_path) == 2
    assert "data error" in capsys.readouterr().err
    bad = tmp_path / "c.json"
    bad.write_text("[1, 2]")
    assert run("ingest", "--config", bad, "--out-dir", tmp_path) == 2


def test_unreachable_llm_exits_3(fixture_dir, tmp_path, monkeypatch):
    monkeypatch.delenv("SAD_LLM_URL", raising=False)
    assert run("gen-data", "--corpus-dir", fixture_dir / "corpus", "--llm", "http", "--out-dir", tmp_path) == 3


def test_parser_lists_all_global_flags():
    text = build_parser().format_help()
    assert "SUBCOMMAND" in text
