import json

import pytest

from lrcl.cli import main, parse_override

SMALL = ["--set", "steps=600", "--set", "hidden=16", "--set", "feature_dim=8"]


def read(path):
    return path.read_bytes()


def test_parse_override():
    assert parse_override("rank=4") == ("rank", 4)
    assert parse_override("regime=static") == ("regime", "static")
    assert parse_override("seeds=[1,2]") == ("seeds", [1, 2])


def test_toy_run_writes_csv_and_manifest(tmp_path):
    assert main(["toy-run", *SMALL, "--seeds", "0,1", "--out", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1]
    assert manifest["config"]["steps"] == 600
    for seed, name in manifest["outputs"].items():
        text = read(tmp_path / name)
        assert b"\r" not in text
        lines = text.decode().strip().split("\n")
        assert lines[0] == "step,seed,eps_q,eps_b"
        assert len(lines) == 1 + 600 // 300 + 1
        assert all(row.split(",")[1] == seed for row in lines[1:])


def test_default_row_count():
    from lrcl.regimes import ExperimentConfig
    cfg = ExperimentConfig()
    assert cfg.steps // cfg.eval_every + 1 == 41


def test_static_override_same_schema(tmp_path):
    assert main(["toy-run", *SMALL, "--set", "regime=static", "--seeds", "0", "--out", str(tmp_path)]) == 0
    (csv_file,) = tmp_path.glob("*_static_seed0.csv")
    assert read(csv_file).startswith(b"step,seed,eps_q,eps_b\n")


def test_rerun_from_manifest_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["toy-run", *SMALL, "--seeds", "2", "--out", str(a)]) == 0
    assert main(["toy-run", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    names = json.loads((a / "manifest.json").read_text())["outputs"].values()
    for name in names:
        assert read(a / name) == read(b / name)


def test_seed_offset(tmp_path, monkeypatch):
    monkeypatch.setenv("LRCL_SEED_OFFSET", "10")
    assert main(["toy-run", *SMALL, "--seeds", "0", "--out", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seeds"] == [10] and manifest["seed_offset"] == 10


def test_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 300, "hidden": 16, "feature_dim": 8, "critic_kind": "dense"}))
    out = tmp_path / "out"
    assert main(["toy-run", "--config", str(cfg), "--seeds", "0", "--out", str(out)]) == 0
    assert (out / "dense_td_seed0.csv").exists()


def test_variant(tmp_path):
    assert main(["toy-run", *SMALL, "--variant", "hypersphere-td", "--seeds", "0", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "hypersphere-td_td_seed0.csv").exists()


@pytest.mark.parametrize("argv", [
    ["toy-run", "--set", "bogus=1"],
    ["toy-run", "--set", "regime=mc"],
    ["toy-run", "--set", "noequals"],
    ["toy-run", "--seeds", "a,b"],
    ["toy-run", "--config", "/nonexistent.json"],
    ["toy-run", "--jobs", "0"],
    ["check", "nosuchsuite"],
])
def test_usage_errors(argv, tmp_path):
    code = None
    try:
        code = main(argv + ["--out", str(tmp_path)] if argv[0] == "toy-run" else argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path):
    argv = ["toy-run", *SMALL, "--set", "lr=1e300", "--seeds", "0", "--out", str(tmp_path)]
    assert main(argv) == 3


def test_sweep_outputs(tmp_path):
    argv = ["sweep", "--set", "steps=300", "--set", "hidden=16", "--set", "feature_dim=8",
            "--set", "sweep_ranks=[1,2]", "--seeds", "0,1", "--out", str(tmp_path)]
    assert main(argv) == 0
    runs = (tmp_path / "sweep_runs.csv").read_text().strip().split("\n")
    assert len(runs) == 1 + (2 * 2 * 2 + 2 * 2)
    summary = (tmp_path / "sweep_summary.csv").read_text().strip().split("\n")
    header = summary[0].split(",")
    assert header[:4] == ["regime", "critic", "rank", "dense"]
    rows = [dict(zip(header, line.split(","))) for line in summary[1:]]
    assert sum(r["dense"] == "true" for r in rows) == 2
    assert all(float(r["std_eps_q"]) >= 0 for r in rows)


@pytest.mark.parametrize("suite", ["lemma1", "incompatibility", "world", "projection"])
def test_check_suites(suite, capsys):
    assert main(["check", suite]) == 0
    assert "[PASS]" in capsys.readouterr().out


def test_arch_demos(capsys):
    assert main(["arch-demo", "simbav2", "--projection"]) == 0
    out = capsys.readouterr().out
    assert "max | ||row|| - 1 |" in out and "lora trainable < dense trainable: True" in out
    assert main(["arch-demo", "bronet"]) == 0
    assert "layer norm" in capsys.readouterr().out
    assert main(["arch-demo", "bronet", "--projection"]) == 1
