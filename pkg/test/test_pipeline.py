import json
from pathlib import Path

import pytest

import main
from nfkam.core.pipeline import STAGE_CHAINS, Subcommand, run_pipeline
from nfkam.data import RunArtifact
from nfkam.utils.artifact_store import ArtifactStore, deterministic_bytes, deterministic_diff
from nfkam.utils.config import load_config, validate_config
from nfkam.utils.report_generators import MEASURE_COLUMNS, ReportFormat, generate_reports


def with_conditions(which: list[str]):
    raw = json.loads(load_config("appendix-a").model_dump_json(by_alias=True))
    raw["conditions"]["which"] = which
    return validate_config(raw)


def empty_artifact() -> RunArtifact:
    return RunArtifact(tool_version="0.0.0", subcommand="reduce", config={})


def test_parse_cli_args():
    args = main.parse_cli_args(["kam", "--config", "appendix-a", "--steps", "1", "--strict"])
    assert args.subcommand == "kam"
    assert args.steps == 1
    assert args.strict
    assert args.out == "out"
    assert main.parse_cli_args(["report", "--format", "csv"]).fmt == "csv"
    with pytest.raises(SystemExit):
        _ = main.parse_cli_args(["kam", "--verbose", "--quiet"])
    assert main.parse_delta_grid("1e-2, 1e-3,") == [1e-2, 1e-3]
    assert main.parse_cli_args(["kam", "--profile", "paper"]).profile == "paper"
    assert main.parse_cli_args(["kam", "--profile", "analytic"]).profile == "analytic"
    with pytest.raises(SystemExit):
        _ = main.parse_cli_args(["kam", "--profile", "exact"])


def test_stage_chains():
    assert STAGE_CHAINS[Subcommand.FULL] == ("reduce", "check", "kam", "degeneracy", "verify")
    for chain in STAGE_CHAINS.values():
        assert chain[0] == "reduce"


def test_kam_run_and_reports(tmp_path: Path):
    out = tmp_path / "run"
    assert main.main(["kam", "--config", "appendix-a", "--out", str(out), "--quiet"]) == main.EXIT_OK
    assert (out / "run_artifact.json").exists()
    assert (out / "config.json").exists()

    stored = ArtifactStore(out).load()
    assert stored is not None
    det = stored.data.deterministic
    assert [(s.name, s.status) for s in det.stages] == [("reduce", "pass"), ("kam", "pass")]
    assert len(det.steps) == 2
    assert det.steps[0].post_norm < det.steps[0].pre_norm
    assert det.reduction is not None and det.reduction.frame is None

    for fmt in ReportFormat:
        assert main.main(["report", "--out", str(out), "--format", str(fmt)]) == main.EXIT_OK
    reports = out / "reports"
    assert (reports / "norm_decay.txt").read_text().startswith("Norm decay")
    steps_csv = (reports / "steps.csv").read_text().splitlines()
    assert steps_csv[0].startswith("nu,pre_norm,post_norm")
    assert len(steps_csv) == 3
    assert (reports / "norm_decay.dat").exists()


def test_snapshot_mismatch_needs_force(tmp_path: Path):
    args = ["reduce", "--out", str(tmp_path), "--quiet"]
    assert main.main([*args, "--config", "appendix-a"]) == main.EXIT_OK
    assert main.main([*args, "--config", "appendix-b-i0"]) == main.EXIT_USAGE
    assert main.main([*args, "--config", "appendix-b-i0", "--force"]) == main.EXIT_OK
    stored = ArtifactStore(tmp_path).load()
    assert stored is not None
    assert stored.data.config["name"] == "appendix-b-i0"


def test_usage_errors(tmp_path: Path):
    assert main.main(["kam", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == main.EXIT_USAGE
    assert main.main(["kam", "--config", "appendix-a", "--delta-grid", "a,b", "--out", str(tmp_path)]) == main.EXIT_USAGE
    assert main.main(["report", "--out", str(tmp_path / "nothing")]) == main.EXIT_USAGE


def test_reports_of_empty_artifact(tmp_path: Path):
    written = generate_reports(empty_artifact(), tmp_path, ReportFormat.CSV)
    assert sorted(p.name for p in written) == ["measure.csv", "steps.csv"]
    assert (tmp_path / "measure.csv").read_text() == ",".join(MEASURE_COLUMNS) + "\n"
    for fmt in (ReportFormat.TABLE, ReportFormat.PLOTDATA):
        assert generate_reports(empty_artifact(), tmp_path / str(fmt), fmt)
    with pytest.raises(ValueError):
        _ = generate_reports(empty_artifact(), tmp_path, "pdf")


def test_soft_gates_fail_only_when_strict():
    cfg = with_conditions(["A1", "A2"])
    relaxed = run_pipeline(cfg, Subcommand.CHECK)
    check = relaxed.deterministic.stages[-1]
    assert check.status == "pass"
    assert check.gate_failures == ["condition A2 fails"]
    assert not relaxed.failed

    strict = run_pipeline(cfg, Subcommand.CHECK, strict=True)
    assert strict.deterministic.stages[-1].status == "fail"
    assert strict.failed


def test_stage_error_skips_later_stages():
    raw = {
        "name": "resonant-rotor",
        "signature": {"m": 2, "m0": 0},
        "hamiltonian": {
            "kind": "reduced",
            "series": {
                "terms": [
                    {"k": [0, 0], "j": [1, 0], "coef": "1"},
                    {"k": [0, 0], "j": [0, 1], "coef": "1"},
                    {"k": [1, -1], "j": [0, 0], "coef": "1", "egrade": 1},
                ]
            },
        },
    }
    artifact = run_pipeline(validate_config(raw), Subcommand.DEGENERACY)
    assert [(s.name, s.status) for s in artifact.deterministic.stages] == [
        ("reduce", "pass"),
        ("kam", "fail"),
        ("degeneracy", "skipped"),
    ]
    assert artifact.deterministic.stages[1].message.startswith("SmallDivisor")
    assert artifact.failed


def test_runs_are_deterministic():
    cfg = load_config("appendix-a")
    first = run_pipeline(cfg, Subcommand.KAM)
    second = run_pipeline(cfg, Subcommand.KAM)
    assert deterministic_bytes(first) == deterministic_bytes(second)
    assert deterministic_diff(first, second) is None


def test_measure_csv_is_reproducible(tmp_path: Path):
    raw = json.loads(load_config("appendix-a").model_dump_json(by_alias=True))
    raw["conditions"]["measure_box"] = [[1.0, 1.0], [2.0, 2.0]]
    raw["seed"] = 7
    cfg = validate_config(raw)
    written = []
    for name in ("a", "b"):
        artifact = run_pipeline(cfg, Subcommand.CHECK)
        assert artifact.deterministic.measure is not None
        _ = generate_reports(artifact, tmp_path / name, ReportFormat.CSV)
        written.append((tmp_path / name / "measure.csv").read_bytes())
    assert written[0] == written[1]
    lines = written[0].decode().splitlines()
    assert lines[0] == ",".join(MEASURE_COLUMNS)
    assert len(lines) == 6
    assert [float(line.split(",")[0]) for line in lines[1:]] == sorted(cfg.conditions.gammas)
