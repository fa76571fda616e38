import json
import subprocess
import sys

import pytest
import yaml

from papertrust.cli import main

SMALL_METRICS = {"schema_version": 1, "seed": 3, "K": 4, "T": 2, "noise_levels": [0.0, 0.02],
                 "surface": {"size": 16}}


def write(tmp_path, name, data):
    p = tmp_path / name
    p.write_text(data if isinstance(data, str) else yaml.safe_dump(data))
    return str(p)


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_metrics_outputs(tmp_path):
    cfg = write(tmp_path, "m.yaml", SMALL_METRICS)
    assert main(["metrics", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    out = files(tmp_path / "o")
    assert set(out) == {"summary.json", "metrics_per_surface.csv", "uniqueness.csv",
                        "scores_noise_0.csv", "scores_noise_0.02.csv"}
    summary = json.loads(out["summary.json"])
    assert [lvl["noise"] for lvl in summary["levels"]] == [0.0, 0.02]
    assert summary["levels"][0]["robustness_mean"] == 1.0
    assert summary["L"] == 128


def test_refuses_overwrite_without_force(tmp_path, capsys):
    cfg = write(tmp_path, "m.yaml", SMALL_METRICS)
    args = ["metrics", "--config", cfg, "--out", str(tmp_path / "o")]
    assert main(args) == 0
    assert main(args) == 2
    assert "--force" in capsys.readouterr().err
    assert main(args + ["--force"]) == 0


def test_seed_override_changes_output(tmp_path):
    cfg = write(tmp_path, "m.yaml", SMALL_METRICS)
    main(["metrics", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["metrics", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "99"])
    assert files(tmp_path / "a")["summary.json"] != files(tmp_path / "b")["summary.json"]


def test_workers_do_not_change_results(tmp_path):
    cfg = write(tmp_path, "m.yaml", SMALL_METRICS)
    main(["metrics", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["metrics", "--config", cfg, "--out", str(tmp_path / "b"), "--workers", "2"])
    assert files(tmp_path / "a") == files(tmp_path / "b")


@pytest.mark.parametrize("cmd,data", [
    ("metrics", {**SMALL_METRICS, "K": 1}),
    ("metrics", {**SMALL_METRICS, "quantizer": {"scheme": "otsu"}}),
    ("metrics", {**SMALL_METRICS, "schema_version": 9}),
    ("attack", {"schema_version": 1, "attacks": ["teleport"]}),
    ("attack", {"schema_version": 1, "deployment": {"warp": 1}}),
    ("scenario", {"schema_version": 1, "archetype": "mesh"}),
    ("metrics", "K: [unclosed"),
    ("metrics", "- just\n- a list\n"),
])
def test_config_errors_exit_2(tmp_path, cmd, data):
    cfg = write(tmp_path, "bad.yaml", data)
    assert main([cmd, "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_missing_config_and_usage(tmp_path):
    assert main(["metrics", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 2
    assert main(["fly"]) == 2


def test_runtime_error_exit_1(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write(tmp_path, "m.yaml", SMALL_METRICS)
    assert main(["metrics", "--config", cfg, "--out", str(blocker / "sub")]) == 1


def test_gen_and_scenario_bundled(tmp_path):
    gen = write(tmp_path, "g.yaml", {"schema_version": 1, "count": 3, "surface": {"size": 8}})
    assert main(["gen", "--config", gen, "--out", str(tmp_path / "g")]) == 0
    out = files(tmp_path / "g")
    assert len([f for f in out if f.endswith(".nmap")]) == 3
    assert len(json.loads(out["manifest.json"])["surfaces"]) == 3
    assert main(["scenario", "--config", "ecommerce-p2p", "--out", str(tmp_path / "s")]) == 0
    assert set(files(tmp_path / "s")) == {"report.json", "ledger.json", "summary.csv"}


def test_attack_small(tmp_path):
    cfg = write(tmp_path, "a.yaml", {"schema_version": 1, "attacks": ["replay", "leakage"]})
    assert main(["attack", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    summary = json.loads(files(tmp_path / "a")["attack_summary.json"])
    assert summary["replay"]["correct"] and summary["leakage"]["correct"]


def test_console_entry_point(tmp_path):
    cfg = write(tmp_path, "g.yaml", {"schema_version": 1, "count": 1, "surface": {"size": 8}})
    proc = subprocess.run([sys.executable, "-m", "papertrust.cli", "gen", "--config", cfg,
                           "--out", str(tmp_path / "g")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
