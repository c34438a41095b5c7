"""Stage runner and ``anymole`` CLI, on the bundled toy config with reduced step counts."""

import json
import subprocess
import sys

import pytest

from inbetween.cli import main
from inbetween.errors import ConfigError
from inbetween.pipeline import (STAGES, apply_overrides, bundled_config, check_thresholds, known_frames_only,
                                load_config, run_stage, validate_config)
from inbetween.scenes import load_toy_scene

QUICK = ["--set", "adapt.steps=3", "--set", "estimator.steps=20", "--set", "mimic.steps=3"]


def cli(stage, root, *extra):
    return main([stage, "--config", "toy", "--output-root", str(root), *QUICK, *extra])


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    codes = [cli(s, root) for s in STAGES]
    return root, codes


def manifest(root, stage):
    return json.loads((root / "manifests" / f"{stage}.json").read_text())


def test_full_pipeline_emits_all_manifests(run):
    root, codes = run
    assert codes == [0] * 6
    for s in STAGES:
        m = manifest(root, s)
        assert m["stage"] == s and m["outputs"]
        assert m["config"]["adapt"]["steps"] == 3
    report = json.loads((root / "evaluate" / "report.json").read_text())
    assert set(report["values"]) >= {"l2q", "hl2q", "l2p", "npss", "ssim"}
    assert (root / "evaluate" / "report.csv").exists()


def test_synth_renders_four_views_and_second_spaced_keyframes(run):
    root, _ = run
    for view in ("front", "left", "right", "back"):
        assert len(list((root / "synth" / "context" / view).glob("*.png"))) == 60
        assert len(list((root / "synth" / "keyframe" / view).glob("*.png"))) == 4
    known = json.loads((root / "synth" / "known_motion.json").read_text())
    kf = known["keyframes"]
    assert kf == [60, 90, 120, 150]


def test_rerun_is_noop_and_force_reproduces_outputs(run, capsys):
    root, _ = run
    before = manifest(root, "synth-data")
    assert cli("synth-data", root) == 0
    assert "up to date" in capsys.readouterr().out
    assert cli("synth-data", root, "--force") == 0
    assert "done in" in capsys.readouterr().out
    assert manifest(root, "synth-data")["outputs"] == before["outputs"]


def test_changed_config_reruns_stage(run, capsys):
    root, _ = run
    assert cli("mimic", root, "--set", "mimic.steps=2") == 0
    assert "done in" in capsys.readouterr().out
    assert manifest(root, "mimic")["config"]["mimic"]["steps"] == 2
    assert cli("mimic", root) == 0


def test_evaluate_threshold_exit_codes(run):
    root, _ = run
    assert cli("evaluate", root, "--threshold", "l2p=1e-12") == 1
    assert cli("evaluate", root, "--threshold", "l2p=10") == 0
    assert check_thresholds({"ssim": 0.5, "l2p": 0.1}, {"ssim": 0.6, "l2p": 0.2, "npss": 1}) == \
        {"ssim": False, "l2p": True, "npss": False}


def test_manifest_can_serve_as_config(run, monkeypatch):
    root, _ = run
    monkeypatch.setenv("ANYMOLE_OUTPUT_ROOT", str(root))
    path = root / "manifests" / "evaluate.json"
    assert load_config(path)["mimic"]["steps"] == manifest(root, "evaluate")["config"]["mimic"]["steps"]
    assert main(["evaluate", "--config", str(path)]) == 0
    assert main(["evaluate", "--config", str(path), "--threshold", "l2p=1e-12"]) == 1


def test_stage_order_violation_names_upstream(tmp_path, capsys):
    assert cli("mimic", tmp_path) == 2
    err = capsys.readouterr().err
    assert "known_motion.json" in err and "synth-data" in err


def test_input_errors_exit_2(tmp_path, capsys):
    assert main(["synth-data", "--config", str(tmp_path / "none.json")]) == 2
    bad = bundled_config()
    bad["scene"]["motion"] = "missing.json"
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(bad))
    assert main(["synth-data", "--config", str(path), "--output-root", str(tmp_path / "o")]) == 2
    assert "missing.json" in capsys.readouterr().err


def test_console_script_reports_errors(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "inbetween.cli", "adapt", "--config", "toy",
                           "--output-root", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2 and "synth-data" in proc.stderr


def test_seeds_are_required():
    cfg = bundled_config()
    del cfg["estimator"]["seed"]
    with pytest.raises(ConfigError, match="estimator"):
        validate_config(cfg)


def test_overrides():
    cfg = apply_overrides(bundled_config(), ["estimator.steps=5", "generate.view=left", "new.x=[1, 2]"])
    assert cfg["estimator"]["steps"] == 5 and cfg["generate"]["view"] == "left" and cfg["new"]["x"] == [1, 2]
    assert bundled_config()["estimator"]["steps"] == 3500
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["estimator"])


def test_ablation_flags_are_recorded(tmp_path):
    cfg = apply_overrides(bundled_config(), ["scene.views=[\"front\", \"left\"]"])
    m = run_stage("synth-data", cfg, tmp_path, flags={"no_keyframe_weighting": True, "no_icadapt": True})
    assert m["flags"] == {"no_keyframe_weighting": True}
    samples = json.loads((tmp_path / "synth" / "dataset.json").read_text())["samples"]
    assert {s["multiplicity"] for s in samples if s["kind"] == "keyframe"} == {1}
    run_stage("synth-data", cfg, tmp_path)
    samples = json.loads((tmp_path / "synth" / "dataset.json").read_text())["samples"]
    assert {s["multiplicity"] for s in samples if s["kind"] == "keyframe"} == {3}
    m = run_stage("adapt", apply_overrides(cfg, ["adapt.steps=2"]), tmp_path, flags={"no_icadapt": True})
    assert m["flags"] == {"no_icadapt": True}


def test_known_frames_only_hides_ground_truth():
    m = load_toy_scene().motion
    k = known_frames_only(m)
    for i in range(len(m)):
        src = i if i < 60 or i in m.keyframe_indices else max(j for j in [59] + m.keyframe_indices if j <= i)
        assert (k.rotations[i] == m.rotations[src]).all()
