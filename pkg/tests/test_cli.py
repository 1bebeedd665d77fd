"""CLI surface tests on a shrunken (fast) configuration."""

import json

import pytest

from deskdiff import config as cm
from deskdiff.checkpoint import load_checkpoint
from deskdiff.cli import run_command


def small_shapes_config(seed: int = 5) -> cm.ExperimentConfig:
    cfg = cm.shapes16_config(seed=seed)
    cfg.corpus_per_category = 40
    cfg.base_train.steps = 400
    cfg.base_train.fidelity_threshold = 0.0  # gate covered by full-scale tests
    cfg.autoencoder.steps = 800
    cfg.autoencoder.max_recon_error = 0.2
    cfg.eval.oracle_steps = 400
    cfg.eval.n_images = 10
    cfg.ti.steps = 60
    cfg.db.steps = 40
    cfg.db.prior_images = 8
    return cfg


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = small_shapes_config()
    cfg_path = root / "cfg.json"
    cm.save_config(cfg, cfg_path)
    assert run_command(["gen-data", "--config", str(cfg_path), "--out", str(root / "data")]) == 0
    assert (
        run_command(
            ["train-base", "--config", str(cfg_path), "--data", str(root / "data"),
             "--out", str(root / "clean.ptlb")]
        )
        == 0
    )
    assert (
        run_command(
            ["personalize", "--config", str(cfg_path), "--base", str(root / "clean.ptlb"),
             "--method", "ti", "--identifier", "[V] dog", "--target-category", "can",
             "--target-instance", "can-7", "--decoys", "render",
             "--out", str(root / "ti.ptlb"), "--report", str(root / "ti_report.json")]
        )
        == 0
    )
    return root, cfg_path


def test_unknown_flag_exits_one(capsys):
    assert run_command(["sample", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_command_exits_one(capsys):
    assert run_command(["fabricate"]) == 1
    capsys.readouterr()


def test_missing_checkpoint_is_config_error(pipeline):
    root, cfg_path = pipeline
    rc = run_command(["sample", "--ckpt", str(root / "missing.ptlb"), "--prompt", "a dog",
                      "--n", "1", "--out", str(root / "s")])
    assert rc == 2


def test_init_config_round_trips(tmp_path):
    out = tmp_path / "cfg.json"
    assert run_command(["init-config", "--preset", "gauss2d", "--out", str(out)]) == 0
    cfg = cm.load_config(str(out))
    assert cfg.backend == "gauss2d"


def test_gen_data_writes_manifest(pipeline):
    root, _ = pipeline
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert len(manifest) == 40 * 7
    assert {e["category"] for e in manifest} == {
        "dog", "car", "can", "fridge", "backpack", "clock", "bowl"
    }


def test_personalize_writes_report_without_leaking_into_checkpoint(pipeline):
    root, _ = pipeline
    report = json.loads((root / "ti_report.json").read_text())["reports"][0]
    assert report["method"] == "nouveau"
    assert report["taxonomy"] == "new-old"
    bundle = load_checkpoint(root / "ti.ptlb")
    assert "identifier" not in bundle.meta and "attack" not in bundle.meta


def test_sample_writes_both_formats(pipeline):
    root, _ = pipeline
    out = root / "samples"
    rc = run_command(["sample", "--ckpt", str(root / "clean.ptlb"),
                      "--prompt", "a photo of a dog on a road", "--n", "2",
                      "--seed", "3", "--out", str(out)])
    assert rc == 0
    assert (out / "sample_0000.ppm").exists()
    assert (out / "sample_0000.ff").exists()


def test_eval_asr_writes_report(pipeline):
    root, cfg_path = pipeline
    out = root / "asr.json"
    rc = run_command(["eval-asr", "--config", str(cfg_path), "--ckpt", str(root / "ti.ptlb"),
                      "--prompt", "a photo of a [V] dog on a road",
                      "--identifier-cat", "dog", "--target-cat", "can",
                      "--out", str(out)])
    assert rc == 0
    report = json.loads(out.read_text())["reports"][0]
    assert report["n_total"] == 10
    assert report["l"] == sum(1 for d in report["decisions"] if d == "can")


def test_scan_exit_codes(pipeline):
    root, _ = pipeline
    assert run_command(["scan", "--ckpt", str(root / "ti.ptlb"),
                        "--reference", str(root / "clean.ptlb")]) == 5
    assert run_command(["scan", "--ckpt", str(root / "clean.ptlb"),
                        "--reference", str(root / "clean.ptlb")]) == 0


def test_drift_runs(pipeline):
    root, _ = pipeline
    out = root / "drift.json"
    assert run_command(["drift", "--ckpt", str(root / "ti.ptlb"),
                        "--reference", str(root / "clean.ptlb"),
                        "--out", str(out)]) == 0
    report = json.loads(out.read_text())["reports"][0]
    assert report["added_rows"] == {"textenc.nouveau": 1}


def test_eval_fidelity_with_reference(pipeline):
    root, cfg_path = pipeline
    out = root / "fid.json"
    rc = run_command(["eval-fidelity", "--config", str(cfg_path), "--ckpt", str(root / "ti.ptlb"),
                      "--reference", str(root / "clean.ptlb"), "--n", "5", "--out", str(out)])
    assert rc == 0
    report = json.loads(out.read_text())["reports"][0]
    assert report["deltas"] is not None


def test_probe_command(pipeline):
    root, cfg_path = pipeline
    cand = root / "cand.json"
    cand.write_text(json.dumps([
        {"identifier": "clock", "expected_category": "clock"},
        {"identifier": "[V] dog", "expected_category": "dog"},
    ]))
    out = root / "probe.json"
    rc = run_command(["probe", "--config", str(cfg_path), "--ckpt", str(root / "ti.ptlb"),
                      "--candidates", str(cand), "--n", "5", "--out", str(out)])
    assert rc == 0
    report = json.loads(out.read_text())["reports"][0]
    assert report["probes_used"] == 10


def test_probe_budget_exit_code(pipeline):
    root, cfg_path = pipeline
    cand = root / "cand2.json"
    cand.write_text(json.dumps([{"identifier": "clock", "expected_category": "clock"}]))
    rc = run_command(["probe", "--config", str(cfg_path), "--ckpt", str(root / "ti.ptlb"),
                      "--candidates", str(cand), "--n", "50", "--budget", "10"])
    assert rc == 4


def test_table2_emits_csv_svg_json(pipeline):
    root, cfg_path = pipeline
    rc = run_command(["table2", "--config", str(cfg_path), "--base", str(root / "clean.ptlb"),
                      "--method", "ti", "--identifier", "[V] dog", "--target-category", "can",
                      "--target-instance", "can-7", "--n", "5", "--decoys", "render",
                      "--out-dir", str(root / "t2")])
    assert rc == 0
    csv_text = (root / "t2" / "table2.csv").read_text()
    assert "k1" in csv_text and "k6" in csv_text
    assert (root / "t2" / "table2.svg").exists()
    assert (root / "t2" / "table2_reports.json").exists()


def test_table1_emits_rows_per_method(pipeline):
    root, cfg_path = pipeline
    rc = run_command(["table1", "--config", str(cfg_path), "--base", str(root / "clean.ptlb"),
                      "--methods", "ti", "--identifiers", "[V] car", "--n", "5",
                      "--decoys", "render", "--out-dir", str(root / "t1")])
    assert rc == 0
    lines = (root / "t1" / "table1.csv").read_text().strip().splitlines()
    assert lines[1].startswith("method,prompt,")
    assert lines[2].startswith("ti,")


def test_personalize_accepts_config_attack_preset(pipeline):
    root, cfg_path = pipeline
    rc = run_command(["personalize", "--config", str(cfg_path), "--base", str(root / "clean.ptlb"),
                      "--attack", "ti-newold-can", "--decoys", "render",
                      "--out", str(root / "preset.ptlb")])
    assert rc == 0
    bundle = load_checkpoint(root / "preset.ptlb")
    assert bundle.vocab.lookup("[v]") is not None


def test_personalize_unknown_preset_is_config_error(pipeline):
    root, cfg_path = pipeline
    rc = run_command(["personalize", "--config", str(cfg_path), "--base", str(root / "clean.ptlb"),
                      "--attack", "nope", "--out", str(root / "x.ptlb")])
    assert rc == 2


def test_personalize_without_attack_or_flags_is_usage_error(pipeline):
    root, cfg_path = pipeline
    rc = run_command(["personalize", "--config", str(cfg_path), "--base", str(root / "clean.ptlb"),
                      "--out", str(root / "x.ptlb")])
    assert rc == 1


def test_train_base_gate_failure_exit_code(tmp_path):
    cfg = small_shapes_config(seed=6)
    cfg.base_train.steps = 30  # nowhere near fidelity
    cfg.base_train.fidelity_threshold = 0.9
    cfg_path = tmp_path / "cfg.json"
    cm.save_config(cfg, cfg_path)
    rc = run_command(["train-base", "--config", str(cfg_path), "--out", str(tmp_path / "c.ptlb")])
    assert rc == 3
