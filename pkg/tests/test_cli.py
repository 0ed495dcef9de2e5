import csv
import json
import shutil

import numpy as np
import pytest

from saprlab.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, load_examples, main
from saprlab.evaluation import read_pnm

TINY = {
    "dataset": {"num_classes": 3, "per_class": 8, "image_size": 16, "test_fraction": 0.5},
    "model": {
        "vit": {"arch": "vit", "embed_dim": 16, "num_heads": 2, "num_blocks": 2, "mlp_ratio": 2},
        "cnn": {"arch": "cnn", "channels1": 4, "channels2": 4, "hidden": 8},
        "mlp": {"arch": "mlp", "hidden": 8},
    },
    "train": {
        "vit": {"epochs": 2, "lr": 0.05, "grad_clip": 1.0},
        "cnn": {"epochs": 2, "lr": 0.02},
        "mlp": {"epochs": 2, "lr": 0.02},
    },
    "attack": {"iterations": 3, "num_images": 6, "chunk_size": 4, "sapr_enabled": True, "threshold": 0.3,
               "debug": True},
    "eval": {"p_grid": [0.0, 0.3, 0.6]},
    "seed": 3,
}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = _write(root, TINY)
    assert main(["train", cfg, "--output-dir", str(root / "out")]) == EXIT_OK
    return root, cfg


def test_train_writes_checkpoints_and_logs(trained):
    root, _ = trained
    out = root / "out"
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["cnn.ckpt", "mlp.ckpt", "vit.ckpt"]
    rows = list(csv.DictReader((out / "train_log.csv").open()))
    assert len(rows) == 6
    assert json.loads((out / "train_summary.json").read_text())["seed"] == 3


def test_train_is_seed_deterministic(trained, tmp_path):
    root, cfg = trained
    assert main(["train", cfg, "--output-dir", str(tmp_path)]) == EXIT_OK
    for name in ("vit", "cnn", "mlp"):
        a = (root / "out" / "checkpoints" / f"{name}.ckpt").read_bytes()
        assert (tmp_path / "checkpoints" / f"{name}.ckpt").read_bytes() == a


def test_zero_learning_rate_train_keeps_init(tmp_path):
    cfg = json.loads(json.dumps(TINY))
    cfg["train"] = {n: {"epochs": 1, "lr": 0.0} for n in ("vit", "cnn", "mlp")}
    from saprlab.models import build_model
    from saprlab.train import checkpoint_bytes

    assert main(["train", _write(tmp_path, cfg), "--output-dir", str(tmp_path / "o")]) == EXIT_OK
    from saprlab.config import load_config

    parsed = load_config(tmp_path / "cfg.json")
    arch, spec = parsed.model_spec("cnn")
    fresh = build_model(arch, spec, seed=parsed.seed + sum(map(ord, "cnn")))
    assert (tmp_path / "o" / "checkpoints" / "cnn.ckpt").read_bytes() == checkpoint_bytes(fresh.requires_grad_(False))


def _attack_run(trained, out, extra=()):
    root, cfg = trained
    args = ["attack", cfg, "--output-dir", str(out), "--checkpoints", str(root / "out" / "checkpoints"),
            "--workers", "1", *extra]
    return main(args)


def test_attack_emits_budget_respecting_files(trained, tmp_path):
    assert _attack_run(trained, tmp_path) == EXIT_OK
    examples = load_examples(tmp_path / "adversarial" / "examples.npz")
    assert 0 < len(examples) <= 6
    for ex in examples:
        adv = read_pnm(tmp_path / "adversarial" / f"{ex.image_id:05d}_adv.ppm")
        # the exported file is rounded to integers, so compare against the rounded budget
        assert np.abs(adv - ex.x).max() <= 16
        assert np.abs(ex.x_adv - ex.x).max() <= 16 + 1e-9
        assert ex.budget_violations == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["method"] == "MIM+SAPR"
    assert set(report["target_rates"]) == {"cnn", "mlp"}


def test_attack_report_reproducible_byte_for_byte(trained, tmp_path):
    assert _attack_run(trained, tmp_path / "a") == EXIT_OK
    assert _attack_run(trained, tmp_path / "b", ["--workers", "2"]) == EXIT_OK
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_zero_iterations_copies_inputs(trained, tmp_path):
    root, _ = trained
    cfg = json.loads(json.dumps(TINY))
    cfg["attack"]["iterations"] = 0
    path = _write(tmp_path, cfg)
    code = main(["attack", path, "--output-dir", str(tmp_path / "o"), "--checkpoints",
                 str(root / "out" / "checkpoints"), "--workers", "1"])
    assert code == EXIT_OK
    for ex in load_examples(tmp_path / "o" / "adversarial" / "examples.npz"):
        assert np.array_equal(ex.x_adv, ex.x)


def test_sweep_csv_has_one_row_per_grid_value(trained, tmp_path):
    root, cfg = trained
    assert main(["sweep", cfg, "--output-dir", str(tmp_path), "--checkpoints", str(root / "out" / "checkpoints"),
                 "--workers", "1"]) == EXIT_OK
    rows = list(csv.reader((tmp_path / "sweep.csv").open()))
    assert rows[0] == ["P", "avg_rate", "cnn", "mlp"]
    assert [r[0] for r in rows[1:]] == ["0.0000", "0.3000", "0.6000"]


def test_sweep_zero_matches_plain_attack(trained, tmp_path):
    root, _ = trained
    cfg = json.loads(json.dumps(TINY))
    cfg["attack"]["sapr_enabled"] = False
    cfg["eval"]["p_grid"] = [0.0]
    path = _write(tmp_path, cfg)
    ckpt = str(root / "out" / "checkpoints")
    assert main(["sweep", path, "--output-dir", str(tmp_path / "s"), "--checkpoints", ckpt, "--workers", "1"]) == 0
    assert main(["attack", path, "--output-dir", str(tmp_path / "a"), "--checkpoints", ckpt, "--workers", "1"]) == 0
    row = list(csv.reader((tmp_path / "s" / "sweep.csv").open()))[1]
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    expected = "" if report["average_rate"] is None else f"{report['average_rate']:.4f}"
    assert row[1] == expected


def test_eval_rescores_saved_examples(trained, tmp_path):
    root, cfg = trained
    assert _attack_run(trained, tmp_path) == EXIT_OK
    code = main(["eval", cfg, "--output-dir", str(tmp_path), "--checkpoints", str(root / "out" / "checkpoints")])
    assert code == EXIT_OK
    a = json.loads((tmp_path / "report.json").read_text())
    b = json.loads((tmp_path / "eval_report.json").read_text())
    assert a["target_rates"] == b["target_rates"]
    assert (tmp_path / "eval_report.txt").read_text() == (tmp_path / "report.txt").read_text()


# -- exit codes -------------------------------------------------------------------


def test_no_command_is_usage_error(capsys):
    assert main([]) == EXIT_USAGE


def test_unknown_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["train", _write(tmp_path, TINY), "--bogus"])
    assert err.value.code == EXIT_USAGE


def test_missing_config_is_io_error(tmp_path):
    assert main(["train", str(tmp_path / "nope.json")]) == EXIT_IO


def test_malformed_json_is_config_error(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["train", str(tmp_path / "bad.json")]) == EXIT_CONFIG


@pytest.mark.parametrize("patch", [
    {"attack": {"epsilon": -1}},
    {"attack": {"method": "PGD"}},
    {"dataset": {"colour": "red"}},
    {"extra": 1},
    {"white_box": "cnn"},
    {"attack": {"sapr_enabled": True, "threshold": 2.0}},
])
def test_schema_violation_is_config_error(tmp_path, patch):
    cfg = json.loads(json.dumps(TINY))
    for key, value in patch.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    assert main(["train", _write(tmp_path, cfg), "--output-dir", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_checkpoint_is_io_error(tmp_path):
    assert main(["attack", _write(tmp_path, TINY), "--output-dir", str(tmp_path / "o"), "--workers", "1"]) == EXIT_IO


def test_corrupt_checkpoint_is_io_error(trained, tmp_path):
    root, cfg = trained
    shutil.copytree(root / "out" / "checkpoints", tmp_path / "ck")
    (tmp_path / "ck" / "vit.ckpt").write_bytes(b"garbage")
    code = main(["attack", cfg, "--output-dir", str(tmp_path / "o"), "--checkpoints", str(tmp_path / "ck"),
                 "--workers", "1"])
    assert code == EXIT_IO


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_is_numeric_error(tmp_path):
    cfg = json.loads(json.dumps(TINY))
    cfg["train"] = {"vit": {"epochs": 3, "lr": 1e300}}
    cfg["model"] = {"vit": TINY["model"]["vit"]}
    assert main(["train", _write(tmp_path, cfg), "--output-dir", str(tmp_path / "o")]) == EXIT_NUMERIC
