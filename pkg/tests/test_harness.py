import json
from dataclasses import asdict

import numpy as np
import pandas as pd
import pytest

from apga.build_apga import build_apga
from apga.data import SyntheticSpec, generate, load_folder
from apga.errors import ConfigError
from apga.harness.cli import main, summarize_runs, worker_count
from apga.harness.config import (
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    load_experiment_config,
    run_checkpoint,
    save_experiment_config,
)
from apga.harness.mask_quality import area_matched_random_masks, iou, policy_masks, score_masks
from apga.harness.metrics_log import METRIC_COLUMNS, MetricsLog, read_metrics
from apga.harness.plot_utils import plot_mask_gallery, plot_summary, plot_training_curves


@pytest.fixture
def experiment_file(tmp_path, tiny_spec):
    data = {
        "schema_version": 1,
        "name": "tiny",
        "output_dir": str(tmp_path / "runs"),
        "seeds": [0, 1],
        "augmentations": ["gradcam", "apga"],
        "dataset": {"source": "synthetic", "synthetic": asdict(tiny_spec)},
        "train": {
            "steps": 2,
            "batch_size": 4,
            "pretrain_epochs": 1,
            "eval_interval": 1,
            "progress": False,
        },
        "export": {"num_masks": 2},
    }
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(data))
    return path


def _metrics_row(step, acc=None):
    row = {c: 0.5 for c in METRIC_COLUMNS}
    row.update(step=step, val_accuracy=float("nan") if acc is None else acc)
    return row


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(seeds=[3, 4], augmentations=["none", "apga"])
    save_experiment_config(cfg, tmp_path / "c.json")
    assert load_experiment_config(tmp_path / "c.json") == cfg
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_shipped_experiment_config_is_valid():
    from importlib.resources import files

    path = files("apga") / "configs" / "experiments" / "synthetic_reference.json"
    cfg = config_from_dict(json.loads(path.read_text()))
    assert cfg.seeds == [0, 1, 2, 3, 4]
    assert set(cfg.augmentations) == {"none", "cutout", "gradcam", "apga"}


@pytest.mark.parametrize(
    "data",
    [
        {"schema_version": 2},
        {"name": "no version"},
        {"schema_version": 1, "bogus": True},
        {"schema_version": 1, "train": {"steps": "many"}},
        {"schema_version": 1, "augmentations": ["mixup"]},
        {"schema_version": 1, "seeds": []},
        {"schema_version": 1, "dataset": {"source": "folder"}},
    ],
)
def test_bad_configs(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_invalid_json_file(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_experiment_config(tmp_path / "bad.json")


def test_for_run_pins_seed_and_augmentation():
    cfg = ExperimentConfig(seeds=[0, 1], augmentations=["none", "apga"]).for_run("none", 1)
    assert cfg.seeds == [1] and cfg.augmentations == ["none"]
    assert cfg.train.seed == 1 and cfg.train.augmentation == "none"


def test_metrics_log_append_and_truncate(tmp_path):
    log = MetricsLog(tmp_path / "m.csv")
    for step in range(5):
        log.append(_metrics_row(step, acc=0.75 if step == 3 else None))
    stats = log.get_log_stats()
    assert stats["total_entries"] == 5 and stats["last_step"] == 4 and stats["evaluations"] == 1
    resumed = MetricsLog(tmp_path / "m.csv", resume_step=2)
    assert resumed.read()["step"].tolist() == [0, 1]
    assert resumed.read_recent(1)[0]["step"] == 1


def test_metrics_log_rejects_partial_rows(tmp_path):
    log = MetricsLog(tmp_path / "m.csv")
    with pytest.raises(KeyError):
        log.append({"step": 0})


def test_metrics_floats_round_trip(tmp_path):
    log = MetricsLog(tmp_path / "m.csv")
    row = _metrics_row(0, acc=1 / 3)
    row["R_t"] = 0.1 + 0.2
    log.append(row)
    df = read_metrics(tmp_path / "m.csv")
    assert df["R_t"].iloc[0] == 0.1 + 0.2
    assert df["val_accuracy"].iloc[0] == 1 / 3


def test_iou_cases():
    truth = np.zeros((1, 10, 10), np.uint8)
    truth[0, 0, :] = 1
    one_pixel = np.zeros_like(truth)
    one_pixel[0, 0, 0] = 1
    assert iou(truth, truth).tolist() == [1.0]
    assert iou(one_pixel, truth)[0] == pytest.approx(0.1)
    assert iou(np.zeros_like(truth), np.zeros_like(truth)).tolist() == [1.0]
    assert iou(np.zeros_like(truth), truth).tolist() == [0.0]


def test_random_masks_match_area():
    masks = (np.random.default_rng(0).random((5, 8, 8)) > 0.7).astype(np.uint8)
    rand = area_matched_random_masks(masks, np.random.default_rng(1))
    assert rand.shape == masks.shape
    assert rand.reshape(5, -1).sum(axis=1).tolist() == masks.reshape(5, -1).sum(axis=1).tolist()


def test_score_masks_on_perfect_masks(tiny_dataset):
    roi = tiny_dataset.roi_masks("val")
    report = score_masks(roi, roi)
    assert report.mean_iou == 1.0 and report.n == len(roi)
    assert report.random_mean_iou < 1.0
    assert sum(report.keep_fraction_hist) == len(roi)


def test_untrained_policy_scores_like_random_masks():
    ds = generate(SyntheticSpec(seed=0))
    roi = ds.roi_masks("val")
    gaps = []
    for seed in range(5):
        _, policy = build_apga(seed=seed)
        report = score_masks(policy_masks(policy, ds, "val"), roi, seed=seed)
        gaps.append(abs(report.mean_iou - report.random_mean_iou))
    # a fresh network is bias dominated, so its masks carry no ROI signal
    assert np.median(gaps) < 0.05
    perfect = score_masks(roi, roi)
    assert perfect.mean_iou - perfect.random_mean_iou > 0.5


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.delenv("APGA_THREADS", raising=False)
    assert worker_count(4) == 1
    monkeypatch.setenv("APGA_THREADS", "8")
    assert worker_count(3) == 3
    for bad in ("0", "two"):
        monkeypatch.setenv("APGA_THREADS", bad)
        with pytest.raises(ConfigError):
            worker_count(3)


def test_training_curves_are_byte_stable(tmp_path):
    log = MetricsLog(tmp_path / "m.csv")
    for step in range(6):
        log.append(_metrics_row(step, acc=0.5 + 0.05 * step if step % 2 else None))
    a = plot_training_curves(tmp_path / "m.csv", tmp_path / "a.svg", title="run")
    b = plot_training_curves(tmp_path / "m.csv", tmp_path / "b.svg", title="run")
    assert a.read_bytes() == b.read_bytes()


def test_training_curves_edge_cases(tmp_path):
    log = MetricsLog(tmp_path / "m.csv")
    with pytest.raises(ValueError):
        plot_training_curves(tmp_path / "m.csv", tmp_path / "empty.svg")
    log.append(_metrics_row(0, acc=0.5))
    assert plot_training_curves(log.read(), tmp_path / "one.svg").exists()


def test_gallery_with_and_without_gradcam(tmp_path, tiny_dataset):
    images = tiny_dataset.split("val").images[:3]
    masks = tiny_dataset.roi_masks("val")[:3]
    assert plot_mask_gallery(images, masks, masks, tmp_path / "g.png", ids=["a", "b", "c"]).exists()
    assert plot_mask_gallery(images, masks, None, tmp_path / "g2.png").exists()


def test_summary_plot(tmp_path):
    summary = {"augmentations": {"none": {"mean_accuracy": 0.8, "std_accuracy": 0.02}}}
    assert plot_summary(summary, tmp_path / "s.svg").exists()


def test_cli_usage_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    missing = tmp_path / "missing_run"
    assert main(["eval", "--run", str(missing)]) == 2
    assert "missing_run" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2


def test_cli_help_exits_cleanly():
    assert main(["--help"]) == 0


def test_cli_bad_thread_setting(monkeypatch, experiment_file):
    monkeypatch.setenv("APGA_THREADS", "-1")
    assert main(["train", "--config", str(experiment_file)]) == 2


def test_cli_verify(tmp_path):
    assert main(["verify", "--groups", "enumeration", "--quick", "--out", str(tmp_path / "v")]) == 0
    report = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert report["passed"] is True


def test_cli_generate_data(tmp_path, experiment_file):
    out = tmp_path / "data"
    assert main(["generate-data", "--config", str(experiment_file), "--out", str(out)]) == 0
    ds = load_folder(out, image_size=16)
    assert [len(ds.splits[s]) for s in ("train", "val", "test")] == [8, 4, 2]
    assert ds.has_roi


def test_cli_end_to_end(tmp_path, experiment_file, monkeypatch):
    monkeypatch.setenv("APGA_THREADS", "2")
    assert main(["train", "--config", str(experiment_file)]) == 0
    exp_dir = tmp_path / "runs" / "tiny"
    run_dirs = sorted(p.name for p in exp_dir.iterdir() if p.is_dir())
    assert run_dirs == ["apga_seed0", "apga_seed1", "gradcam_seed0", "gradcam_seed1"]

    apga0 = exp_dir / "apga_seed0"
    assert run_checkpoint(apga0).name == "final.apga"
    assert len(list((apga0 / "masks").glob("*.png"))) == 2
    assert (apga0 / "curves.svg").exists()
    assert (exp_dir / "summary.svg").exists()

    summary = json.loads((exp_dir / "summary.json").read_text())["augmentations"]
    accs = [read_metrics(exp_dir / f"apga_seed{s}" / "metrics.csv")["val_accuracy"].dropna().iloc[-1] for s in (0, 1)]
    assert summary["apga"]["n"] == 2
    assert summary["apga"]["mean_accuracy"] == pytest.approx(np.mean(accs))
    assert summary["apga"]["std_accuracy"] == pytest.approx(np.std(accs, ddof=1))
    assert summarize_runs(exp_dir) == json.loads((exp_dir / "summary.json").read_text())

    assert main(["eval", "--run", str(apga0), "--split", "test"]) == 0
    result = json.loads((apga0 / "eval_test.json").read_text())
    assert 0.0 <= result["accuracy"] <= 1.0

    assert main(["mask-quality", "--run", str(apga0)]) == 0
    quality = json.loads((apga0 / "mask_quality.json").read_text())
    assert quality["n"] == 4
    assert quality["gradcam_mean_iou"] is not None

    assert main(["plot", "--run", str(apga0)]) == 0
    assert (apga0 / "gallery.png").exists()


def test_cli_resume_is_idempotent(tmp_path, experiment_file):
    args = ["train", "--config", str(experiment_file), "--aug", "none", "--seed", "0"]
    assert main(args) == 0
    csv = tmp_path / "runs" / "tiny" / "none_seed0" / "metrics.csv"
    first = pd.read_csv(csv)
    assert main(args + ["--resume"]) == 0
    assert pd.read_csv(csv).equals(first)
