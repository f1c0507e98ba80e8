import json
import math

import numpy as np
import pytest

from prunefield import pipeline as pl
from prunefield.cli import main
from prunefield.errors import ConfigError, InputError


# --- metrics ----------------------------------------------------------------------

def test_psnr_examples():
    a = np.zeros((8, 8, 3))
    assert pl.psnr(a, a) == math.inf
    assert pl.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert pl.psnr(a, a + 0.01) == pytest.approx(40.0, abs=1e-9)
    with pytest.raises(InputError):
        pl.psnr(a, np.zeros((8, 7, 3)))


def test_ssim_properties(rng):
    a = rng.uniform(size=(24, 24, 3))
    assert pl.ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    noisy = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    assert pl.ssim(a, noisy) < 0.9
    assert pl.ssim(a, noisy) == pytest.approx(pl.ssim(noisy, a), abs=1e-12)
    with pytest.raises(InputError):
        pl.ssim(a[:8, :8], a[:8, :8])


def test_ssim_against_reference_formula():
    # constant images: SSIM reduces to the luminance term
    a = np.full((11, 11), 0.2)
    b = np.full((11, 11), 0.6)
    c1 = 0.01 ** 2
    expected = (2 * 0.2 * 0.6 + c1) / (0.2 ** 2 + 0.6 ** 2 + c1)
    assert pl.ssim(a, b) == pytest.approx(expected, rel=1e-9)


def test_mask_metric_examples():
    pred = np.array([1, 1, 0, 0], bool)
    gt = np.array([0, 1, 1, 0], bool)
    m = pl.mask_metrics(pred, gt)
    assert m == {"precision": 0.5, "recall": 0.5, "iou": pytest.approx(1 / 3)}
    assert pl.mask_metrics(np.zeros(4, bool), gt)["precision"] == 1.0
    assert pl.mask_metrics(pred, np.zeros(4, bool))["recall"] == 1.0


def test_prune_refuses_to_drop_everything(tiny_dataset):
    shape = tiny_dataset.images.shape[:3]
    assert pl.prune(tiny_dataset, np.zeros(shape, bool)).all()
    with pytest.raises(InputError):
        pl.prune(tiny_dataset, np.ones(shape, bool))


# --- configuration ------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = pl.benchmark_config("data", tmp_path / "run", seed=3, mode="pixel")
    cfg.save(tmp_path / "c.json")
    assert pl.PipelineConfig.load(tmp_path / "c.json") == cfg


@pytest.mark.parametrize("raw", [
    {"dataset": "d", "bogus": 1},
    {"dataset": "d", "train": {"nope": 1}},
    {"dataset": "d", "mode": "other"},
    {"dataset": "d", "train": {"iterations": 0}},
    {"dataset": "d", "render": 5},
    {"out": "x"},
])
def test_bad_configs_are_config_errors(raw):
    with pytest.raises(ConfigError):
        pl.PipelineConfig.from_json(raw)


# --- end to end -----------------------------------------------------------------------

TINY = {"train": {"iterations": 40, "batch_rays": 64, "lr_start": 5e-3, "lr_end": 1e-3,
                  "warmup": 5, "loss": "l2", "depth": 2, "width": 16, "L_pos": 2, "L_dir": 1},
        "render": {"t_near": 3.5, "t_far": 9.0, "n_samples": 8},
        "consistency": {"min_correspondences": 2},
        "refine": {"min_size": 4}}


@pytest.fixture(scope="module")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    assert main(["synth", "--scene", "two-sphere", "--views", "4", "--size", "16",
                 "--test-views", "1", "--probability", "1.0", "--out", str(root / "data")]) == 0
    cfg = dict(TINY, dataset=str(root / "data"), out=str(root / "run"))
    (root / "cfg.json").write_text(json.dumps(cfg))
    return root


def test_pipeline_resumes_without_recomputation(tiny_root):
    cfg = pl.PipelineConfig.load(tiny_root / "cfg.json")
    first = pl.run_pipeline(cfg)
    stamps = {p: p.stat().st_mtime_ns for p in (tiny_root / "run").rglob("*") if p.is_file()
              and p.name != "manifest.json"}
    second = pl.run_pipeline(cfg)
    assert first.manifest.artifacts == second.manifest.artifacts
    assert first.manifest.metrics == second.manifest.metrics
    for p, t in stamps.items():
        assert p.stat().st_mtime_ns == t, p
    second.manifest.verify(tiny_root / "run")
    for key in ("baseline", "retrained", "mask", "keep_fraction"):
        assert key in first.manifest.metrics
    assert set(first.manifest.metrics["retrained"]) >= {"psnr", "ssim"}


def test_tampered_artifact_is_recomputed(tiny_root):
    cfg = pl.PipelineConfig.load(tiny_root / "cfg.json")
    first = pl.run_pipeline(cfg)
    mask_png = tiny_root / "run" / "segment" / "mask" / "mask_0000.png"
    mask_png.write_bytes(b"corrupt")
    second = pl.run_pipeline(cfg)
    assert second.manifest.artifacts == first.manifest.artifacts


def test_cli_stages(tiny_root, capsys):
    data, cfg, out = tiny_root / "data", str(tiny_root / "cfg.json"), tiny_root / "cli"
    assert main(["train", "--config", cfg, "--out", str(out / "train")]) == 0
    ckpt = str(out / "train" / "field.npz")
    assert main(["score", "--config", cfg, "--checkpoint", ckpt, "--metric", "gradnorm",
                 "--out", str(out / "score")]) == 0
    assert main(["consistency", "--config", cfg, "--checkpoint", ckpt,
                 "--scores", str(out / "score" / "scores"), "--out", str(out / "flags")]) == 0
    assert main(["segment", "--config", cfg, "--out", str(out / "segs")]) == 0
    assert main(["refine", "--flags", str(out / "flags"), "--segments", str(out / "segs"),
                 "--out", str(out / "mask")]) == 0
    assert main(["prune-retrain", "--config", cfg, "--mask", str(out / "mask"),
                 "--out", str(out / "retrain")]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--checkpoint", str(out / "retrain" / "field.npz"),
                 "--mask", str(out / "mask")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {"psnr", "ssim", "mask"} <= set(report)
    assert len(list((out / "score" / "scores").glob("score_*.f32"))) == 4


def test_cli_exit_codes(tiny_root, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["pipeline", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"dataset": "x", "unknown": 1}))
    assert main(["pipeline", "--config", str(bad)]) == 2
    assert main(["train", "--dataset", str(tmp_path / "missing")]) == 3
    assert main(["eval", "--config", str(tiny_root / "cfg.json"),
                 "--checkpoint", str(tmp_path / "none.npz")]) == 3
