import csv
import json
import math
import sys

import numpy as np
import pytest
import torch

from densealign.harness import RunConfig, TrainConfig, evaluate, lr_at, train
from densealign.harness.ablate import Cell, ablate, grid, write_table
from densealign.harness.checkpoint import load_checkpoint
from densealign.harness.cli import main
from densealign.harness.evaluate import EvalReport, confusion
from densealign.harness.train import METRIC_COLUMNS, TrainingDiverged, build_model, read_metrics
from densealign.synthdata import generate
from densealign.textbank import build_bank, save_bank


def tiny(**kw) -> RunConfig:
    base = {"num_train": 32, "num_val": 8, "iters": 50}
    base.update(kw)
    return RunConfig.default().with_overrides(base)


@pytest.fixture(scope="module")
def run50(tmp_path_factory):
    cfg = tiny()
    corpus = generate(cfg.corpus)
    out = tmp_path_factory.mktemp("run50")
    return corpus, cfg, train(corpus, cfg, out), out


# learning-rate schedule

def independent_lr(step, iters, warm, lo=1e-6, hi=6e-5, p=0.9):
    if step < warm:
        return lo + step * (hi - lo) / warm
    frac = (step - warm) / (iters - warm)
    return hi * math.pow(1.0 - frac, p)


def test_lr_pins():
    cfg = TrainConfig()
    assert cfg.warmup_iters == 150 and cfg.seg_start_iter == 150
    assert lr_at(0, cfg) == pytest.approx(1e-6, rel=1e-12)
    assert lr_at(150, cfg) == pytest.approx(6e-5, rel=1e-12)
    mid = 150 + (2000 - 150) // 2
    assert lr_at(mid, cfg) == pytest.approx(6e-5 * (1 - (mid - 150) / 1850) ** 0.9, rel=1e-12)
    assert lr_at(1075, cfg) == pytest.approx(6e-5 * 0.5**0.9, rel=1e-12) == pytest.approx(3.21532e-5, rel=1e-5)


def test_lr_matches_independent_formula_everywhere():
    cfg = TrainConfig()
    got = np.array([lr_at(s, cfg) for s in range(cfg.iters)])
    ref = np.array([independent_lr(s, 2000, 150) for s in range(2000)])
    np.testing.assert_allclose(got, ref, rtol=1e-12)
    assert (np.diff(got[150:]) <= 0).all()
    assert (np.diff(got[:151]) > 0).all()
    assert np.abs(np.diff(got)).max() < 1e-6  # no jumps at the warmup boundary


def test_lr_out_of_range():
    with pytest.raises(ValueError):
        lr_at(2000, TrainConfig())


# configuration

def test_overrides_coerce_and_derive():
    cfg = RunConfig.default().with_overrides({"iters": "400", "ccl_enabled": "false", "lambda_p": "0",
                                              "corpus.classes": "disk,square", "bank_path": "none"})
    assert cfg.train.iters == 400 and cfg.train.warmup_iters == 30 and cfg.train.seg_start_iter == 30
    assert cfg.train.ccl_enabled is False and cfg.train.lambda_p == 0.0
    assert cfg.corpus.classes == ("disk", "square") and cfg.seghead.num_classes == 3
    assert cfg.train.bank_path is None


def test_bare_seed_hits_every_section():
    cfg = RunConfig.default().with_overrides({"seed": 4})
    assert cfg.corpus.seed == cfg.encoder.seed == cfg.train.seed == 4


def test_unknown_key_rejected():
    with pytest.raises(KeyError):
        RunConfig.default().with_overrides({"nonsense": 1})
    with pytest.raises(ValueError):
        RunConfig.default().with_overrides({"ccl_enabled": "maybe"})


def test_config_dict_round_trip(tmp_path):
    cfg = tiny(seed=3, beta=0.4)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert RunConfig.load(path) == cfg


# training loop

def test_total_loss_drops_over_50_steps(run50):
    _, _, result, _ = run50
    rows = result.rows
    assert len(rows) == 50
    # golden values from the seeded 50-step run
    assert rows[0]["total"] == pytest.approx(4.1462, abs=1e-3)
    assert rows[49]["total"] == pytest.approx(3.6530, abs=1e-2)
    assert rows[49]["total"] < rows[0]["total"]


def test_metrics_rows_satisfy_breakdown(run50):
    _, cfg, _, out = run50
    with open(out / "metrics.csv", newline="") as fh:
        assert tuple(next(csv.reader(fh))) == METRIC_COLUMNS
    rows = read_metrics(out / "metrics.csv")
    w = cfg.train
    for r in rows:
        assert all(math.isfinite(r[k]) for k in METRIC_COLUMNS)
        total_l = r["cls"] + r["inter"] + w.lambda_i * r["im"] + w.lambda_e * r["ex"] + w.lambda_p * r["ptc"]
        assert r["total_l"] == pytest.approx(total_l, rel=1e-5)
        assert r["total"] == pytest.approx(total_l + r["seg"] + r["reg"], rel=1e-5)
        if r["step"] < w.seg_start_iter:
            assert r["seg"] == 0.0 and r["reg"] == 0.0
        else:
            assert r["seg"] > 0.0
        assert r["lr"] == pytest.approx(lr_at(r["step"], w), rel=1e-12)


def test_replay_is_bitwise(run50, tmp_path):
    corpus, cfg, _, out = run50
    train(corpus, cfg, tmp_path)
    assert (tmp_path / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_bank_frozen_and_heads_move():
    cfg = tiny(iters=2)
    corpus = generate(cfg.corpus)
    before = build_model(cfg, corpus.class_names)
    after = train(corpus, cfg).model
    assert torch.equal(before.t_fg, after.t_fg) and torch.equal(before.t_bg, after.t_bg)
    for name in ("proj.visual_proj.weight", "proj.text_proj.weight", "W_final", "theta_inter"):
        assert not torch.equal(before.state_dict()[name], after.state_dict()[name]), name


def test_disabled_terms_are_exact_zero():
    cfg = tiny(iters=3, gia_enabled=False, lea_enabled=False, lambda_p=0)
    rows = train(generate(cfg.corpus), cfg).rows
    assert all(r["im"] == 0.0 and r["ex"] == 0.0 and r["ptc"] == 0.0 for r in rows)


def test_divergence_raises(monkeypatch):
    tr = sys.modules["densealign.harness.train"]

    real = tr.training_losses

    def poisoned(*a, **kw):
        out = real(*a, **kw)
        out.parts["ex"] = out.parts["ex"] * float("nan")
        return out

    monkeypatch.setattr(tr, "training_losses", poisoned)
    cfg = tiny(iters=2)
    with pytest.raises(TrainingDiverged) as info:
        train(generate(cfg.corpus), cfg)
    assert info.value.step == 0 and math.isnan(info.value.breakdown["ex"])


def test_ground_truth_masks_unused():
    cfg = tiny(iters=2)
    corpus = generate(cfg.corpus)
    ref = train(corpus, cfg).rows
    for s in corpus.train:
        s.gt_mask[:] = 0
    assert train(corpus, cfg).rows == ref


# checkpoints

def test_checkpoint_round_trip(run50):
    corpus, cfg, result, out = run50
    model, cfg2, manifest = load_checkpoint(out / "checkpoint")
    assert cfg2 == cfg and manifest["step"] == 50
    for k, v in result.model.state_dict().items():
        assert torch.equal(model.state_dict()[k], v), k
    a = evaluate(result.model, corpus.val).miou
    assert evaluate(model, corpus.val).miou == a


def test_zero_iteration_checkpoint_equals_init(tmp_path):
    cfg = tiny(iters=0)
    corpus = generate(cfg.corpus)
    train(corpus, cfg, tmp_path)
    model, _, _ = load_checkpoint(tmp_path / "checkpoint")
    init = build_model(cfg, corpus.class_names)
    for k, v in init.state_dict().items():
        assert torch.equal(model.state_dict()[k], v), k
    assert read_metrics(tmp_path / "metrics.csv") == []


# evaluation

def oracle_ious(pred, gt, K):
    out = []
    for k in range(K):
        inter = union = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            inter += (p == k) and (g == k)
            union += (p == k) or (g == k)
        out.append(inter / union if union else float("nan"))
    return out


def test_confusion_half_overlap_square():
    gt = np.zeros((8, 8), int)
    gt[0:4, 0:4] = 1
    pred = np.zeros((8, 8), int)
    pred[0:4, 2:6] = 1
    report = EvalReport.from_confusion(confusion(pred, gt, 2), "cam_pseudo")
    assert report.per_class_iou[1] == pytest.approx(1 / 3)
    np.testing.assert_allclose(report.per_class_iou, oracle_ious(pred, gt, 2))


def test_report_perfect_and_absent_classes():
    gt = np.array([[0, 1], [1, 0]])
    report = EvalReport.from_confusion(confusion(gt, gt, 4), "segmentation")
    assert report.miou == 1.0
    assert math.isnan(report.per_class_iou[2]) and report.to_json()["per_class_iou"][3] is None


def test_all_background_prediction_scores_zero_on_foreground():
    gt = np.array([[0, 2], [2, 2]])
    report = EvalReport.from_confusion(confusion(np.zeros_like(gt), gt, 3), "cam_pseudo")
    assert report.per_class_iou[2] == 0.0 and report.per_class_iou[0] == pytest.approx(1 / 4)


def test_evaluate_rejects_empty(run50):
    with pytest.raises(ValueError):
        evaluate(run50[2].model, [])


def test_evaluate_sources_in_range(run50):
    corpus, _, result, _ = run50
    for source in ("cam_pseudo", "segmentation"):
        r = evaluate(result.model, corpus.val, source)
        assert 0.0 <= r.miou <= 1.0 and r.confusion.sum() == len(corpus.val) * 64 * 64


# ablation bookkeeping

def test_ablation_grid_shape(tmp_path):
    seen = []

    def runner(corpus, cfg):
        t = cfg.train
        seen.append((t.gia_enabled, t.lea_enabled, t.ccl_enabled, t.seed))
        return 0.1 * t.seed + 0.5 * t.ccl_enabled

    cells = ablate(None, RunConfig.default(), seeds=(0, 1, 2), runner=runner)
    assert len(cells) == 6 and len(set(seen)) == 18
    assert [(c.method, c.ccl) for c in cells] == list(grid())
    path = write_table(cells, tmp_path / "a.csv")
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 6 and float(rows[-1]["mean_miou"]) == pytest.approx(0.6)
    assert Cell("GIA", True, [0.1, 0.3]).std == pytest.approx(0.1)


# command line

def test_cli_end_to_end(tmp_path):
    data = tmp_path / "data"
    small = ["--num_train=8", "--num_val=4"]
    main(["make-data", "--out-dir", str(data), "--seed", "2", *small])
    assert (data / "manifest.json").exists() and (data / "labels.csv").exists()

    bank = tmp_path / "bank" / "bank.json"
    bank.parent.mkdir()
    save_bank(build_bank(["disk", "square", "triangle"]), bank)

    run = tmp_path / "run"
    main(["train", "--data-dir", str(data), "--out-dir", str(run), "--seed", "1", "--iters=3",
          f"--bank_path={bank}"])
    report = json.loads((run / "eval.json").read_text())
    assert report["source"] == "cam_pseudo" and 0.0 <= report["miou"] <= 1.0
    assert (run / "metrics.csv").read_text().splitlines()[0] == ",".join(METRIC_COLUMNS)
    manifest = json.loads((run / "checkpoint" / "manifest.json").read_text())
    assert manifest["config"]["train"]["seed"] == 1
    assert all((run / "checkpoint" / t["file"]).exists() for t in manifest["tensors"].values())

    ev = tmp_path / "ev"
    main(["eval", "--checkpoint", str(run / "checkpoint"), "--data-dir", str(data), "--out-dir", str(ev),
          "--source", "segmentation"])
    assert json.loads((ev / "eval.json").read_text())["source"] == "segmentation"

    cams = tmp_path / "cams"
    main(["export-cams", "--checkpoint", str(run / "checkpoint"), "--data-dir", str(data),
          "--out-dir", str(cams), "--limit", "2"])
    assert (cams / "cams" / "val_0000_disk.png").exists()
    assert (cams / "labels" / "val_0001_pseudo.png").exists()
    assert (cams / "labels" / "val_0001_pred.png").exists()

    plots = tmp_path / "plots"
    main(["plot", "--checkpoint", str(run / "checkpoint"), "--data-dir", str(data), "--out-dir", str(plots)])
    main(["plot", "--kind", "losses", "--metrics", str(run / "metrics.csv"), "--out-dir", str(plots)])
    assert (plots / "losses.png").stat().st_size > 0
    assert any(p.name.startswith("similarity_") for p in plots.iterdir())


def test_cli_ablate(tmp_path):
    main(["ablate", "--out-dir", str(tmp_path), "--seeds", "0", "--num_train=8", "--num_val=4", "--iters=2"])
    rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    assert len(rows) == 6


def test_cli_rejects_malformed_override(tmp_path):
    with pytest.raises(SystemExit):
        main(["train", "--out-dir", str(tmp_path), "oops"])
