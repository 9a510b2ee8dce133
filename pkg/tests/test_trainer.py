import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from apl_seg.data import ConfigError, Sample
from apl_seg.trainer import (
    MODES, TrainConfig, Trainer, TrainingAborted, lr_at, mode_from_pace, run_ablation, train,
)

SMALL = dict(total_iterations=6, warmup_iterations=2, batch_labeled=2, batch_unlabeled=2, image_size=32,
             predictor_width=4, predictor_depth=3, pace_width=4, log_every=1, lr_predictor=2.5e-5)


def small_cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


def snapshot(module):
    return [p.detach().clone() for p in module.parameters()]


def unchanged(module, snap):
    return all(torch.equal(p, q) for p, q in zip(module.parameters(), snap))


def test_lr_schedule_values():
    assert lr_at(0, 2.5e-4, 24500) == 2.5e-4
    assert lr_at(12250, 2.5e-4, 24500) == pytest.approx(2.5e-4 * 0.5358867312681466, rel=1e-12)
    assert lr_at(24500, 2.5e-4, 24500) == 0.0
    with pytest.raises(ValueError):
        lr_at(24501, 2.5e-4, 24500)


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.total_iterations, c.warmup_iterations, c.beta, c.eta) == (24500, 2000, 0.01, 0.7)
    assert (c.lr_predictor, c.lr_pace, c.momentum, c.weight_decay, c.power) == (2.5e-4, 1e-4, 0.9, 5e-4, 0.9)
    for bad in ({"beta": -1}, {"warmup_iterations": 10, "total_iterations": 5}, {"mode": "magic"},
                {"lr_predictor": 0}, {"refresh": "sometimes"}, {"mode": "spl:unknown"}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    assert TrainConfig.from_dict({"beta": 0.5}).beta == 0.5
    assert TrainConfig(mode="spl:linear_soft").mode == "spl:linear_soft"


def test_mode_from_pace():
    assert mode_from_pace("apl") == "full"
    assert mode_from_pace("pixelgan") == "pixel_gan"
    assert mode_from_pace("none") == "no_pace_loss"
    assert mode_from_pace("spl:hard_l1") == "spl:hard_l1"
    with pytest.raises(ConfigError):
        mode_from_pace("spl:nope")


def test_optimizer_types(tiny_split):
    tr = Trainer(small_cfg(), *tiny_split)
    assert isinstance(tr.opt_predictor, torch.optim.SGD)
    assert tr.opt_predictor.defaults["momentum"] == 0.9 and tr.opt_predictor.defaults["weight_decay"] == 5e-4
    assert isinstance(tr.opt_gsm, torch.optim.Adam) and isinstance(tr.opt_pw, torch.optim.Adam)
    gsm = {id(p) for g in tr.opt_gsm.param_groups for p in g["params"]}
    pw = {id(p) for g in tr.opt_pw.param_groups for p in g["params"]}
    assert gsm == {id(p) for p in tr.pace.gsm.parameters()}
    assert pw == {id(p) for p in tr.pace.pw.parameters()}


def test_warmup_leaves_pw_branch_alone(tiny_split):
    tr = Trainer(small_cfg(), *tiny_split)
    pw, gsm, pred = snapshot(tr.pace.pw), snapshot(tr.pace.gsm), snapshot(tr.predictor)
    recs = tr.warmup()
    assert [r["phase"] for r in recs] == ["warmup", "warmup"]
    assert unchanged(tr.pace.pw, pw)
    assert not unchanged(tr.pace.gsm, gsm) and not unchanged(tr.predictor, pred)
    assert tr.unlabeled_draws == 0


def test_alternation_freezes_the_right_parameters(tiny_split):
    tr = Trainer(small_cfg(), *tiny_split)
    tr.warmup()
    x_l, y_l = tr.labeled_batch()
    x_u, pseudo, weight, pred_u = tr.infer_step(tr.unlabeled_batch())
    assert not pseudo.requires_grad and not weight.requires_grad and not pred_u.requires_grad
    assert set(torch.unique(pseudo).tolist()) <= {0.0, 1.0}

    pred, pw, gsm = snapshot(tr.predictor), snapshot(tr.pace.pw), snapshot(tr.pace.gsm)
    tr.update_pace(x_l, y_l, x_u, pred_u)
    assert unchanged(tr.predictor, pred) and unchanged(tr.pace.pw, pw)
    assert not unchanged(tr.pace.gsm, gsm)

    gsm = snapshot(tr.pace.gsm)
    tr.update_predictor(x_l, y_l, x_u, pseudo, weight)
    assert unchanged(tr.pace.gsm, gsm)
    assert not unchanged(tr.predictor, pred) and not unchanged(tr.pace.pw, pw)
    assert all(p.requires_grad for p in tr.pace.parameters())


def test_pseudo_labels_binarize_current_prediction(tiny_split):
    tr = Trainer(small_cfg(), *tiny_split)
    idx = torch.tensor([0, 1])
    x_u, pseudo, weight, pred = tr.infer_step(idx)
    assert torch.equal(pseudo, (tr.predictor(x_u) >= 0.5).float())
    assert torch.equal(weight, tr.pace.weigh(pred))


def test_only_labeled_never_reads_unlabeled(tiny_split):
    tr = Trainer(small_cfg(mode="only_labeled"), *tiny_split)
    tr.train()
    assert tr.unlabeled_draws == 0 and tr.pace is None


def test_no_pace_loss_uses_unit_weights(tiny_split):
    tr = Trainer(small_cfg(mode="no_pace_loss"), *tiny_split)
    tr.warmup()
    _, _, weight, _ = tr.infer_step(tr.unlabeled_batch())
    assert torch.equal(weight, torch.ones_like(weight))
    recs = [tr.step() for _ in range(2)]
    assert all("loss_adv" not in r and r["mean_v"] == 1.0 for r in recs)


@pytest.mark.parametrize("mode", [m for m in MODES] + ["spl:hard_l1", "spl:l21_group", "spl:fraction"])
def test_every_mode_runs(tiny_split, mode):
    tr, res = train(small_cfg(mode=mode), *tiny_split)
    assert tr.iteration == 6
    assert res.log[-1]["phase"] == "end"
    main = [r for r in res.log if r.get("phase") == "main"]
    assert len(main) == 4
    assert all(np.isfinite(r["loss_total"]) for r in main)


def test_epoch_refresh_reuses_cache(tiny_split):
    tr = Trainer(small_cfg(refresh="epoch"), *tiny_split)
    tr.warmup()
    a = tr.infer_step(torch.tensor([0, 1]))
    cache = tr._cache
    b = tr.infer_step(torch.tensor([0, 1]))
    assert tr._cache is cache and torch.equal(a[2], b[2])


def test_spl_lambda_set_after_warmup_and_grows(tiny_split):
    lab, unl = tiny_split
    tr = Trainer(small_cfg(mode="spl:linear_soft", total_iterations=20, batch_unlabeled=8), lab, unl)
    tr.warmup()
    tr.step()
    lam0 = tr.spl.lam
    assert lam0 != 1.0
    while tr.iteration < 20:
        tr.step()
    assert tr.spl.lam > lam0  # 16 unlabeled samples, 8 per draw: several epochs


def test_non_finite_loss_aborts_and_dumps(tmp_path, tiny_split):
    lab, unl = tiny_split
    bad = [Sample(np.full_like(s.image, np.nan), s.mask, s.id) for s in lab]
    with pytest.raises(TrainingAborted):
        train(small_cfg(), bad, unl, run_dir=tmp_path)
    assert list(tmp_path.glob("abort_batch_*.pt"))


def test_needs_labeled_data():
    with pytest.raises(ConfigError):
        Trainer(small_cfg(), [])


def test_metrics_log_and_checkpoints(tmp_path, tiny_split):
    lab, unl = tiny_split
    _, res = train(small_cfg(ckpt_every=3), lab, unl, val=lab[:2], run_dir=tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in lines[:6]] == list(range(6))
    assert lines[6] == {"iter": 6, "phase": "end", "lr_gsm": 0.0, "lr_pace": 0.0, "lr_predictor": 0.0}
    assert "final" in lines[-1] and 0 <= lines[-1]["final"]["max_f"] <= 1
    assert [p.name for p in res.checkpoints] == ["ckpt_3.pt", "ckpt_6.pt"]
    ck = torch.load(res.checkpoints[-1], weights_only=False)
    assert {"predictor", "pace", "train_config", "iteration"} <= set(ck)


def test_same_seed_same_log(tmp_path, tiny_split):
    lab, unl = tiny_split
    cfg = small_cfg(deterministic=True)
    train(cfg, lab, unl, run_dir=tmp_path / "a")
    train(cfg, lab, unl, run_dir=tmp_path / "b")
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    train(replace(cfg, seed=2), lab, unl, run_dir=tmp_path / "c")
    assert (tmp_path / "a/metrics.jsonl").read_bytes() != (tmp_path / "c/metrics.jsonl").read_bytes()


def test_run_ablation_report(tiny_split):
    lab, unl = tiny_split
    r = run_ablation("only_labeled", small_cfg(), lab, unl, lab[:3])
    assert r.extra == {"mode": "only_labeled", "unlabeled_draws": 0}
    assert r.n_images == 3
