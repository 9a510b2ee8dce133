"""Adversarial-paced training: labeled-only GAN warmup, then per-iteration
pseudo-label / reliability inference followed by a pace (GSM) ascent step and
a joint predictor + PW descent step. Also hosts the ablation baselines."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses as L
from .data import ConfigError, Sample
from .evaluation import EvalReport, audit_model, evaluate
from .pace import PaceConfig, PaceGenerator, PixelDiscriminator, real_probability
from .predictor import PredictorConfig, TaskPredictor, binarize, images_to_tensor
from .spl import KINDS as SPL_KINDS, SplScheme, initial_lambda, spl_pace_step

log = logging.getLogger(__name__)

MODES = ("full", "only_labeled", "no_pace_loss", "pixel_gan", "no_vstar")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_iterations: int = 24500
    warmup_iterations: int = 2000
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    lr_predictor: float = 2.5e-4
    lr_pace: float = 1e-4
    lr_gsm: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    beta: float = 0.01
    eta: float = 0.7
    eps: float = 1e-7
    mode: str = "full"
    non_saturating: bool = False
    refresh: str = "iteration"
    seed: int = 1
    image_size: int = 128
    backbone: str = "desk_small"
    predictor_width: int = 16
    predictor_depth: int = 5
    pretrained: bool = False
    pace_width: int = 64
    spl_growth: float = 1.1
    log_every: int = 50
    ckpt_every: int = 0
    eval_every: int = 0
    deterministic: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be positive")
        if not 0 <= self.warmup_iterations < self.total_iterations:
            raise ConfigError("need 0 <= warmup_iterations < total_iterations")
        if min(self.lr_predictor, self.lr_pace, self.lr_gsm) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.beta < 0 or self.eta < 0:
            raise ConfigError("beta and eta must be nonnegative")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be positive")
        if self.refresh not in ("iteration", "epoch"):
            raise ConfigError("refresh must be 'iteration' or 'epoch'")
        if self.mode not in MODES and not (self.mode.startswith("spl:") and self.mode[4:] in SPL_KINDS):
            raise ConfigError(f"unknown mode {self.mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# CPU-sized settings for 64×64 synthetic data. The loss sums over pixels, so
# the step size is smaller than the one suited to a pretrained deep backbone.
# The pace-generator runs at half width so a three-seed ablation fits in an hour
# on one core, and the PW branch gets a larger step: with ~1.5k main iterations
# at 1e-4 its map never becomes informative.
DESK_OVERRIDES = dict(total_iterations=2000, warmup_iterations=500, image_size=64, lr_predictor=2.5e-5,
                      pace_width=32, lr_pace=1e-3)


def desk_config(**kw) -> TrainConfig:
    return TrainConfig(**{**DESK_OVERRIDES, **kw})


def lr_at(step: int, base_lr: float, total: int, power: float = 0.9) -> float:
    """Polynomial decay: base_lr * (1 - step / total) ** power."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return base_lr * (1 - step / total) ** power


def select_device() -> torch.device:
    return torch.device(os.environ.get("APL_SEG_DEVICE", "cpu"))


class _Cycler:
    """Endless shuffled index stream; reshuffles at every epoch boundary."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order, self.pos, self.epoch = rng.permutation(n), 0, 0

    def take(self, k: int) -> tuple[np.ndarray, bool]:
        out, wrapped = [], False
        while len(out) < k:
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
                self.epoch += 1
                wrapped = True
            step = min(k - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + step])
            self.pos += step
        return np.asarray(out), wrapped


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    report: EvalReport | None = None
    checkpoints: list = field(default_factory=list)


class Trainer:
    """Owns the three parameter sets and their optimizers.

    predictor -> SGD (momentum, weight decay); GSM and PW branches -> Adam.
    Every stage reads frozen copies of the parameter sets it does not update.
    """

    def __init__(self, cfg: TrainConfig, labeled: Sequence[Sample], unlabeled: Sequence[Sample] = (),
                 val: Sequence[Sample] | None = None, run_dir: str | Path | None = None,
                 device=None, dtype=torch.float32):
        cfg.validate()
        if not labeled:
            raise ConfigError("training needs at least one labeled sample")
        self.cfg = cfg
        self.device = torch.device(device) if device is not None else select_device()
        self.dtype = dtype
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.val = list(val) if val else []
        if cfg.deterministic:
            torch.set_num_threads(1)
            torch.use_deterministic_algorithms(True)

        self.mode = cfg.mode
        self.uses_unlabeled = self.mode != "only_labeled" and len(unlabeled) > 0
        self.adversarial = self.mode in ("full", "pixel_gan", "no_vstar") and cfg.beta > 0

        self.x_l = images_to_tensor([s.image for s in labeled], self.device, dtype)
        self.y_l = torch.as_tensor(np.stack([s.mask for s in labeled]), dtype=dtype, device=self.device)
        self.unlabeled = list(unlabeled)
        self.x_u = (images_to_tensor([s.image for s in unlabeled], self.device, dtype)
                    if unlabeled else None)
        self.unlabeled_draws = 0

        self.predictor = TaskPredictor(PredictorConfig(
            cfg.backbone, cfg.image_size, cfg.seed, cfg.predictor_width, cfg.predictor_depth,
            cfg.pretrained)).to(self.device, dtype)
        pcfg = PaceConfig(cfg.image_size, cfg.pace_width, seed=cfg.seed + 1)
        self.pace = None
        if self.mode == "pixel_gan":
            self.pace = PixelDiscriminator(pcfg).to(self.device, dtype)
        elif self.mode in ("full", "no_vstar"):
            self.pace = PaceGenerator(pcfg).to(self.device, dtype)

        self.opt_predictor = torch.optim.SGD(self.predictor.parameters(), lr=cfg.lr_predictor,
                                             momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        self.opt_gsm = self.opt_pw = None
        if isinstance(self.pace, PaceGenerator):
            self.opt_gsm = torch.optim.Adam(self.pace.gsm.parameters(), lr=cfg.lr_gsm)
            self.opt_pw = torch.optim.Adam(self.pace.pw.parameters(), lr=cfg.lr_pace)
        elif isinstance(self.pace, PixelDiscriminator):
            self.opt_gsm = torch.optim.Adam(self.pace.parameters(), lr=cfg.lr_gsm)

        self.spl = None
        if self.mode.startswith("spl:"):
            # lam is set from the pseudo-label losses once warmup ends
            self.spl = SplScheme(self.mode[4:], lam=1.0, growth=cfg.spl_growth)

        rng = np.random.default_rng(cfg.seed)
        self._lab = _Cycler(len(labeled), rng)
        self._unl = _Cycler(len(unlabeled), rng) if unlabeled else None
        self._cache = None  # epoch-refresh pseudo-labels / weights
        self.iteration = 0

    # -- helpers --------------------------------------------------------

    def lrs(self, step: int) -> dict:
        c = self.cfg
        return {"lr_predictor": lr_at(step, c.lr_predictor, c.total_iterations, c.power),
                "lr_gsm": lr_at(step, c.lr_gsm, c.total_iterations, c.power),
                "lr_pace": lr_at(step, c.lr_pace, c.total_iterations, c.power)}

    def _apply_lrs(self, lrs: dict):
        _set_lr(self.opt_predictor, lrs["lr_predictor"])
        if self.opt_gsm is not None:
            _set_lr(self.opt_gsm, lrs["lr_gsm"])
        if self.opt_pw is not None:
            _set_lr(self.opt_pw, lrs["lr_pace"])

    def labeled_batch(self):
        idx, _ = self._lab.take(self.cfg.batch_labeled)
        idx = torch.as_tensor(idx, device=self.device)
        return self.x_l[idx], self.y_l[idx]

    def unlabeled_batch(self):
        idx, wrapped = self._unl.take(self.cfg.batch_unlabeled)
        self.unlabeled_draws += 1
        if wrapped and self.spl is not None:
            self.spl = self.spl.grown()
        if wrapped:
            self._cache = None  # epoch refresh recomputes lazily
        return torch.as_tensor(idx, device=self.device)

    def _real(self, masks):
        """'Annotated' probability: per mask (GSM) or per pixel (pixel GAN)."""
        if isinstance(self.pace, PaceGenerator):
            return real_probability(self.pace.gsm_forward(masks).logits)
        return self.pace(masks)

    def _check_finite(self, stats: dict, batch: dict):
        bad = [k for k, v in stats.items() if isinstance(v, float) and not np.isfinite(v)]
        if not bad:
            return
        msg = f"non-finite {bad} at iteration {self.iteration}"
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            torch.save({k: v.detach().cpu() for k, v in batch.items() if v is not None},
                       self.run_dir / f"abort_batch_{self.iteration}.pt")
            msg += f"; batch dumped to {self.run_dir}"
        raise TrainingAborted(msg)

    # -- stages -----------------------------------------------------------

    def warmup_step(self, x_l, y_l) -> dict:
        """One two-stage step of the labeled-only GAN objective.

        Stage 1 ascends the GSM on log P(gt) + log(1 - P(pred)); stage 2
        descends the predictor on L_l + beta * log(1 - P(pred)). Modes without
        a pace-generator just take the supervised step.
        """
        stats = {}
        if self.adversarial:
            with torch.no_grad():
                pred = self.predictor(x_l)
            _requires_grad(self.pace, True)
            self.opt_gsm.zero_grad(set_to_none=True)
            lpg = L.pace_adversarial_loss(self._real(y_l), self._real(pred), eps=self.cfg.eps)
            (-lpg).backward()
            self.opt_gsm.step()
            stats["loss_pg"] = lpg.item()

        self.opt_predictor.zero_grad(set_to_none=True)
        pred = self.predictor(x_l)
        ll = L.labeled_loss(pred, y_l, self.cfg.eps)
        adv = None
        if self.adversarial:
            _requires_grad(self.pace, False)
            adv = L.predictor_adversarial_loss(self._real(pred), eps=self.cfg.eps,
                                               non_saturating=self.cfg.non_saturating)
            stats["loss_adv"] = adv.item()
        total = L.total_predictor_objective(ll, adversarial=adv, beta=self.cfg.beta)
        total.backward()
        self.opt_predictor.step()
        if self.pace is not None:
            _requires_grad(self.pace, True)
        stats["loss_l"] = ll.item()
        self._check_finite(stats, {"x_l": x_l, "y_l": y_l})
        return stats

    @torch.no_grad()
    def _infer(self, x_u):
        pred = self.predictor(x_u)
        pseudo = binarize(pred, 0.5)
        if self.mode in ("full", "no_vstar", "pixel_gan"):
            weight = self.pace.weigh(pred)
        elif self.spl is not None:
            per_pixel = L.bce_map(pred, pseudo, self.cfg.eps).cpu().numpy()
            weight = torch.as_tensor(spl_pace_step(per_pixel, self.spl), dtype=pred.dtype, device=pred.device)
        else:
            weight = torch.ones_like(pred)
        return pred, pseudo, weight

    def infer_step(self, idx_u):
        """Fresh pseudo-labels and detached reliability weights for a batch of
        unlabeled indices, from the current (frozen) networks."""
        if self.cfg.refresh == "epoch":
            if self._cache is None:
                self._cache = self._infer(self.x_u)
            pred, pseudo, weight = (t[idx_u] for t in self._cache)
            return self.x_u[idx_u], pseudo, weight, pred
        x_u = self.x_u[idx_u]
        pred, pseudo, weight = self._infer(x_u)
        return x_u, pseudo, weight, pred

    def update_pace(self, x_l, y_l, x_u=None, pred_u=None) -> dict:
        """Ascent step on the GSM objective with the predictor frozen."""
        with torch.no_grad():
            pred_l = self.predictor(x_l)
            if x_u is not None and pred_u is None:
                pred_u = self.predictor(x_u)
        _requires_grad(self.pace, True)
        self.opt_gsm.zero_grad(set_to_none=True)
        real_u = self._real(pred_u) if pred_u is not None else None
        lpg = L.pace_adversarial_loss(self._real(y_l), self._real(pred_l), real_u,
                                      eta=self.cfg.eta, eps=self.cfg.eps)
        (-lpg).backward()
        self.opt_gsm.step()
        # leave no stale gradients for the predictor stage to trip over
        self.opt_gsm.zero_grad(set_to_none=True)
        if self.opt_pw is not None:
            self.opt_pw.zero_grad(set_to_none=True)
        return {"loss_pg": lpg.item()}

    def update_predictor(self, x_l, y_l, x_u=None, pseudo=None, weight=None) -> dict:
        """Joint descent on the predictor and PW branch with the GSM frozen.

        ``pseudo`` and ``weight`` are constants from :meth:`infer_step`.
        """
        c = self.cfg
        stats = {}
        self.opt_predictor.zero_grad(set_to_none=True)
        if self.opt_pw is not None:
            self.opt_pw.zero_grad(set_to_none=True)
        if isinstance(self.pace, PaceGenerator):
            _requires_grad(self.pace.gsm, False)
        elif self.pace is not None:
            _requires_grad(self.pace, False)

        pred_l = self.predictor(x_l)
        ll = L.labeled_loss(pred_l, y_l, c.eps)
        lu = pred_u = None
        if x_u is not None:
            pred_u = self.predictor(x_u)
            lu = L.unlabeled_loss(pred_u, pseudo, weight, c.eps)
            stats["loss_u"] = lu.item()
            stats["mean_v"] = weight.mean().item()

        adv = None
        if self.adversarial:
            adv = L.predictor_adversarial_loss(self._real(pred_l), self._real(pred_u) if pred_u is not None else None,
                                               eta=c.eta, eps=c.eps, non_saturating=c.non_saturating)
            stats["loss_adv"] = adv.item()

        lpw = None
        if isinstance(self.pace, PaceGenerator) and self.adversarial:
            lpw = self._pw_loss(pred_l.detach(), y_l)
            stats["loss_pw"] = lpw.item()

        total = L.total_predictor_objective(ll, lu, adv, lpw, c.beta)
        total.backward()
        self.opt_predictor.step()
        if self.opt_pw is not None and lpw is not None:
            self.opt_pw.step()
        if self.pace is not None:
            _requires_grad(self.pace, True)
        stats["loss_l"] = ll.item()
        stats["loss_total"] = total.item()
        return stats

    def _pw_loss(self, pred_l, y_l):
        """PW supervision: the reliability target on predicted labeled masks
        (``full``), or all-real / all-fake targets (``no_vstar``)."""
        with torch.no_grad():
            feats = self.pace.gsm_forward(pred_l).features
        out = self.pace.pw_forward(feats)
        if self.mode != "no_vstar":
            return L.pixel_weight_loss(out, L.reliability_target(pred_l, y_l), self.cfg.eps)
        with torch.no_grad():
            feats_gt = self.pace.gsm_forward(y_l).features
        out_gt = self.pace.pw_forward(feats_gt)
        return (L.pixel_weight_loss(out, torch.zeros_like(out), self.cfg.eps)
                + L.pixel_weight_loss(out_gt, torch.ones_like(out_gt), self.cfg.eps))

    def _start_spl(self):
        with torch.no_grad():
            per_pixel = []
            for i in range(0, len(self.unlabeled), 64):
                pred = self.predictor(self.x_u[i:i + 64])
                per_pixel.append(L.bce_map(pred, binarize(pred), self.cfg.eps).cpu().numpy())
        self.spl = replace(self.spl, lam=initial_lambda(np.concatenate(per_pixel)))

    def step(self) -> dict:
        """Run iteration ``self.iteration`` and advance."""
        it = self.iteration
        lrs = self.lrs(it)
        self._apply_lrs(lrs)
        x_l, y_l = self.labeled_batch()
        if it < self.cfg.warmup_iterations:
            stats = {"phase": "warmup", **self.warmup_step(x_l, y_l)}
        else:
            if it == self.cfg.warmup_iterations and self.spl is not None and self.uses_unlabeled:
                self._start_spl()
            x_u = pseudo = weight = pred_u = None
            if self.uses_unlabeled:
                x_u, pseudo, weight, pred_u = self.infer_step(self.unlabeled_batch())
            stats = {"phase": "main"}
            if self.adversarial:
                stats.update(self.update_pace(x_l, y_l, x_u, pred_u))
            stats.update(self.update_predictor(x_l, y_l, x_u, pseudo, weight))
            self._check_finite(stats, {"x_l": x_l, "y_l": y_l, "x_u": x_u, "pseudo": pseudo, "weight": weight})
        self.iteration += 1
        return {"iter": it, **stats, **lrs}

    def warmup(self) -> list:
        """Run all remaining warmup iterations; returns their log records."""
        out = []
        while self.iteration < self.cfg.warmup_iterations:
            out.append(self.step())
        return out

    # -- persistence ------------------------------------------------------

    def state(self) -> dict:
        d = {"iteration": self.iteration, "train_config": asdict(self.cfg),
             "predictor_config": asdict(self.predictor.cfg), "predictor": self.predictor.state_dict()}
        if self.pace is not None:
            d.update(pace_config=asdict(self.pace.cfg), pace_kind=type(self.pace).__name__,
                     pace=self.pace.state_dict())
        return d

    def save_checkpoint(self) -> Path:
        path = self.run_dir / f"ckpt_{self.iteration}.pt"
        torch.save(self.state(), path)
        return path

    # -- full run ---------------------------------------------------------

    def train(self) -> TrainResult:
        c = self.cfg
        result = TrainResult()
        metrics = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            metrics = open(self.run_dir / "metrics.jsonl", "w")

        def emit(rec):
            result.log.append(rec)
            if metrics is not None:
                metrics.write(json.dumps(rec, sort_keys=True) + "\n")

        try:
            while self.iteration < c.total_iterations:
                rec = self.step()
                it = rec["iter"]
                if c.eval_every and (it + 1) % c.eval_every == 0 and self.val:
                    r = evaluate(self.predictor, self.val)
                    rec.update(val_max_f=r.max_f, val_mae=r.mae)
                if self.uses_unlabeled and c.eval_every and (it + 1) % c.eval_every == 0:
                    acc, iou = audit_model(self.predictor, self.unlabeled)
                    rec.update(pseudo_acc=acc, pseudo_iou=iou)
                if it % c.log_every == 0 or "val_max_f" in rec:
                    emit(rec)
                if self.run_dir is not None and c.ckpt_every and self.iteration % c.ckpt_every == 0:
                    result.checkpoints.append(self.save_checkpoint())
            emit({"iter": self.iteration, "phase": "end", **self.lrs(self.iteration)})
            if self.run_dir is not None and (not result.checkpoints
                                             or result.checkpoints[-1].name != f"ckpt_{self.iteration}.pt"):
                result.checkpoints.append(self.save_checkpoint())
            if self.val:
                result.report = evaluate(self.predictor, self.val)
                emit({"final": result.report.to_dict(arrays=False)})
        finally:
            if metrics is not None:
                metrics.close()
        return result


def train(cfg: TrainConfig, labeled, unlabeled=(), val=None, run_dir=None, **kw) -> tuple[Trainer, TrainResult]:
    trainer = Trainer(cfg, labeled, unlabeled, val, run_dir, **kw)
    return trainer, trainer.train()


def mode_from_pace(pace: str) -> str:
    """Map a ``--pace`` value onto a training mode."""
    table = {"apl": "full", "pixelgan": "pixel_gan", "none": "no_pace_loss"}
    if pace in table:
        return table[pace]
    if pace.startswith("spl:") and pace[4:] in SPL_KINDS:
        return pace
    raise ConfigError(f"unknown pace {pace!r}")


def run_ablation(mode: str, cfg: TrainConfig, labeled, unlabeled, test, run_dir=None) -> EvalReport:
    """Train ``cfg`` under ``mode`` and evaluate on ``test``."""
    cfg = replace(cfg, mode=mode)
    trainer, _ = train(cfg, labeled, unlabeled, run_dir=run_dir)
    report = evaluate(trainer.predictor, test)
    report.extra["mode"] = mode
    report.extra["unlabeled_draws"] = trainer.unlabeled_draws
    return report
