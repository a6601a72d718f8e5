"""Staged training: warp, then parse on frozen warp, then try-on on both frozen."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..adversarial import AdvMode, build_discriminator, discriminator_loss, generator_adv_loss
from ..dataset import SampleRecord, class_weights
from ..geometry import TpsError, WarpNet, apply_tps, tps_grid, warp_loss
from ..metrics import EmbeddingBackend, MetricReport, evaluate, merge_protocol
from ..parsing import ParseNet, one_hot_parse, parse_loss, pixel_accuracy
from ..synthesis import PerceptualExtractor, TryOnGenerator, tryon_loss
from .checkpoint import (STAGES, Checkpoint, CheckpointError, file_digest, load_checkpoint,
                         save_checkpoint, stage_path)
from .config import ExperimentConfig
from .data import TryOnSamples, iteration_loader

log = logging.getLogger(__name__)

ABLATION_MODES = (AdvMode.NONE, AdvMode.BINARY, AdvMode.PATCH, AdvMode.PSAD)


class NumericalError(RuntimeError):
    pass


class MissingPrerequisiteError(CheckpointError):
    pass


@dataclass
class StageResult:
    checkpoint: Path
    history: list[dict]
    trace: dict[str, list[float]] = field(default_factory=dict)

    @property
    def final_losses(self) -> dict[str, float]:
        return {k: v[-1] for k, v in self.trace.items() if v}


def build_warp(cfg: ExperimentConfig) -> WarpNet:
    return WarpNet(cfg.resolution, cfg.pose_channels, cfg.warp)


def build_parse(cfg: ExperimentConfig) -> ParseNet:
    return ParseNet(cfg.pose_channels, cfg.parse)


def build_tryon(cfg: ExperimentConfig) -> TryOnGenerator:
    return TryOnGenerator(cfg.pose_channels, cfg.tryon)


def load_frozen(stage: str, cfg: ExperimentConfig, ckpt_dir: str | Path) -> torch.nn.Module:
    path = stage_path(ckpt_dir, stage)
    if not path.exists():
        raise MissingPrerequisiteError(f"stage needs a trained {stage} checkpoint at {path}")
    net = {"warp": build_warp, "parse": build_parse}[stage](cfg)
    net.load_state_dict(load_checkpoint(path, stage).weights[stage])
    net.requires_grad_(False)
    return net.eval()


def _adam(params, cfg: ExperimentConfig, stage: str) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.schedule.lr_for(stage), betas=cfg.schedule.betas)


def _check_finite(losses: dict[str, torch.Tensor], stage: str, iteration: int, out_dir: Path,
                  batch: dict[str, torch.Tensor], reason: str | None = None) -> None:
    bad = [k for k, v in losses.items() if not torch.isfinite(v).all()]
    if not bad and reason is None:
        return
    snapshot = {
        "stage": stage, "iteration": iteration, "non_finite": bad, "reason": reason,
        "losses": {k: float(v) for k, v in losses.items()},
        "batch_stats": {k: {"min": float(v.min()), "max": float(v.max()), "finite": bool(torch.isfinite(v).all())}
                        for k, v in batch.items() if v.is_floating_point()},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "diagnostics.json"
    path.write_text(json.dumps(snapshot, indent=2))
    raise NumericalError(f"{stage} iteration {iteration}: {reason or 'non-finite ' + ', '.join(bad)} (see {path})")


class _Stage:
    """Per-stage networks, optimisers and a single step function."""

    def __init__(self, stage: str, cfg: ExperimentConfig, records: Sequence[SampleRecord],
                 adv_mode: AdvMode, prereq_dir: Path):
        self.stage, self.cfg, self.adv_mode = stage, cfg, adv_mode
        self.trainable: dict[str, torch.nn.Module] = {}
        self.optims: dict[str, torch.optim.Optimizer] = {}
        if stage == "warp":
            self.trainable["warp"] = build_warp(cfg)
        elif stage == "parse":
            self.warp = load_frozen("warp", cfg, prereq_dir)
            self.trainable["parse"] = build_parse(cfg)
        else:
            self.warp = load_frozen("warp", cfg, prereq_dir)
            load_frozen("parse", cfg, prereq_dir)  # must exist; inference-time component
            self.trainable["tryon"] = build_tryon(cfg)
            self.extractor = PerceptualExtractor(seed=cfg.perceptual_seed)
            disc = build_discriminator(adv_mode, cfg.psad, cfg.patch)
            if disc is not None:
                self.trainable["disc"] = disc
            self.weights = torch.from_numpy(class_weights(r.parse for r in records)).float()
        for name, net in self.trainable.items():
            self.optims[name] = _adam(net.parameters(), cfg, stage)

    def _theta(self, batch):
        with torch.no_grad():
            return self.warp(batch["garment"], batch["agnostic"], batch["pose"])

    def step(self, batch) -> dict[str, torch.Tensor]:
        if self.stage == "warp":
            net = self.trainable["warp"]
            theta = net(batch["garment"], batch["agnostic"], batch["pose"])
            warped = apply_tps(batch["garment"], tps_grid(theta, batch["garment"].shape[-2:]))
            total, parts = warp_loss(warped, batch["garment_target"], theta, self.cfg.schedule.lambda_const,
                                     return_parts=True)
            self._update("warp", total)
            return {"loss": total.detach(), **parts}
        if self.stage == "parse":
            theta = self._theta(batch)
            with torch.no_grad():
                warped = apply_tps(batch["garment"], tps_grid(theta, batch["garment"].shape[-2:]))
            logits = self.trainable["parse"](warped, batch["pose"], batch["masked_parse"])
            loss = parse_loss(logits, batch["parse"])
            self._update("parse", loss)
            acc = torch.tensor(pixel_accuracy(logits.detach(), batch["parse"]))
            return {"loss": loss.detach(), "ce": loss.detach(), "accuracy": acc}
        return self._tryon_step(batch)

    def _tryon_step(self, batch) -> dict[str, torch.Tensor]:
        gen = self.trainable["tryon"]
        theta = self._theta(batch)
        # ground-truth parse conditions the generator during training
        parse_onehot = one_hot_parse(batch["parse"])
        fake = gen(batch["garment"], batch["pose"], batch["agnostic"], parse_onehot, theta)
        real, labels = batch["image"], batch["parse"]
        out = {}
        disc = self.trainable.get("disc")
        if disc is not None:
            d_loss = discriminator_loss(self.adv_mode, disc, real, fake.detach(), labels, self.weights)
            self._update("disc", d_loss)
            out["d_loss"] = d_loss.detach()
            disc.requires_grad_(False)
            adv = generator_adv_loss(self.adv_mode, disc, fake, labels, self.weights)
            disc.requires_grad_(True)
        else:
            adv = None
        total, parts = tryon_loss(fake, real, adv, self.cfg.schedule.lambda_adv, self.extractor)
        self._update("tryon", total)
        return {"loss": total.detach(), **parts, **out}

    def _update(self, name: str, loss: torch.Tensor) -> None:
        if not torch.isfinite(loss):
            return  # reported by the caller before any weights are touched again
        opt = self.optims[name]
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()


def train_stage(stage: str, cfg: ExperimentConfig, records: Sequence[SampleRecord], ckpt_dir: str | Path,
                adv_mode: AdvMode | str = AdvMode.PSAD, prereq_dir: str | Path | None = None,
                resume: bool = False, until: int | None = None,
                on_log: Callable[[dict], None] | None = None) -> StageResult:
    """Train one stage to ``cfg.schedule`` iterations (or ``until``) and write its checkpoint.

    Later stages read frozen earlier-stage checkpoints from ``prereq_dir``
    (default ``ckpt_dir``). With ``resume`` the stage checkpoint in ``ckpt_dir``
    restores weights, optimiser state and the iteration counter.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if len(records) == 0:
        raise ValueError("no training records")
    adv_mode = AdvMode(adv_mode)
    ckpt_dir = Path(ckpt_dir)
    prereq_dir = Path(prereq_dir) if prereq_dir is not None else ckpt_dir
    sched = cfg.schedule
    total_iters = sched.iters(stage) if until is None else until
    out_path = stage_path(ckpt_dir, stage)

    torch.manual_seed(sched.seed)
    state = _Stage(stage, cfg, records, adv_mode, prereq_dir)
    start, history, trace = 0, [], {}
    if resume and out_path.exists():
        ckpt = load_checkpoint(out_path, stage)
        if ckpt.extra.get("adv_mode", adv_mode.value) != adv_mode.value:
            raise CheckpointError(f"{out_path} was trained with adv_mode={ckpt.extra['adv_mode']}")
        for name, net in state.trainable.items():
            net.load_state_dict(ckpt.weights[name])
            state.optims[name].load_state_dict(ckpt.optimizers[name])
        start, history, trace = ckpt.iteration, ckpt.history, ckpt.extra.get("trace", {})

    samples = TryOnSamples(records, cfg.pose_mode, cfg.dilation_radius)
    loader = iteration_loader(samples, sched.batch_size, start, total_iters, sched.seed, sched.num_workers)
    for net in state.trainable.values():
        net.train()

    def snapshot(iteration: int) -> Checkpoint:
        return Checkpoint(stage=stage, iteration=iteration,
                          weights={k: v.state_dict() for k, v in state.trainable.items()},
                          optimizers={k: v.state_dict() for k, v in state.optims.items()},
                          config=cfg.to_dict(), seed=sched.seed, history=history,
                          extra={"adv_mode": adv_mode.value, "trace": trace})

    window: dict[str, list[float]] = {}
    t0 = time.perf_counter()
    for iteration, batch in enumerate(loader, start=start):
        try:
            losses = state.step(batch)
        except TpsError as err:
            _check_finite({}, stage, iteration, ckpt_dir, batch, reason=str(err)[:200])
        _check_finite(losses, stage, iteration, ckpt_dir, batch)
        for k, v in losses.items():
            trace.setdefault(k, []).append(float(v))
            window.setdefault(k, []).append(float(v))
        done = iteration + 1
        if done % sched.log_every == 0 or done == total_iters:
            entry = {"iteration": done, "seconds": round(time.perf_counter() - t0, 3),
                     **{k: float(np.mean(v)) for k, v in window.items()}}
            history.append(entry)
            window = {}
            log.info("%s %d/%d %s", stage, done, total_iters,
                     " ".join(f"{k}={v:.4f}" for k, v in entry.items() if k not in ("iteration", "seconds")))
            if on_log:
                on_log(entry)
        if sched.checkpoint_every and done % sched.checkpoint_every == 0 and done < total_iters:
            save_checkpoint(snapshot(done), out_path)
    final_iter = max(start, total_iters)
    save_checkpoint(snapshot(final_iter), out_path)
    return StageResult(checkpoint=out_path, history=history, trace=trace)


def train_all(cfg: ExperimentConfig, records: Sequence[SampleRecord], ckpt_dir: str | Path,
              adv_mode: AdvMode | str = AdvMode.PSAD) -> dict[str, StageResult]:
    return {stage: train_stage(stage, cfg, records, ckpt_dir, adv_mode) for stage in STAGES}


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationResult:
    reports: dict[str, MetricReport]
    shared_digests: dict[str, str]
    stage_results: dict[str, StageResult]

    def table(self, row: str = "all") -> str:
        cols = ("SSIM", "FID", "KID", "IS")
        lines = [f"{'mode':10s}" + "".join(f"{c:>10s}" for c in cols)]
        for mode, report in self.reports.items():
            r = report.rows.get(row)
            vals = (r.ssim, r.fid, r.kid, r.inception_score) if r else (None,) * 4
            lines.append(f"{mode:10s}" + "".join(f"{'-':>10s}" if v is None else f"{v:10.4f}" for v in vals))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"modes": {m: r.to_dict() for m, r in self.reports.items()},
                "shared_digests": self.shared_digests}


def ablate(records: Sequence[SampleRecord], cfg: ExperimentConfig, out_dir: str | Path,
           modes: Sequence[AdvMode | str] = ABLATION_MODES, eval_records: Sequence[SampleRecord] | None = None,
           backend: EmbeddingBackend | None = None) -> AblationResult:
    """Train warp and parse once, then one try-on stage per adversarial mode on top of
    the same frozen checkpoints, and score each with the paired/unpaired protocol."""
    from .inference import load_bundle

    out_dir = Path(out_dir)
    shared = out_dir / "shared"
    results: dict[str, StageResult] = {}
    for stage in ("warp", "parse"):
        if not stage_path(shared, stage).exists():
            results[stage] = train_stage(stage, cfg, records, shared)
    digests = {s: file_digest(stage_path(shared, s)) for s in ("warp", "parse")}
    eval_records = records if eval_records is None else eval_records
    reports = {}
    for mode in modes:
        mode = AdvMode(mode)
        mode_dir = out_dir / mode.value
        results[mode.value] = train_stage("tryon", cfg, records, mode_dir, mode, prereq_dir=shared)
        now = {s: file_digest(stage_path(shared, s)) for s in ("warp", "parse")}
        if now != digests:
            raise RuntimeError(f"shared checkpoints changed while training mode {mode.value}")
        bundle = load_bundle(shared, stage_path(mode_dir, "tryon"))
        paired = evaluate(bundle, eval_records, "paired", backend)
        unpaired = evaluate(bundle, eval_records, "unpaired", backend)
        reports[mode.value] = merge_protocol(paired, unpaired, label=mode.value)
    result = AblationResult(reports, digests, results)
    (out_dir / "ablation.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    (out_dir / "ablation.txt").write_text(result.table() + "\n")
    return result
