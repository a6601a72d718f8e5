"""Inference: one try-on, and upper-then-lower multi-garment composition."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..dataset import GarmentCategory, SampleRecord
from ..geometry import WarpNet, apply_tps, tps_grid
from ..parsing import ParseNet, one_hot_parse
from ..synthesis import TryOnGenerator
from .checkpoint import load_checkpoint, stage_path
from .config import ExperimentConfig
from .data import record_tensors
from .train import build_parse, build_tryon, build_warp


class UntrainedBundleError(RuntimeError):
    pass


@dataclass
class GeneratorBundle:
    config: ExperimentConfig
    warp: WarpNet
    parse: ParseNet
    tryon: TryOnGenerator
    stages: set[str] = field(default_factory=set)

    def eval(self) -> "GeneratorBundle":
        for net in (self.warp, self.parse, self.tryon):
            net.eval()
        return self

    @property
    def trained(self) -> bool:
        return self.stages >= {"warp", "parse", "tryon"}


def build_bundle(cfg: ExperimentConfig) -> GeneratorBundle:
    """Freshly initialised networks; refused by ``tryon_once`` until weights are loaded."""
    return GeneratorBundle(cfg, build_warp(cfg), build_parse(cfg), build_tryon(cfg)).eval()


def load_bundle(ckpt_dir: str | Path, tryon_path: str | Path | None = None) -> GeneratorBundle:
    """Warp and parse from ``ckpt_dir``; the generator from ``tryon_path`` (default ``ckpt_dir``)."""
    tryon_ckpt = load_checkpoint(tryon_path or stage_path(ckpt_dir, "tryon"), "tryon")
    cfg = ExperimentConfig.from_dict(tryon_ckpt.config)
    bundle = build_bundle(cfg)
    for name in ("warp", "parse"):
        ckpt = load_checkpoint(stage_path(ckpt_dir, name), name)
        getattr(bundle, name).load_state_dict(ckpt.weights[name])
        bundle.stages.add(name)
    bundle.tryon.load_state_dict(tryon_ckpt.weights["tryon"])
    bundle.stages.add("tryon")
    return bundle.eval()


def _to_tensor(batch: dict) -> dict:
    return {k: v.unsqueeze(0) for k, v in batch.items()}


@torch.no_grad()
def tryon_once(bundle: GeneratorBundle, model_record: SampleRecord, garment: np.ndarray | SampleRecord,
               category: GarmentCategory | str | None = None, trace: dict | None = None) -> np.ndarray:
    """Dress ``model_record`` in ``garment``; returns an H x W x 3 float32 image in [0, 1].

    The generator is conditioned on the predicted parse, never on the model's
    ground-truth parse. Intermediates are written into ``trace`` when given.
    """
    if not bundle.trained:
        missing = sorted({"warp", "parse", "tryon"} - bundle.stages)
        raise UntrainedBundleError(f"bundle lacks trained weights for {', '.join(missing)}")
    if isinstance(garment, SampleRecord):
        if category is not None and GarmentCategory(category) != garment.category:
            raise ValueError(f"garment {garment.item_id} is {garment.category.value}, not {GarmentCategory(category).value}")
        category = garment.category
        garment = garment.garment_image
    category = GarmentCategory(category or model_record.category)
    garment = np.asarray(garment, dtype=np.float32)
    if garment.shape != model_record.model_image.shape:
        raise ValueError(f"garment shape {garment.shape} != model image shape {model_record.model_image.shape}")
    if model_record.size != bundle.config.resolution:
        raise ValueError(f"record size {model_record.size} != profile {bundle.config.resolution}")
    bundle.eval()
    record = dataclasses.replace(model_record, garment_image=garment)
    x = _to_tensor(record_tensors(record, bundle.config.pose_mode, bundle.config.dilation_radius, category))
    theta = bundle.warp(x["garment"], x["agnostic"], x["pose"])
    warped = apply_tps(x["garment"], tps_grid(theta, x["garment"].shape[-2:]))
    logits = bundle.parse(warped, x["pose"], x["masked_parse"])
    predicted = one_hot_parse(logits)
    image = bundle.tryon(x["garment"], x["pose"], x["agnostic"], predicted, theta)
    out = image[0].permute(1, 2, 0).numpy().astype(np.float32)
    if trace is not None:
        trace.update(category=category, theta=theta[0].clone(), warped=warped[0].clone(),
                     agnostic=x["agnostic"][0].clone(), masked_parse=x["masked_parse"][0].argmax(0),
                     parse_logits=logits[0].clone(), parse_pred=logits[0].argmax(0).numpy(),
                     generator_parse=predicted[0].clone(), image=out)
    return out


def _garment_input(garment, expected: GarmentCategory) -> np.ndarray:
    if isinstance(garment, SampleRecord):
        if garment.category != expected:
            raise ValueError(f"expected a {expected.value} garment, got {garment.category.value} ({garment.item_id})")
        return garment.garment_image
    return np.asarray(garment, dtype=np.float32)


def multi_garment(bundle: GeneratorBundle, model_record: SampleRecord, upper, lower,
                  trace: dict | None = None) -> np.ndarray:
    """Upper-body try-on, then lower-body try-on on its output.

    The second pass masks the first pass's image using the parse predicted
    during the first pass; parsing runs again from scratch in the second pass.
    """
    upper_img = _garment_input(upper, GarmentCategory.UPPER_BODY)
    lower_img = _garment_input(lower, GarmentCategory.LOWER_BODY)
    first: dict = {}
    image_1 = tryon_once(bundle, model_record, upper_img, GarmentCategory.UPPER_BODY, first)
    intermediate = dataclasses.replace(model_record, model_image=image_1,
                                       parse=first["parse_pred"].astype(model_record.parse.dtype),
                                       category=GarmentCategory.LOWER_BODY)
    second: dict = {}
    image_2 = tryon_once(bundle, intermediate, lower_img, GarmentCategory.LOWER_BODY, second)
    if trace is not None:
        trace.update(order=[GarmentCategory.UPPER_BODY, GarmentCategory.LOWER_BODY],
                     passes=[first, second], intermediate=intermediate)
    return image_2
