"""Desk-scale training: losses, AdamW, cosine schedule, deterministic steps.

One step: pick input views (farthest point sampling when the pool is larger
than needed) and disjoint target views, normalize poses from the inputs,
run the model, decode Gaussians, render each target with the differentiable
rasterizer, and apply AdamW on the summed MSE (plus an optional perceptual
hook that defaults to zero).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .cameras import Camera, farthest_point_sample, normalize_poses
from .decoder import decode_views
from .errors import ConfigError, ShapeError, TrainingError, ValidationError
from .model import Model, forward
from .renderer import make_frame, rasterize_naive_diff


def zero_perceptual(pred: Tensor, gt: np.ndarray) -> float:
    """Default perceptual hook: contributes exactly nothing."""
    return 0.0


@dataclass
class LossConfig:
    lambda_perceptual: float = 0.5
    perceptual_hook: object = zero_perceptual

    def __post_init__(self):
        if self.lambda_perceptual < 0:
            raise ConfigError("perceptual weight must be nonnegative")


@dataclass
class ScheduleConfig:
    peak_lr: float = 2e-4
    warmup_steps: int = 2500
    total_steps: int = 50_000

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"need 0 < warmup < total, got {self.warmup_steps}, {self.total_steps}"
            )


@dataclass
class OptimizerState:
    """AdamW moments and hyperparameters for a named parameter set."""

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    moments: dict = field(default_factory=dict)


NORM_SCALE_SUFFIXES = ("ln", "mlp_ln", "q_norm", "k_norm", "viewpoint_ln", "image_ln")


def is_norm_scale(name: str) -> bool:
    """Normalization scales are exempt from weight decay."""
    return name.rsplit(".", 1)[-1] in NORM_SCALE_SUFFIXES


def mse_loss(pred: Tensor, gt) -> Tensor:
    """Mean squared error over all pixels and channels, on the tape."""
    gt = ad.as_tensor(gt, like=pred)
    if pred.shape != gt.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return (diff * diff).mean()


def total_loss(renders: list[Tensor], gts: list[np.ndarray], cfg: LossConfig) -> Tensor:
    """Sum over targets of MSE plus lambda times the perceptual hook."""
    if not renders or len(renders) != len(gts):
        raise ValidationError(f"{len(renders)} renders vs {len(gts)} ground truths")
    loss = None
    for pred, gt in zip(renders, gts):
        term = mse_loss(pred, gt)
        extra = cfg.perceptual_hook(pred, gt)
        if isinstance(extra, Tensor):
            term = term + extra * cfg.lambda_perceptual
        elif extra:
            term = term + float(extra) * cfg.lambda_perceptual
        loss = term if loss is None else loss + term
    return loss


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Linear warmup to the peak, then cosine decay to zero at total_steps."""
    if step <= sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    t = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.peak_lr * 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float) -> None:
    """Decoupled-weight-decay Adam update in place; grads are not cleared."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[name]
        if state.weight_decay and not is_norm_scale(name):
            p.data *= 1.0 - lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class SceneSample:
    """Views of one scene: cameras plus [0,1] float images, with depth range."""

    cameras: list[Camera]
    images: list[np.ndarray]
    near: float = 0.1
    far: float = 100.0
    name: str = "scene"

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValidationError("camera/image count mismatch")


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - gt) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * math.log10(mse)


def split_views(scene: SceneSample, n_inputs: int, n_targets: int,
                rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Deterministic input/target split; targets never overlap inputs."""
    total = len(scene.cameras)
    if total < n_inputs + n_targets:
        raise ValidationError(
            f"scene has {total} views, need {n_inputs} inputs + {n_targets} targets"
        )
    positions = np.stack([c.pose.translation for c in scene.cameras])
    inputs = farthest_point_sample(positions, n_inputs)
    pool = np.setdiff1d(np.arange(total), inputs)
    targets = rng.choice(pool, size=n_targets, replace=False)
    return list(inputs), [int(t) for t in targets]


def render_scene_views(model: Model, scene: SceneSample, input_ids: list[int],
                       target_ids: list[int], rng=None) -> tuple[list[Tensor], list[np.ndarray]]:
    """Forward + decode from the input views, render every target view.

    Poses are normalized from the input cameras; the scene's near/far are
    rescaled into the normalized world.
    """
    in_cams = [scene.cameras[i] for i in input_ids]
    _, norm = normalize_poses([c.pose for c in in_cams])
    in_cams = [norm.apply_camera(c) for c in in_cams]
    images = [scene.images[i] for i in input_ids]

    tokens = forward(model, in_cams, images, rng=rng)
    near = scene.near / norm.scale
    far = scene.far / norm.scale
    gaussians = decode_views(tokens, in_cams, model.head, near=near, far=far)

    renders = []
    gts = []
    for t in target_ids:
        cam = norm.apply_camera(scene.cameras[t])
        h, w = scene.images[t].shape[:2]
        frame = make_frame(w, h)
        renders.append(rasterize_naive_diff(gaussians, cam, frame))
        gts.append(scene.images[t])
    return renders, gts


def train_step(model: Model, scene: SceneSample, opt: OptimizerState,
               sched: ScheduleConfig, loss_cfg: LossConfig, step: int,
               rng: np.random.Generator, n_inputs: int = 2,
               n_targets: int = 1) -> dict:
    """One optimization step; returns {step, lr, loss, psnr}."""
    input_ids, target_ids = split_views(scene, n_inputs, n_targets, rng)
    lr = lr_at(step, sched)
    with Tape() as tape:
        renders, gts = render_scene_views(model, scene, input_ids, target_ids, rng=rng)
        loss = total_loss(renders, gts, loss_cfg)
    if not np.isfinite(loss.item()):
        raise TrainingError(f"non-finite loss at step {step}")
    model.zero_grad()
    tape.backward(loss)
    adamw_step(model.parameters(), opt, lr)
    tape.clear()
    quality = float(np.mean([psnr(r.numpy(), g) for r, g in zip(renders, gts)]))
    return {"step": step, "lr": lr, "loss": loss.item(), "psnr": quality}


def train(model: Model, scenes: list[SceneSample], steps: int, *,
          sched: ScheduleConfig | None = None, loss_cfg: LossConfig | None = None,
          opt: OptimizerState | None = None, seed: int = 0, n_inputs: int = 2,
          n_targets: int = 1, log_fn=None) -> list[dict]:
    """Deterministic training loop cycling over scenes; returns all records."""
    sched = sched or ScheduleConfig(total_steps=max(steps, 2))
    loss_cfg = loss_cfg or LossConfig()
    opt = opt or OptimizerState()
    rng = np.random.default_rng(seed)
    records = []
    for step in range(1, steps + 1):
        scene = scenes[(step - 1) % len(scenes)]
        rec = train_step(model, scene, opt, sched, loss_cfg, step, rng,
                         n_inputs=n_inputs, n_targets=n_targets)
        records.append(rec)
        if log_fn is not None:
            log_fn(rec)
    return records
