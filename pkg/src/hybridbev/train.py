"""Two-stage training: camera pre-training with depth supervision, then radar/fusion/head with a frozen camera branch."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .camera import depth_loss
from .checkpoint import Checkpoint, params_digest
from .head import detection_loss_forward
from .model import (
    ModelConfig, camera_branch_forward, init_model, model_backward, model_forward, uses_camera, uses_radar,
)
from .params import Params
from .synth import Scene, bev_augment, radar_augment

logger = logging.getLogger(__name__)

STAGE_LR = {1: 2e-4, 2: 1e-4}
BUFFER_SUFFIXES = (".mean", ".var")


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class InvariantError(RuntimeError):
    """A contract that must never break (e.g. frozen parameters drifted)."""


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    variant: str = ""                # empty: camera for stage 1, fusion for stage 2
    epochs: int = 12
    lr: Optional[float] = None       # None: stage default
    weight_decay: float = 0.01
    batch_size: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0           # global-norm clip, 0 disables
    attn_lr_scale: float = 1.0       # multiplies the lr of fusion attention blocks and positional encodings
    seed: int = 0
    w_depth: float = 1.0
    w_cls: float = 1.0
    w_box: float = 1.0
    w_vel: float = 1.0
    radar_dropout: float = 0.0
    radar_noise: float = 0.0
    bev_flip: bool = False
    bev_rot: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr is not None and self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.attn_lr_scale < 0:
            raise ValueError("attention lr scale must be nonnegative")
        if self.stage == 1 and self.resolved_variant != "camera":
            raise ValueError("stage 1 trains the camera model only")
        if self.stage == 2 and self.resolved_variant == "camera":
            raise ValueError("stage 2 trains a radar, fusion or concat model")

    @property
    def resolved_variant(self) -> str:
        return self.variant or ("camera" if self.stage == 1 else "fusion")

    @property
    def resolved_lr(self) -> float:
        return STAGE_LR[self.stage] if self.lr is None else self.lr


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


class AdamW:
    """Adam with decoupled weight decay; skips buffers and frozen names and counts what it touched."""

    def __init__(
        self, params: Params, frozen: Set[str], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01,
        lr_scales: Sequence[Tuple[str, float]] = (),
    ):
        self.frozen = set(frozen)
        self.lr_scales = tuple(lr_scales)   # (name prefix, multiplier); first match wins
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.updates: Dict[str, int] = {}   # applied updates per parameter name
        self.frozen_skipped = 0             # gradients offered for frozen names and dropped

    @property
    def frozen_updates(self) -> int:
        """Updates applied to frozen names; the freezing contract requires 0."""
        return sum(self.updates.get(k, 0) for k in self.frozen)

    def trainable(self, name: str) -> bool:
        return name not in self.frozen and not name.endswith(BUFFER_SUFFIXES)

    def scale(self, name: str) -> float:
        for prefix, mult in self.lr_scales:
            if name.startswith(prefix):
                return mult
        return 1.0

    def step(self, params: Params, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            if not self.trainable(name):
                if name in self.frozen:
                    self.frozen_skipped += 1
                continue
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step_lr = lr * self.scale(name)
            if step_lr == 0.0:
                continue
            p = params[name]
            p -= step_lr * self.wd * p
            p -= step_lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            self.updates[name] = self.updates.get(name, 0) + 1


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: List[dict]
    optimizer: AdamW

    def write_loss_csv(self, path) -> None:
        cols = ["step", "epoch", "lr", "total", "depth", "cls", "box", "vel"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.losses:
                w.writerow([row["step"], row["epoch"]] + [repr(float(row[c])) for c in cols[2:]])


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "train": asdict(train_cfg)}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _scene_loss_grads(
    P: Params, model_cfg: ModelConfig, cfg: TrainConfig, variant: str, scene: Scene,
    frozen_cam: Optional[np.ndarray], aug_rng: np.random.Generator,
) -> Tuple[dict, Params]:
    radar = scene.radar
    if uses_radar(variant) and (cfg.radar_dropout > 0 or cfg.radar_noise > 0):
        radar = radar_augment(radar, cfg.radar_dropout, cfg.radar_noise, int(aug_rng.integers(2 ** 31)))
    flip = bool(cfg.bev_flip and aug_rng.random() < 0.5)
    rot = int(aug_rng.integers(4)) if cfg.bev_rot else 0
    boxes = scene.boxes
    aug = (flip, rot) if (flip or rot) else None
    if aug:
        _, boxes = bev_augment(np.zeros((1, *model_cfg.grid.shape)), boxes, model_cfg.grid, flip, rot)
    res = model_forward(
        P, model_cfg, variant,
        scene.cam_features.tensor if scene.cam_features is not None else None,
        scene.calib, radar,
        scene.cam_features.stride if scene.cam_features is not None else model_cfg.stride,
        frozen_camera=frozen_cam, head_aug=aug,
    )
    (l_cls, l_box, l_vel), dhead = detection_loss_forward(res.head, boxes, model_cfg.grid, (cfg.w_cls, cfg.w_box, cfg.w_vel))
    l_depth, ddepth = 0.0, None
    if cfg.stage == 1 and res.depth is not None:
        l_depth, ddepth = depth_loss(res.depth, scene.gt_depth, scene.depth_mask)
        ddepth = cfg.w_depth * ddepth
    grads = model_backward(dhead, res, P, model_cfg, variant, ddepth, train_camera=frozen_cam is None)
    total = cfg.w_depth * l_depth + cfg.w_cls * l_cls + cfg.w_box * l_box + cfg.w_vel * l_vel
    return {"total": total, "depth": l_depth, "cls": l_cls, "box": l_box, "vel": l_vel}, grads


def _train(
    P: Params, frozen: Set[str], model_cfg: ModelConfig, cfg: TrainConfig, scenes: Sequence[Scene],
    frozen_cams: Optional[List[np.ndarray]] = None, metadata: Optional[dict] = None,
) -> TrainResult:
    if not scenes:
        raise ValueError("no training scenes")
    variant = cfg.resolved_variant
    scales = [("attn.", cfg.attn_lr_scale), ("fusion.pos_", cfg.attn_lr_scale)]
    opt = AdamW(P, frozen, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay, scales)
    order_rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 2])
    n = len(scenes)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    base_lr = cfg.resolved_lr
    losses: List[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            acc: Params = {}
            agg = {"total": 0.0, "depth": 0.0, "cls": 0.0, "box": 0.0, "vel": 0.0}
            for i in idx:
                cam = frozen_cams[i] if frozen_cams is not None else None
                parts, grads = _scene_loss_grads(P, model_cfg, cfg, variant, scenes[i], cam, aug_rng)
                for k in agg:
                    agg[k] += parts[k] / len(idx)
                for k, g in grads.items():
                    if k in acc:
                        acc[k] += g
                    else:
                        acc[k] = g.copy()
            for k in acc:
                acc[k] /= len(idx)
            if not all(math.isfinite(v) for v in agg.values()):
                raise TrainingError(step, f"non-finite loss {agg}")
            if cfg.grad_clip > 0:
                norm = math.sqrt(sum(float((g * g).sum()) for k, g in acc.items() if opt.trainable(k)))
                if norm > cfg.grad_clip:
                    for k in acc:
                        acc[k] *= cfg.grad_clip / norm
            lr = cosine_lr(base_lr, step, total_steps)
            opt.step(P, acc, lr)
            losses.append({"step": step, "epoch": epoch, "lr": lr, **agg})
            step += 1
    meta = {
        "stage": cfg.stage,
        "epoch": cfg.epochs,
        "variant": variant,
        "config_hash": config_hash(model_cfg, cfg),
        "model": model_cfg.to_dict(),
        "train": asdict(cfg),
    }
    meta.update(metadata or {})
    return TrainResult(Checkpoint(P, set(frozen), meta), losses, opt)


def stage1_train(cfg: TrainConfig, model_cfg: ModelConfig, scenes: Sequence[Scene]) -> TrainResult:
    """Camera branch + camera DSA + head with depth, heatmap, box and velocity losses."""
    if cfg.stage != 1:
        raise ValueError("stage1_train needs a stage-1 config")
    P = init_model(np.random.default_rng([cfg.seed, 0]), model_cfg, "camera")
    return _train(P, set(), model_cfg, cfg, scenes)


def camera_params(ckpt: Checkpoint) -> Params:
    return {k: v for k, v in ckpt.params.items() if k.startswith("cam.")}


def stage2_train(
    cfg: TrainConfig, model_cfg: ModelConfig, camera_ckpt: Optional[Checkpoint], scenes: Sequence[Scene],
) -> TrainResult:
    """Radar branch, fusion and head with the camera branch loaded and frozen.

    The radar-only variant needs no camera checkpoint.  After training the
    frozen tensors are compared bit for bit with the checkpoint; any drift
    raises :class:`InvariantError`.
    """
    if cfg.stage != 2:
        raise ValueError("stage2_train needs a stage-2 config")
    variant = cfg.resolved_variant
    P = init_model(np.random.default_rng([cfg.seed, 0]), model_cfg, variant)
    frozen: Set[str] = set()
    frozen_cams = None
    extra = {}
    if uses_camera(variant):
        if camera_ckpt is None:
            raise ValueError(f"the {variant} model needs a stage-1 camera checkpoint")
        if camera_ckpt.metadata.get("model") not in (None, model_cfg.to_dict()):
            raise ValueError("camera checkpoint was trained with a different model configuration")
        cam = camera_params(camera_ckpt)
        missing = {k for k in P if k.startswith("cam.")} - set(cam)
        if missing:
            raise ValueError(f"camera checkpoint lacks {sorted(missing)}")
        for k, v in cam.items():
            P[k] = v.copy()
        frozen = set(cam)
        before = params_digest(camera_ckpt.params, frozen)
        extra["camera_digest"] = before
        # the camera branch is frozen, so its BEV map is a per-scene constant
        frozen_cams = [
            camera_branch_forward(s.cam_features.tensor, s.calib, P, model_cfg, s.cam_features.stride)[0]
            for s in scenes
        ]
    result = _train(P, frozen, model_cfg, cfg, scenes, frozen_cams, extra)
    if frozen:
        after = params_digest(result.checkpoint.params, frozen)
        if after != extra["camera_digest"] or result.optimizer.frozen_updates:
            raise InvariantError("frozen camera parameters changed during stage 2")
    return result


def verify_frozen(ckpt: Checkpoint, camera_ckpt: Checkpoint) -> bool:
    """True when every camera tensor of ``ckpt`` is bit-identical to ``camera_ckpt``."""
    names = set(camera_params(camera_ckpt))
    if not names <= set(ckpt.params):
        return False
    return params_digest(ckpt.params, names) == params_digest(camera_ckpt.params, names)
