"""Forward/evaluate drivers and the fixed synthetic benchmark comparing model variants."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .contribution import ContributionMap, contribution_maps, export_contribution
from .evaluation import EvalReport, evaluate
from .head import Detection, decode
from .model import InputError, ModelConfig, model_forward, uses_camera, uses_radar
from .params import Params
from .synth import Scene, SceneConfig, gen_scenes
from .train import TrainConfig, stage1_train, stage2_train

logger = logging.getLogger(__name__)

DUMPABLE = ("camera", "radar", "fused", "dca_cam", "dca_rad", "camera_hat", "radar_hat")


@dataclass(frozen=True)
class DetectConfig:
    score_thresh: float = 0.1
    max_dets: int = 50
    n_points: int = 40


def checkpoint_model(ckpt: Checkpoint) -> Tuple[ModelConfig, str]:
    meta = ckpt.metadata
    if "model" not in meta or "variant" not in meta:
        raise ValueError("checkpoint metadata lacks the model description")
    return ModelConfig.from_dict(meta["model"]), meta["variant"]


def scene_forward(P: Params, model_cfg: ModelConfig, variant: str, scene: Scene):
    cam = scene.cam_features
    if uses_camera(variant) and cam is None:
        raise InputError(f"the {variant} model needs camera features")
    if uses_radar(variant) and scene.radar is None:
        raise InputError(f"the {variant} model needs radar points")
    return model_forward(
        P, model_cfg, variant,
        cam.tensor if cam is not None else None,
        scene.calib,
        scene.radar,
        cam.stride if cam is not None else model_cfg.stride,
    )


def detect(P: Params, model_cfg: ModelConfig, variant: str, scene: Scene, det_cfg: DetectConfig = DetectConfig()):
    res = scene_forward(P, model_cfg, variant, scene)
    return decode(res.head, model_cfg.grid, det_cfg.score_thresh, det_cfg.max_dets), res


def evaluate_model(
    P: Params, model_cfg: ModelConfig, variant: str, scenes: Sequence[Scene], det_cfg: DetectConfig = DetectConfig(),
) -> Tuple[EvalReport, List[List[Detection]]]:
    dets = [detect(P, model_cfg, variant, s, det_cfg)[0] for s in scenes]
    return evaluate(dets, [s.boxes for s in scenes], n_points=det_cfg.n_points), dets


def run_forward(
    ckpt: Checkpoint,
    scene: Scene,
    dump_dir: Optional[os.PathLike] = None,
    dumps: Sequence[str] = (),
    det_cfg: DetectConfig = DetectConfig(),
) -> Tuple[List[Detection], Dict[str, np.ndarray], Optional[ContributionMap]]:
    """Detections for one scene plus requested feature dumps (tensor files) and contribution maps."""
    model_cfg, variant = checkpoint_model(ckpt)
    dets, res = detect(ckpt.params, model_cfg, variant, scene, det_cfg)
    cmap = None
    if "camera_hat" in res.maps and "radar_hat" in res.maps:
        cmap = contribution_maps(res.maps["camera_hat"], res.maps["radar_hat"])
    if dump_dir is not None and dumps:
        out = Path(dump_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in dumps:
            if name == "contrib":
                if cmap is None:
                    raise InputError("contribution maps need a fusion or concat checkpoint")
                export_contribution(cmap, out / "contrib")
                continue
            if name not in res.maps:
                raise InputError(f"no {name!r} map for the {variant} model (available: {sorted(res.maps)})")
            T.save_tensor(out / f"{name}.bin", res.maps[name])
    return dets, res.maps, cmap


# --------------------------------------------------------------------------
# fixed synthetic benchmark

@dataclass(frozen=True)
class BenchmarkConfig:
    train_seed_start: int = 0
    n_train: int = 100
    eval_seed_start: int = 100000
    n_eval: int = 30
    run_seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    stage1_epochs: int = 8
    stage2_epochs: int = 8
    stage1_lr: float = 3e-3
    stage2_lr: float = 3e-3
    attn_lr_scale: float = 0.03

    @property
    def train_seeds(self) -> range:
        return range(self.train_seed_start, self.train_seed_start + self.n_train)

    @property
    def eval_seeds(self) -> range:
        return range(self.eval_seed_start, self.eval_seed_start + self.n_eval)


@dataclass
class BenchmarkRun:
    seed: int
    reports: Dict[str, EvalReport]
    seconds: float

    def map(self, variant: str, region: str = "full") -> float:
        return self.reports[variant].mean_ap(region)

    def ordering_holds(self, region: str = "full") -> bool:
        m = {v: self.map(v, region) for v in self.reports}
        return m["fusion"] >= m["radar"] >= m["camera"] and m["fusion"] >= m["concat"]


def run_benchmark_seed(
    seed: int,
    bench: BenchmarkConfig = BenchmarkConfig(),
    scene_cfg: SceneConfig = SceneConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    det_cfg: DetectConfig = DetectConfig(),
    train_scenes: Optional[Sequence[Scene]] = None,
    eval_scenes: Optional[Sequence[Scene]] = None,
) -> BenchmarkRun:
    """Train camera (stage 1), then radar, fusion and concat (stage 2) with one seed; evaluate all four."""
    t0 = time.perf_counter()
    train_scenes = train_scenes if train_scenes is not None else gen_scenes(bench.train_seeds, scene_cfg)
    eval_scenes = eval_scenes if eval_scenes is not None else gen_scenes(bench.eval_seeds, scene_cfg)
    s1 = TrainConfig(stage=1, epochs=bench.stage1_epochs, lr=bench.stage1_lr, seed=seed)
    cam = stage1_train(s1, model_cfg, train_scenes).checkpoint
    ckpts = {"camera": cam}
    for variant in ("radar", "fusion", "concat"):
        s2 = TrainConfig(
            stage=2, variant=variant, epochs=bench.stage2_epochs, lr=bench.stage2_lr, seed=seed,
            attn_lr_scale=bench.attn_lr_scale,
        )
        ckpts[variant] = stage2_train(s2, model_cfg, cam, train_scenes).checkpoint
    reports = {v: evaluate_model(c.params, model_cfg, v, eval_scenes, det_cfg)[0] for v, c in ckpts.items()}
    return BenchmarkRun(seed, reports, time.perf_counter() - t0)
