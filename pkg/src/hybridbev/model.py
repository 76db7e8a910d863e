"""End-to-end detector variants (camera, radar, hybrid fusion, naive concat) with full backward passes.

Parameter namespaces: ``cam.*`` (camera branch), ``radar.*`` (radar branch),
``attn.{dsa_cam,dsa_rad,dca_c2r,dca_r2c}.*`` (fusion attention blocks),
``fusion.*`` (positional encodings and CBR stack) and ``head.*``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .attention import dsa_backward, dsa_forward, init_deform_attn
from .camera import (
    depth_head_backward, depth_head_forward, frustum_cell_ids, frustum_points, init_depth_head,
    init_se, lift_backward, lift_features, se_backward, se_forward, voxel_pool_backward,
    voxel_pool_efficient, FrustumFeatures,
)
from .fusion import ATTN_BLOCKS, FusionConfig, hybrid_fuse_backward, hybrid_fuse_forward, init_fusion
from .geometry import BevGrid, CameraCalib, DepthBins, flatten_calib
from .head import HeadOutput, head_backward, head_forward_cached, init_head
from .layers import cbr_backward, cbr_forward, init_cbr
from .params import Params, prefixed, scoped
from .radar import init_radar_branch, radar_branch_backward, radar_branch_forward
from .synth import CAM_CHANNELS, bev_augment, bev_augment_backward, toy_grid

VARIANTS = ("camera", "radar", "fusion", "concat")


class InputError(ValueError):
    """A modality required by the model variant is missing."""


@dataclass(frozen=True)
class ModelConfig:
    grid: BevGrid = field(default_factory=toy_grid)
    channels: int = 8
    cam_channels: int = CAM_CHANNELS
    stride: int = 16
    depth_bins: DepthBins = field(default_factory=lambda: DepthBins(1.0, 25.6, 32))
    heads: int = 2
    points: int = 2
    offset_range: float = 3.0
    radar_channels: int = 16
    radar_blocks: int = 3
    dmsa_heads: int = 2
    rcs_radius: Tuple[float, float] = (0.5, 3.0)
    use_self: bool = True
    cbr_kernels: Tuple[int, int, int] = (3, 3, 1)
    head_trunk: bool = True

    def fusion_config(self, variant: str) -> FusionConfig:
        mode = "concat" if variant == "concat" else "hybrid"
        return FusionConfig(mode=mode, use_self=self.use_self, cbr_kernels=self.cbr_kernels, heads=self.heads, points=self.points)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = asdict(self.grid)
        d["depth_bins"] = asdict(self.depth_bins)
        d["rcs_radius"] = list(self.rcs_radius)
        d["cbr_kernels"] = list(self.cbr_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["grid"] = BevGrid(**d["grid"])
        d["depth_bins"] = DepthBins(**d["depth_bins"])
        d["rcs_radius"] = tuple(d["rcs_radius"])
        d["cbr_kernels"] = tuple(d["cbr_kernels"])
        return cls(**d)


def uses_camera(variant: str) -> bool:
    return variant in ("camera", "fusion", "concat")


def uses_radar(variant: str) -> bool:
    return variant in ("radar", "fusion", "concat")


def init_model(rng: np.random.Generator, cfg: ModelConfig, variant: str) -> Params:
    if variant not in VARIANTS:
        raise ValueError(f"unknown model variant {variant!r}")
    C = cfg.channels
    ny, nx = cfg.grid.shape
    p: Params = {}
    if uses_camera(variant):
        p.update(prefixed(init_se(rng, cfg.cam_channels), "cam.se"))
        p.update(prefixed(init_depth_head(rng, cfg.cam_channels, cfg.depth_bins.n_bins), "cam.depth"))
        p.update(prefixed(init_cbr(rng, cfg.cam_channels, C, 3), "cam.refine"))
        p.update(prefixed(init_deform_attn(rng, C, cfg.heads, cfg.points, offset_range=cfg.offset_range), "cam.dsa"))
    if uses_radar(variant):
        p.update(prefixed(init_radar_branch(rng, cfg.radar_channels, C, cfg.radar_blocks, cfg.dmsa_heads), "radar"))
    if variant in ("fusion", "concat"):
        fp = init_fusion(rng, C, ny, nx, cfg.fusion_config(variant))
        for k, v in fp.items():
            p[("attn." if k.split(".")[0] in ATTN_BLOCKS else "fusion.") + k] = v
    p.update(prefixed(init_head(rng, C, trunk=cfg.head_trunk), "head"))
    return p


def _fusion_view(P: Params) -> Params:
    return {**scoped(P, "fusion"), **scoped(P, "attn")}


def _fusion_grads(g: Params) -> Params:
    return {("attn." if k.split(".")[0] in ATTN_BLOCKS else "fusion.") + k: v for k, v in g.items()}


# --------------------------------------------------------------------------
# camera branch

_FRUSTUM_IDS: Dict[tuple, np.ndarray] = {}


def _cell_ids(shape_hw, stride: int, calib: CameraCalib, bins: DepthBins, grid: BevGrid) -> np.ndarray:
    key = (shape_hw, stride, calib.K.tobytes(), calib.R.tobytes(), calib.t.tobytes(), bins, grid)
    ids = _FRUSTUM_IDS.get(key)
    if ids is None:
        ids = frustum_cell_ids(frustum_points(shape_hw, stride, calib, bins), grid)
        ids.setflags(write=False)
        if len(_FRUSTUM_IDS) > 64:
            _FRUSTUM_IDS.clear()
        _FRUSTUM_IDS[key] = ids
    return ids


def camera_branch_forward(feats: np.ndarray, calib: CameraCalib, P: Params, cfg: ModelConfig, stride: int):
    """Gate, predict depth, lift, pool, refine and self-attend; returns (F_c, depth, cache)."""
    f1, c_se = se_forward(feats, flatten_calib(calib), scoped(P, "cam.se"))
    depth, c_d = depth_head_forward(f1, scoped(P, "cam.depth"))
    lifted = lift_features(f1, depth)
    ids = _cell_ids(feats.shape[1:], stride, calib, cfg.depth_bins, cfg.grid)
    bev = voxel_pool_efficient(FrustumFeatures(lifted, None), cfg.grid, ids)
    ref, c_ref = cbr_forward(bev, scoped(P, "cam.refine"))
    Fc, c_dsa = dsa_forward(ref, scoped(P, "cam.dsa"))
    return Fc, depth, (f1, depth, ids, lifted.shape, c_se, c_d, c_ref, c_dsa, bev)


def camera_branch_backward(dFc: np.ndarray, ddepth_extra: Optional[np.ndarray], cache) -> Params:
    f1, depth, ids, lshape, c_se, c_d, c_ref, c_dsa, _ = cache
    grads: Params = {}
    dref, g = dsa_backward(dFc, c_dsa)
    grads.update(prefixed(g, "cam.dsa"))
    dbev, g = cbr_backward(dref, c_ref)
    grads.update(prefixed(g, "cam.refine"))
    dlifted = voxel_pool_backward(dbev, ids, lshape)
    df1, ddepth = lift_backward(dlifted, f1, depth)
    if ddepth_extra is not None:
        ddepth = ddepth + ddepth_extra
    df1_d, g = depth_head_backward(ddepth, c_d)
    grads.update(prefixed(g, "cam.depth"))
    _, g = se_backward(df1 + df1_d, c_se)
    grads.update(prefixed(g, "cam.se"))
    return grads


# --------------------------------------------------------------------------
# full model

@dataclass
class ForwardResult:
    head: HeadOutput
    cache: dict
    depth: Optional[np.ndarray] = None
    maps: Dict[str, np.ndarray] = field(default_factory=dict)


def model_forward(
    P: Params,
    cfg: ModelConfig,
    variant: str,
    cam_features: Optional[np.ndarray],
    calib: Optional[CameraCalib],
    radar: Optional[np.ndarray],
    stride: int = 16,
    frozen_camera: Optional[np.ndarray] = None,
    head_aug: Optional[Tuple[bool, int]] = None,
) -> ForwardResult:
    """Run the variant.

    ``frozen_camera`` replaces the camera branch with a precomputed F_c;
    ``head_aug = (flip_x, rot90_k)`` transforms the BEV map entering the head.
    """
    cache: dict = {}
    maps: Dict[str, np.ndarray] = {}
    depth = None
    Fc = Fr = None
    if uses_camera(variant):
        if frozen_camera is not None:
            Fc = frozen_camera
        else:
            if cam_features is None or calib is None:
                raise InputError(f"the {variant} model needs camera features and calibration")
            Fc, depth, cache["cam"] = camera_branch_forward(cam_features, calib, P, cfg, stride)
        maps["camera"] = Fc
    if uses_radar(variant):
        if radar is None:
            raise InputError(f"the {variant} model needs a radar point set")
        Fr, cache["radar"] = radar_branch_forward(radar, cfg.grid, scoped(P, "radar"), cfg.rcs_radius)
        maps["radar"] = Fr
    if variant == "camera":
        F = Fc
    elif variant == "radar":
        F = Fr
    else:
        fcfg = cfg.fusion_config(variant)
        F, cache["fusion"] = hybrid_fuse_forward(Fc, Fr, _fusion_view(P), fcfg)
        if variant == "fusion":
            view = _fusion_view(P)
            maps["camera_hat"] = Fc + view["pos_cam"]
            maps["radar_hat"] = Fr + view["pos_rad"]
            maps["dca_cam"] = cache["fusion"]["dca_cam"]
            maps["dca_rad"] = cache["fusion"]["dca_rad"]
        else:
            maps["camera_hat"], maps["radar_hat"] = Fc, Fr
        maps["fused"] = F
    if head_aug is not None:
        F, _ = bev_augment(F, [], cfg.grid, *head_aug)
        cache["head_aug"] = head_aug
    head, cache["head"] = head_forward_cached(F, scoped(P, "head"))
    return ForwardResult(head, cache, depth, maps)


def model_backward(
    dhead: HeadOutput,
    result: ForwardResult,
    P: Params,
    cfg: ModelConfig,
    variant: str,
    ddepth: Optional[np.ndarray] = None,
    train_camera: bool = True,
) -> Params:
    cache = result.cache
    dF, g = head_backward(dhead, cache["head"])
    grads: Params = prefixed(g, "head")
    if "head_aug" in cache:
        dF = bev_augment_backward(dF, *cache["head_aug"])
    dFc = dFr = None
    if variant == "camera":
        dFc = dF
    elif variant == "radar":
        dFr = dF
    else:
        dFc, dFr, g = hybrid_fuse_backward(dF, cache["fusion"], cfg.fusion_config(variant))
        grads.update(_fusion_grads(g))
    if dFr is not None:
        grads.update(prefixed(radar_branch_backward(dFr, cache["radar"], scoped(P, "radar")), "radar"))
    if dFc is not None and train_camera and "cam" in cache:
        grads.update(camera_branch_backward(dFc, ddepth, cache["cam"]))
    return grads


def detect_scene(P: Params, cfg: ModelConfig, variant: str, scene, score_thresh: float = 0.1, max_dets: int = 50):
    from .head import decode

    res = model_forward(
        P, cfg, variant,
        scene.cam_features.tensor if scene.cam_features is not None else None,
        scene.calib,
        scene.radar,
        scene.cam_features.stride if scene.cam_features is not None else cfg.stride,
    )
    return decode(res.head, cfg.grid, score_thresh, max_dets), res
