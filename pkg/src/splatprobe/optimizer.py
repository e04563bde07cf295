"""Probe training: warm-start regression of the readout to the init cloud,
the main photometric loop with joint camera refinement, and test-time pose
optimization.

Parameter groups (MLP weights, per-attribute free-bank raws, camera twists,
optionally the reduced feature maps during warm start) each follow their own
exponential learning-rate schedule under a shared Adam state. Camera poses
are parameterized by accumulated se(3) twists applied on the left of the
initial pose; twist gradients chain the renderer's local pose cotangent
through the SE(3) left Jacobian, so the whole pipeline stays finite-
difference exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from splatprobe import defaults
from splatprobe.defaults import (
    ADAM_BETAS,
    ADAM_EPS,
    BACKGROUND,
    BASE_SCALE_FRACTION,
    LAMBDA_DSSIM,
    LR_CAMERA,
    LR_OPACITY,
    LR_POSITION,
    LR_ROTATION,
    LR_SCALE,
    LR_SH,
    LR_WARM_MLP,
    MAIN_ITERS,
    MLP_HIDDEN,
    MLP_LR_RATIO,
    POSE_REFINE_STEPS,
    WARM_ITERS,
)
from splatprobe.errors import DataError, NumericalError, ShapeError
from splatprobe.features import FeatureMap
from splatprobe.geometry import CameraModel, se3_exp_apply, se3_left_jacobian
from splatprobe.metrics import ssim_and_grad
from splatprobe.readout import (
    FreeBank,
    HeadLayout,
    MlpParams,
    ProbeMode,
    assemble_cloud,
    free_bank_init,
    heads_decode,
    heads_decode_vjp,
    mlp_backward,
    mlp_forward,
    mlp_init,
    raw_targets,
)
from splatprobe.renderer import GaussianCloud, RenderOutput, rasterize, render_gradients
from splatprobe.sceneio import SceneBundle, ftz_read, ftz_write, loss_history_write, write_json


@dataclass(frozen=True)
class LrSchedule:
    """lr(t) = lr_init * (lr_final/lr_init)^(min(t, horizon)/horizon)."""

    lr_init: float
    lr_final: float
    horizon: int

    def __post_init__(self):
        if self.lr_init <= 0 or self.lr_final <= 0:
            raise DataError("learning rates must be positive")
        if self.horizon < 1:
            raise DataError("schedule horizon must be at least 1")

    def at(self, t: int) -> float:
        if t < 0:
            raise DataError("schedule step must be non-negative")
        frac = min(t, self.horizon) / self.horizon
        return self.lr_init * (self.lr_final / self.lr_init) ** frac

    @classmethod
    def constant(cls, lr: float) -> "LrSchedule":
        return cls(lr, lr, 1)


def lr_at(schedule: LrSchedule, t: int) -> float:
    return schedule.at(t)


class AdamState:
    """Bias-corrected Adam over a named parameter tree."""

    def __init__(self, params: dict[str, np.ndarray],
                 betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0
        self.beta1, self.beta2 = betas
        self.eps = eps


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], lr: float | dict[str, float]):
    """One in-place Adam update; returns (params, state).

    `lr` may be a scalar or a per-key mapping. Non-finite gradients abort
    with a diagnostic naming the offending parameter group.
    """
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in group {key!r} at step {state.step}")
        if g.shape != params[key].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[key].shape} "
                             f"for {key!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for key, g in grads.items():
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step_lr = lr[key] if isinstance(lr, dict) else lr
        update = step_lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        np.subtract(params[key], update.astype(params[key].dtype, copy=False), out=params[key])
    return params, state


def photometric_loss(render: RenderOutput, target: np.ndarray,
                     mask: np.ndarray | None = None,
                     lambda_dssim: float = LAMBDA_DSSIM) -> tuple[float, np.ndarray]:
    """(1-l)*L1 + l*(1-SSIM)/2 over valid pixels, plus its adjoint image."""
    rgb = np.asarray(render.rgb, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if rgb.shape != tgt.shape:
        raise ShapeError(f"render {rgb.shape} vs target {tgt.shape}")
    if mask is None:
        sel = np.ones(rgb.shape[:2], dtype=bool)
    else:
        sel = np.asarray(mask, dtype=bool)
        if not sel.any():
            raise DataError("photometric mask selects no pixels")
    n = int(sel.sum()) * rgb.shape[2]
    diff = rgb - tgt
    l1 = float(np.abs(diff[sel]).sum() / n)
    adj = np.zeros_like(rgb)
    adj[sel] = np.sign(diff[sel]) / n
    loss = (1.0 - lambda_dssim) * l1
    adj *= (1.0 - lambda_dssim)
    if lambda_dssim > 0.0:
        sval, sgrad = ssim_and_grad(rgb, tgt, sel)
        loss += lambda_dssim * (1.0 - sval) / 2.0
        adj += lambda_dssim * (-0.5) * sgrad
    return loss, adj


@dataclass
class TrainConfig:
    mode: ProbeMode = ProbeMode.ALL
    warm_iters: int = WARM_ITERS
    main_iters: int = MAIN_ITERS
    lambda_dssim: float = LAMBDA_DSSIM
    seed: int = 0
    finetune_features: bool = False
    background: tuple[float, float, float] = BACKGROUND
    hidden: int = MLP_HIDDEN
    dtype: str = defaults.TRAIN_DTYPE   # "f32" or "f64"
    threads: int = 1
    optimize_poses: bool = True
    base_scale_fraction: float = BASE_SCALE_FRACTION
    pose_refine_steps: int = POSE_REFINE_STEPS

    def __post_init__(self):
        if self.warm_iters < 0 or self.main_iters < 0:
            raise DataError("iteration counts must be non-negative")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise DataError("lambda_dssim must lie in [0, 1]")
        if self.dtype not in ("f32", "f64"):
            raise DataError("dtype must be 'f32' or 'f64'")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_json(self) -> dict:
        out = self.__dict__.copy()
        out["mode"] = self.mode.value
        out["background"] = list(self.background)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        kwargs = dict(data)
        kwargs["mode"] = ProbeMode.parse(kwargs["mode"])
        kwargs["background"] = tuple(kwargs["background"])
        return cls(**kwargs)


@dataclass
class TrainedState:
    """Everything produced by a probe run, sufficient to re-render."""

    mode: ProbeMode
    mlp: MlpParams
    bank: FreeBank
    twists: np.ndarray                 # (n_views_total, 6), train rows optimized
    features: list[FeatureMap]         # reduced maps actually used, train order
    feature_tag: str
    base_scale: float
    extent: float
    config: TrainConfig
    loss_history: list[dict] = field(default_factory=list)

    def features_flat(self) -> np.ndarray:
        return np.concatenate([m.data.reshape(-1, m.channels) for m in self.features], axis=0)

    def assemble(self) -> GaussianCloud:
        feats = self.features_flat().astype(self.config.np_dtype)
        raw = mlp_forward(self.mlp, feats)
        readout = heads_decode(raw, HeadLayout.for_mode(self.mode), self.base_scale)
        return assemble_cloud(self.mode, readout, self.bank.decode(self.base_scale))

    def effective_camera(self, scene: SceneBundle, view: int) -> CameraModel:
        return se3_exp_apply(self.twists[view], scene.cameras[view])


def scene_extent(points: np.ndarray) -> float:
    """Bounding-box diagonal of the init cloud; scales LRs and base_scale."""
    pts = np.asarray(points, dtype=np.float64)
    span = pts.max(axis=0) - pts.min(axis=0)
    return float(max(np.linalg.norm(span), 1e-6))


def _group_schedules(cfg: TrainConfig, extent: float) -> dict[str, LrSchedule]:
    horizon = max(cfg.main_iters, 1)
    cam_init, cam_final, cam_horizon = LR_CAMERA
    position = LrSchedule(LR_POSITION * extent, LR_POSITION * extent * 0.01, horizon)
    # The readout inherits the matching free-bank rate scaled down tenfold:
    # the position rate in geometry-bearing modes, the SH rate in texture mode.
    if cfg.mode is ProbeMode.TEXTURE:
        mlp_sched = LrSchedule.constant(MLP_LR_RATIO * LR_SH)
    else:
        mlp_sched = LrSchedule(MLP_LR_RATIO * position.lr_init,
                               MLP_LR_RATIO * position.lr_final, horizon)
    return {
        "mlp": mlp_sched,
        "position": position,
        "opacity": LrSchedule.constant(LR_OPACITY),
        "scale": LrSchedule.constant(LR_SCALE),
        "rotation": LrSchedule.constant(LR_ROTATION),
        "sh": LrSchedule.constant(LR_SH),
        "camera": LrSchedule(cam_init, cam_final, cam_horizon),
    }


def _flatten_features(maps: list[FeatureMap], dtype) -> np.ndarray:
    chans = {m.channels for m in maps}
    if len(chans) != 1:
        raise ShapeError(f"feature maps disagree on channels: {sorted(chans)}")
    return np.concatenate([m.data.reshape(-1, m.channels) for m in maps], axis=0).astype(dtype)


def _mlp_param_dict(mlp: MlpParams) -> dict[str, np.ndarray]:
    return {"mlp.w1": mlp.w1, "mlp.b1": mlp.b1, "mlp.w2": mlp.w2, "mlp.b2": mlp.b2}


def warm_start(mlp: MlpParams, feats: np.ndarray, targets: np.ndarray,
               cfg: TrainConfig) -> tuple[MlpParams, np.ndarray, list[dict]]:
    """Regress raw readout outputs to the init-cloud targets (L2, Adam).

    When cfg.finetune_features is set the feature matrix joins the optimized
    variables. Returns the updated parameters, features, and loss history.
    """
    if feats.shape[0] != targets.shape[0]:
        raise DataError(f"{feats.shape[0]} feature rows vs {targets.shape[0]} target rows")
    sched = LrSchedule(LR_WARM_MLP[0], LR_WARM_MLP[1], max(cfg.warm_iters, 1))
    params = _mlp_param_dict(mlp)
    if cfg.finetune_features:
        params["features"] = feats
    adam = AdamState(params)
    history = []
    tgt = targets.astype(feats.dtype)
    for t in range(cfg.warm_iters):
        raw, cache = mlp_forward(mlp, feats, want_cache=True)
        diff = raw - tgt
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite warm-start loss at iteration {t}")
        d_raw = (2.0 / diff.size) * diff
        grads_mlp, d_feats = mlp_backward(mlp, cache, d_raw,
                                          want_dx=cfg.finetune_features)
        grads = {f"mlp.{k}": v for k, v in grads_mlp.items()}
        if cfg.finetune_features:
            grads["features"] = d_feats
        lr = sched.at(t)
        adam_step(adam, params, grads, lr)
        history.append({"iteration": t, "phase": "warm", "view": "", "loss": loss,
                        "lr_mlp": lr})
    return mlp, feats, history


def _twist_gradient(twist: np.ndarray, local_pose_grad: np.ndarray) -> np.ndarray:
    """Chain the renderer's local left-increment cotangent to the accumulated
    twist parameter: dL/dxi = J_l(xi)^T dL/ddelta."""
    return se3_left_jacobian(twist).T @ local_pose_grad


_RENDER_GRAD_ATTRS = {
    "position": "positions", "opacity": "opacities", "scale": "scales",
    "rotation": "rotations", "sh": "sh",
}


def train(scene: SceneBundle, feature_maps: list[FeatureMap], cfg: TrainConfig,
          feature_tag: str = "") -> TrainedState:
    """Warm start plus the main photometric loop (round-robin over training
    views), optimizing the readout, the free bank, and the training-view pose
    twists per the probing mode."""
    if len(feature_maps) != len(scene.train_views):
        raise DataError(f"{len(feature_maps)} feature maps for {len(scene.train_views)} "
                        "training views")
    for fmap, view in zip(feature_maps, scene.train_views):
        h, w = scene.images[view].shape[:2]
        if (fmap.height, fmap.width) != (h, w):
            raise ShapeError(f"view {view}: features are {fmap.height}x{fmap.width}, "
                             f"image is {h}x{w}; upsample first")

    dtype = cfg.np_dtype
    feats = _flatten_features(feature_maps, dtype)
    n_pixels = feats.shape[0]
    if n_pixels != scene.init_points.shape[0]:
        raise DataError(f"init cloud has {scene.init_points.shape[0]} points for "
                        f"{n_pixels} training pixels")

    extent = scene_extent(scene.init_points)
    base_scale = cfg.base_scale_fraction * extent
    layout = HeadLayout.for_mode(cfg.mode)
    mlp = mlp_init(feats.shape[1], layout.width, cfg.seed, cfg.hidden).astype(dtype)

    history: list[dict] = []
    if cfg.warm_iters > 0:
        targets = raw_targets(cfg.mode, scene.init_points, scene.init_colors, base_scale)
        mlp, feats, history = warm_start(mlp, feats, targets, cfg)

    bank = free_bank_init(scene.init_points, scene.init_colors, cfg.mode, base_scale)
    bank = FreeBank(cfg.mode, {k: v.astype(dtype) for k, v in bank.raws.items()})
    twists = np.zeros((len(scene.cameras), 6))

    scheds = _group_schedules(cfg, extent)
    params: dict[str, np.ndarray] = dict(_mlp_param_dict(mlp))
    for attr, arr in bank.raws.items():
        params[f"bank.{attr}"] = arr
    if cfg.optimize_poses:
        params["twists"] = twists
    adam = AdamState(params)
    bg = np.asarray(cfg.background, dtype=np.float64)

    train_views = list(scene.train_views)
    images = {v: scene.images[v] for v in train_views}

    for t in range(cfg.main_iters):
        view = train_views[t % len(train_views)]
        raw, cache = mlp_forward(mlp, feats, want_cache=True)
        readout_dec = heads_decode(raw, layout, base_scale)
        bank_dec = bank.decode(base_scale)
        # the mode-complement invariant is asserted on every assembly; the
        # full numeric validation reruns every 500 iterations
        deep_check = (t % 500) == 0
        cloud = assemble_cloud(cfg.mode, readout_dec, bank_dec, check=deep_check)

        cam = se3_exp_apply(twists[view], scene.cameras[view])
        render_cache: dict = {}
        out = rasterize(cloud, cam, bg, threads=cfg.threads, cache=render_cache,
                        check=deep_check)
        loss, adj = photometric_loss(out, images[view], None, cfg.lambda_dssim)
        if not math.isfinite(loss):
            raise NumericalError(
                f"non-finite loss at main iteration {t} (view {view}); "
                f"alpha range [{out.alpha_accum.min()}, {out.alpha_accum.max()}]"
            )
        gr = render_gradients(cloud, cam, adj, bg, threads=cfg.threads, cache=render_cache)

        readout_cot = {a: getattr(gr, _RENDER_GRAD_ATTRS[a]).astype(dtype)
                       for a in cfg.mode.readout_attrs}
        d_raw = heads_decode_vjp(raw, layout, base_scale, readout_cot)
        grads_mlp, _ = mlp_backward(mlp, cache, d_raw, want_dx=False)
        grads: dict[str, np.ndarray] = {f"mlp.{k}": v for k, v in grads_mlp.items()}
        lrs: dict[str, float] = {f"mlp.{k}": scheds["mlp"].at(t) for k in grads_mlp}

        if cfg.mode.bank_attrs:
            bank_cot = {a: getattr(gr, _RENDER_GRAD_ATTRS[a]).astype(dtype)
                        for a in cfg.mode.bank_attrs}
            d_bank = heads_decode_vjp(bank.as_raw_matrix(), bank.layout, base_scale, bank_cot)
            for attr, sl in bank.layout.slices().items():
                grads[f"bank.{attr}"] = d_bank[:, sl].reshape(bank.raws[attr].shape)
                lrs[f"bank.{attr}"] = scheds[attr].at(t)

        if cfg.optimize_poses:
            tg = np.zeros_like(twists)
            tg[view] = _twist_gradient(twists[view], gr.pose)
            grads["twists"] = tg
            lrs["twists"] = scheds["camera"].at(t)

        adam_step(adam, params, grads, lrs)
        history.append({
            "iteration": cfg.warm_iters + t, "phase": "main", "view": view,
            "loss": loss, "lr_mlp": scheds["mlp"].at(t),
        })

    maps = [FeatureMap(view_id=m.view_id,
                       data=feats[sl].reshape(m.height, m.width, m.channels).astype(np.float64),
                       source_tag=m.source_tag)
            for m, sl in zip(feature_maps, _view_slices(feature_maps))]
    return TrainedState(
        mode=cfg.mode, mlp=mlp, bank=bank, twists=twists, features=maps,
        feature_tag=feature_tag, base_scale=base_scale, extent=extent,
        config=cfg, loss_history=history,
    )


def _view_slices(maps: list[FeatureMap]) -> list[slice]:
    out = []
    offset = 0
    for m in maps:
        count = m.height * m.width
        out.append(slice(offset, offset + count))
        offset += count
    return out


def pose_refine_test(state: TrainedState, scene: SceneBundle, view: int,
                     steps: int | None = None,
                     lambda_dssim: float | None = None) -> tuple[CameraModel, np.ndarray]:
    """Optimize only the given view's pose twist against its image.

    The scene parameters stay bit-identical; the best-loss twist over the run
    (including the starting point) is returned along with the refined camera.
    """
    if view in scene.train_views:
        raise DataError(f"view {view} is a training view")
    steps = state.config.pose_refine_steps if steps is None else steps
    lam = state.config.lambda_dssim if lambda_dssim is None else lambda_dssim
    cloud = state.assemble()
    base_cam = scene.cameras[view]
    target = scene.images[view]
    bg = np.asarray(state.config.background, dtype=np.float64)
    threads = state.config.threads

    twist = state.twists[view].copy()
    params = {"twist": twist}
    adam = AdamState(params)
    sched = LrSchedule(LR_CAMERA[0], LR_CAMERA[1], LR_CAMERA[2])
    best_twist = twist.copy()
    best_loss = math.inf
    for t in range(steps):
        cam = se3_exp_apply(twist, base_cam)
        render_cache: dict = {}
        out = rasterize(cloud, cam, bg, threads=threads, cache=render_cache,
                        check=(t == 0))
        loss, adj = photometric_loss(out, target, None, lam)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss during pose refinement step {t}")
        if loss < best_loss:
            best_loss = loss
            best_twist = twist.copy()
        gr = render_gradients(cloud, cam, adj, bg, threads=threads, cache=render_cache)
        adam_step(adam, params, {"twist": _twist_gradient(twist, gr.pose)}, sched.at(t))
    # final candidate
    cam = se3_exp_apply(twist, base_cam)
    out = rasterize(cloud, cam, bg, threads=threads)
    loss, _ = photometric_loss(out, target, None, lam)
    if loss < best_loss:
        best_twist = twist.copy()
    refined = se3_exp_apply(best_twist, base_cam)
    return refined, best_twist


def save_state(state: TrainedState, out_dir: str | Path):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ftz_write(out / "mlp_w1.ftz", state.mlp.w1)
    ftz_write(out / "mlp_b1.ftz", state.mlp.b1)
    ftz_write(out / "mlp_w2.ftz", state.mlp.w2)
    ftz_write(out / "mlp_b2.ftz", state.mlp.b2)
    for attr, arr in state.bank.raws.items():
        ftz_write(out / f"bank_{attr}.ftz", arr)
    ftz_write(out / "twists.ftz", state.twists)
    feat_entries = []
    for i, fmap in enumerate(state.features):
        name = f"features_{i:03d}.ftz"
        ftz_write(out / name, fmap.data)
        feat_entries.append({"view_id": fmap.view_id, "file": name,
                             "source_tag": fmap.source_tag})
    loss_history_write(out / "loss_history.csv", state.loss_history)
    write_json(out / "state.json", {
        "mode": state.mode.value,
        "feature_tag": state.feature_tag,
        "base_scale": state.base_scale,
        "extent": state.extent,
        "config": state.config.to_json(),
        "features": feat_entries,
        "bank_attrs": sorted(state.bank.raws),
    })


def load_state(state_dir: str | Path) -> TrainedState:
    root = Path(state_dir)
    import json

    meta = json.loads((root / "state.json").read_text())
    cfg = TrainConfig.from_json(meta["config"])
    dtype = cfg.np_dtype
    mlp = MlpParams(
        w1=ftz_read(root / "mlp_w1.ftz").astype(dtype),
        b1=ftz_read(root / "mlp_b1.ftz").astype(dtype),
        w2=ftz_read(root / "mlp_w2.ftz").astype(dtype),
        b2=ftz_read(root / "mlp_b2.ftz").astype(dtype),
    )
    mode = ProbeMode.parse(meta["mode"])
    raws = {attr: ftz_read(root / f"bank_{attr}.ftz").astype(dtype)
            for attr in meta["bank_attrs"]}
    bank = FreeBank(mode, raws)
    twists = ftz_read(root / "twists.ftz").astype(np.float64)
    features = [
        FeatureMap(view_id=entry["view_id"],
                   data=ftz_read(root / entry["file"]).astype(np.float64),
                   source_tag=entry.get("source_tag", ""))
        for entry in meta["features"]
    ]
    return TrainedState(
        mode=mode, mlp=mlp, bank=bank, twists=twists, features=features,
        feature_tag=meta["feature_tag"], base_scale=float(meta["base_scale"]),
        extent=float(meta["extent"]), config=cfg, loss_history=[],
    )
