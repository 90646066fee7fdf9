"""Training loop: warmup, data losses, densification, uncertainty refresh,
uncertainty-aware regularization with a refined-image cache, checkpointing.

Schedule summary (defaults): 40k iterations; the first 1k fit the canonical
cloud with the deformation field frozen; uncertainty statistics refresh
every 500 iterations; past the activation iteration (20k) the refined
cache (200 entries, rebuilt every 2k iterations through the refiner
protocol) drives the uncertainty-weighted image penalty, and one freshly
sampled unseen view per iteration drives the uncertainty-weighted depth
smoothness penalty. Everything is deterministic for a fixed seed at a
fixed thread count; the JSON-lines log carries no wall-clock fields.
"""

from __future__ import annotations

import json
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
import torch

from .cameras import Camera, interpolate_pose
from .checkpoint import load_model, save_model
from .dataio import Frame, SceneBundle
from .deform import DeformationField, grid_smoothness
from .densify import (
    DensityControlConfig,
    adaptive_density_control,
    cloud_from_points,
    densify_dynamic,
)
from .errors import InvalidParameterError, NumericalFailureError
from .formats import read_png, write_png
from .gaussians import GaussianCloud
from .losses import LossWeights, loss_depth, loss_flow, loss_recon, loss_ua_diff, loss_ua_tv, total_loss
from .render import RenderSettings, render
from .uncertainty import refresh_uncertainty

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15


# -- optimizer ----------------------------------------------------------------


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: dict[str, dict],
    lr,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> dict[str, torch.Tensor]:
    """Bias-corrected Adam update, in place; `lr` is a scalar or per-name dict."""
    b1, b2 = betas
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise InvalidParameterError(f"gradient shape mismatch for {name!r}")
            s = state.setdefault(
                name, {"m": torch.zeros_like(p), "v": torch.zeros_like(p), "step": 0}
            )
            s["step"] += 1
            s["m"].mul_(b1).add_(g, alpha=1 - b1)
            s["v"].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = s["m"] / (1 - b1 ** s["step"])
            v_hat = s["v"] / (1 - b2 ** s["step"])
            step_lr = lr[name] if isinstance(lr, dict) else lr
            p -= step_lr * m_hat / (v_hat.sqrt() + eps)
    return params


# -- configuration ---------------------------------------------------------------


@dataclass
class TrainConfig:
    total_iters: int = 40_000
    warmup_iters: int = 1_000
    ua_activation: int = 20_000
    cache_size: int = 200
    cache_refresh: int = 2_000
    uncertainty_refresh: int = 500
    weights: LossWeights = dataclass_field(default_factory=LossWeights)
    sigmoid_c0: float = 0.25
    sigmoid_c1: float | None = None  # None -> 20 / (number of training frames)
    lr_position: float = 1.6e-4
    lr_position_final_scale: float = 0.01  # exponential decay target
    lr_features: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 5e-3
    lr_deformation: float = 1.6e-3
    densify_enabled: bool = True
    densify_from: int = 500
    densify_until: int = 15_000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_split_scale: float = 0.08
    prune_opacity: float = 0.005
    max_primitives: int = 200_000
    sh_bands: int = 1
    feature_dim: int = 8
    spatial_res: int = 16
    time_res: int = 16
    hidden_dim: int = 32
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    refiner: str = "identity"  # identity | blur | external command line
    refiner_strength: float = 0.3
    refiner_prompt: str = ""
    refiner_timeout: float = 300.0
    # Ablation switches: replace the uncertainty map with ones inside the
    # corresponding regularizer (the uniform-regularization baselines).
    ua_tv_uniform: bool = False
    ua_diff_uniform: bool = False
    init_dynamic_budget: int = 0  # merge densify_dynamic output at startup when > 0
    seed: int = 0
    threads: int = 1
    log_every: int = 1
    deform_enabled: bool = True

    def validate(self):
        if self.ua_activation > self.total_iters and self.weights.ua_diff > 0:
            pass  # legal: UA phase simply never activates
        for name in ("cache_refresh", "uncertainty_refresh", "densify_interval", "log_every"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        for name in ("grid", "data", "ua_diff", "ua_tv"):
            if getattr(self.weights, name) < 0:
                raise InvalidParameterError(f"loss weight {name} must be >= 0")

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        weights = LossWeights(**d.pop("weights")) if "weights" in d else LossWeights()
        known = {k: v for k, v in d.items() if k in TrainConfig.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {sorted(unknown)}")
        cfg = TrainConfig(weights=weights, **known)
        if "background" in known:
            cfg.background = tuple(float(x) for x in known["background"])
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "weights"}
        out["background"] = list(self.background)
        out["weights"] = {
            "grid": self.weights.grid,
            "data": self.weights.data,
            "ua_diff": self.weights.ua_diff,
            "ua_tv": self.weights.ua_tv,
        }
        return out


# -- unseen-view sampling -----------------------------------------------------------


def sample_unseen_view(cameras: list[Camera], rng: np.random.Generator) -> Camera:
    """Pose interpolated between a random adjacent camera pair, with the
    interpolation factor and timestamp drawn uniformly from the open interval."""
    if len(cameras) < 2:
        raise InvalidParameterError("need at least two training cameras to interpolate")
    i = int(rng.integers(0, len(cameras) - 1))
    a, b = cameras[i], cameras[i + 1]
    u = float(np.clip(rng.uniform(), 1e-6, 1 - 1e-6))
    t = a.t + float(np.clip(rng.uniform(), 1e-6, 1 - 1e-6)) * (b.t - a.t)
    return Camera(
        fx=a.fx, fy=a.fy, cx=a.cx, cy=a.cy,
        world_to_camera=interpolate_pose(a, b, u),
        width=a.width, height=a.height, t=t,
    )


# -- refined-image cache -------------------------------------------------------------


@dataclass
class CacheEntry:
    camera: Camera
    rendered: np.ndarray  # (H, W, 3) float32
    refined: np.ndarray  # (H, W, 3) float32
    iteration: int


@dataclass
class RefinedCache:
    entries: list[CacheEntry] = dataclass_field(default_factory=list)


def box_blur5(image: np.ndarray) -> np.ndarray:
    """5x5 box blur with zero padding (the fixture refiner)."""
    padded = np.pad(image, ((2, 2), (2, 2), (0, 0)))
    out = np.zeros_like(image)
    for dy in range(5):
        for dx in range(5):
            out += padded[dy : dy + image.shape[0], dx : dx + image.shape[1]]
    return out / 25.0


def _run_external_refiner(command: str, images: list[np.ndarray], config: TrainConfig,
                          seed: int) -> list[np.ndarray] | None:
    workdir = Path(tempfile.mkdtemp(prefix="refine_"))
    try:
        inputs = []
        for i, img in enumerate(images):
            p = workdir / f"view_{i:04d}.png"
            write_png(p, img)
            inputs.append(str(p))
        out_dir = workdir / "out"
        out_dir.mkdir()
        manifest = {
            "inputs": inputs,
            "output_dir": str(out_dir),
            "strength": config.refiner_strength,
            "prompt": config.refiner_prompt,
            "seed": seed,
        }
        manifest_path = workdir / "manifest.json"
        manifest_path.write_text(json.dumps(manifest, indent=2))
        proc = subprocess.run(
            command.split() + [str(manifest_path)],
            capture_output=True,
            timeout=config.refiner_timeout,
        )
        if proc.returncode != 0 or not (out_dir / "DONE").exists():
            return None
        refined = []
        for p in inputs:
            rp = out_dir / (Path(p).stem + ".refined.png")
            if not rp.exists():
                return None
            refined.append(read_png(rp).astype(np.float32))
        return refined
    except (subprocess.TimeoutExpired, OSError):
        return None
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


def refresh_refined_cache(
    cloud: GaussianCloud,
    field: DeformationField | None,
    cameras: list[Camera],
    config: TrainConfig,
    rng: np.random.Generator,
    iteration: int,
    previous: RefinedCache | None = None,
) -> tuple[RefinedCache, str | None]:
    """Render unseen views, refine them, swap the cache atomically.

    On external-refiner failure the previous cache is kept and a warning
    string is returned.
    """
    settings = RenderSettings(background=config.background)
    views = [sample_unseen_view(cameras, rng) for _ in range(config.cache_size)]
    with torch.no_grad():
        rendered = [render(cloud, field, cam, settings).color.numpy().astype(np.float32) for cam in views]

    if config.refiner == "identity":
        refined = [img.copy() for img in rendered]
    elif config.refiner == "blur":
        refined = [box_blur5(img) for img in rendered]
    else:
        refined = _run_external_refiner(config.refiner, rendered, config, seed=int(rng.integers(2**31)))
        if refined is None:
            return (previous if previous is not None else RefinedCache()), (
                f"refiner {config.refiner!r} failed; keeping stale cache"
            )
    entries = [
        CacheEntry(camera=cam, rendered=img, refined=ref, iteration=iteration)
        for cam, img, ref in zip(views, rendered, refined)
    ]
    return RefinedCache(entries), None


# -- training ------------------------------------------------------------------------


def init_model(bundle: SceneBundle, config: TrainConfig) -> tuple[GaussianCloud, DeformationField | None]:
    """Initial cloud from the scene's point files (plus optional dynamic
    seeding) and a zero-deformation field spanning the points."""
    clouds = []
    if bundle.points is not None and len(bundle.points[0]) > 0:
        clouds.append(cloud_from_points(*bundle.points, bands=config.sh_bands))
    if config.init_dynamic_budget > 0:
        result = densify_dynamic(
            bundle.train_frames, budget=config.init_dynamic_budget,
            seed=config.seed, bands=config.sh_bands,
        )
        if len(result.cloud) > 0:
            clouds.append(result.cloud)
    if not clouds:
        raise InvalidParameterError("no initial points: scene has no PLY and dynamic seeding is off")
    cloud = clouds[0] if len(clouds) == 1 else GaussianCloud.concatenate(clouds)

    field = None
    if config.deform_enabled:
        pos = cloud.positions.detach().numpy()
        lo = pos.min(axis=0)
        hi = pos.max(axis=0)
        margin = np.maximum(0.2 * (hi - lo), 0.5)
        field = DeformationField(
            box_min=lo - margin,
            box_max=hi + margin,
            feature_dim=config.feature_dim,
            spatial_res=config.spatial_res,
            time_res=config.time_res,
            hidden_dim=config.hidden_dim,
            seed=config.seed,
        )
    return cloud, field


def _learning_rates(config: TrainConfig, iteration: int) -> dict[str, float]:
    frac = iteration / max(config.total_iters, 1)
    pos_lr = config.lr_position * (config.lr_position_final_scale**frac)
    lrs = {
        "positions": pos_lr,
        "rotations": config.lr_rotation,
        "log_scales": config.lr_scale,
        "opacity_logits": config.lr_opacity,
        "features": config.lr_features,
    }
    return lrs


def _remap_optimizer_state(state: dict, source_index: torch.Tensor, cloud_param_names) -> None:
    for name in cloud_param_names:
        if name not in state:
            continue
        s = state[name]
        fresh = source_index < 0
        src = source_index.clamp(min=0)
        for key in ("m", "v"):
            gathered = s[key][src]
            gathered[fresh] = 0
            s[key] = gathered


class Trainer:
    def __init__(self, bundle: SceneBundle, config: TrainConfig, out_dir):
        config.validate()
        torch.set_num_threads(max(1, config.threads))
        self.bundle = bundle
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if len(bundle.train_frames) < 2:
            raise InvalidParameterError("training needs at least two frames")
        self.rng = np.random.default_rng(config.seed)
        self.cloud, self.field = init_model(bundle, config)
        self.cloud.requires_grad_(True)
        if self.field is not None:
            self.field.requires_grad_(True)
        self.opt_state: dict[str, dict] = {}
        self.settings = RenderSettings(background=config.background)
        self.cache = RefinedCache()
        self.grad_accum = torch.zeros(len(self.cloud))
        self.grad_count = torch.zeros(len(self.cloud))
        self.log_lines: list[str] = []
        self.c1 = config.sigmoid_c1 if config.sigmoid_c1 is not None else 20.0 / len(bundle.train_frames)

    # -- helpers ---------------------------------------------------------------

    def _field_active(self, iteration: int) -> bool:
        return self.field is not None and iteration >= self.config.warmup_iters

    def _parameters(self, iteration: int) -> dict[str, torch.Tensor]:
        params = dict(self.cloud.parameters())
        if self._field_active(iteration):
            params.update(self.field.parameters())
        return params

    def _frame_pair(self, index: int) -> tuple[Frame, Camera | None]:
        frame = self.bundle.train_frames[index]
        if (
            self.config.weights.data > 0
            and frame.flow is not None
            and index + 1 < len(self.bundle.train_frames)
        ):
            return frame, self.bundle.train_frames[index + 1].camera
        return frame, None

    def _refresh_uncertainty(self):
        with torch.no_grad():
            refresh_uncertainty(
                self.cloud, self.field if self.field is not None else None,
                self.bundle.train_cameras, self.config.sigmoid_c0, self.c1, self.settings,
            )

    def _refresh_cache(self, iteration: int) -> str | None:
        self.cache, warning = refresh_refined_cache(
            self.cloud, self.field, self.bundle.train_cameras,
            self.config, self.rng, iteration, previous=self.cache,
        )
        return warning

    # -- the loop ----------------------------------------------------------------

    def run(self) -> dict:
        cfg = self.config
        events: list[str] = []
        for it in range(cfg.total_iters):
            events.clear()
            ua_active = it >= cfg.ua_activation and (cfg.weights.ua_diff > 0 or cfg.weights.ua_tv > 0)
            if ua_active and it == cfg.ua_activation:
                self._refresh_uncertainty()
                warn = self._refresh_cache(it)
                if warn:
                    events.append(warn)
            elif ua_active and (it - cfg.ua_activation) % cfg.cache_refresh == 0:
                warn = self._refresh_cache(it)
                if warn:
                    events.append(warn)
            if it > 0 and it % cfg.uncertainty_refresh == 0:
                self._refresh_uncertainty()

            field = self.field if self._field_active(it) else None
            fi = int(self.rng.integers(0, len(self.bundle.train_frames)))
            frame, flow_cam = self._frame_pair(fi)
            out = render(self.cloud, field, frame.camera, self.settings, flow_to=flow_cam)

            target = torch.as_tensor(frame.image, dtype=torch.float32)
            recon = loss_recon(out.color, target)
            grid = (
                grid_smoothness(self.field)
                if field is not None
                else torch.zeros((), dtype=torch.float32)
            )
            if frame.depth is not None and cfg.weights.data > 0:
                dtarget = torch.as_tensor(frame.depth, dtype=torch.float32)
                depth = loss_depth(out.depth, dtarget, dtarget > 0)
            else:
                depth = torch.zeros((), dtype=torch.float32)
            if out.flow is not None:
                flow = loss_flow(out.flow, torch.as_tensor(frame.flow, dtype=torch.float32))
            else:
                flow = torch.zeros((), dtype=torch.float32)

            ua_diff_term = None
            ua_tv_term = None
            if ua_active:
                if cfg.weights.ua_diff > 0 and self.cache.entries:
                    entry = self.cache.entries[int(self.rng.integers(0, len(self.cache.entries)))]
                    cache_out = render(self.cloud, field, entry.camera, self.settings)
                    u_map = (
                        torch.ones_like(cache_out.uncertainty)
                        if cfg.ua_diff_uniform
                        else cache_out.uncertainty
                    )
                    ua_diff_term = loss_ua_diff(
                        cache_out.color,
                        torch.as_tensor(entry.refined, dtype=torch.float32),
                        u_map,
                    )
                if cfg.weights.ua_tv > 0:
                    ucam = sample_unseen_view(self.bundle.train_cameras, self.rng)
                    uout = render(self.cloud, field, ucam, self.settings)
                    u_map = (
                        torch.ones_like(uout.uncertainty) if cfg.ua_tv_uniform else uout.uncertainty
                    )
                    ua_tv_term = loss_ua_tv(uout.depth, u_map)

            total, breakdown = total_loss(recon, grid, depth, flow, cfg.weights, ua_diff_term, ua_tv_term)
            if not np.isfinite(breakdown.total):
                raise NumericalFailureError(
                    f"non-finite loss at iteration {it}", breakdown.to_json()
                )

            params = self._parameters(it)
            grads = torch.autograd.grad(total, list(params.values()), allow_unused=True)
            grad_map = {
                n: g for (n, _), g in zip(params.items(), grads) if g is not None
            }

            if cfg.densify_enabled and "positions" in grad_map:
                with torch.no_grad():
                    norms = grad_map["positions"].norm(dim=-1)
                    self.grad_accum += norms
                    self.grad_count += (norms > 0).to(self.grad_count.dtype)

            lrs = _learning_rates(cfg, it)
            if self._field_active(it) and self.field is not None:
                for name in self.field.parameters():
                    lrs[name] = cfg.lr_deformation
            adam_step(params, grad_map, self.opt_state, lrs)
            self.cloud.normalize_rotations_()

            if (
                cfg.densify_enabled
                and cfg.densify_from <= it <= cfg.densify_until
                and it % cfg.densify_interval == 0
                and it > 0
            ):
                self._run_density_control(events)

            if it % cfg.log_every == 0:
                line = {"iter": it, **breakdown.to_json()}
                if events:
                    line["events"] = list(events)
                self.log_lines.append(json.dumps(line, sort_keys=True))

        self._refresh_uncertainty()
        log_path = self.out_dir / "train_log.jsonl"
        log_path.write_text("\n".join(self.log_lines) + "\n")
        ckpt_path = self.out_dir / "checkpoint.uags"
        self.save_checkpoint(ckpt_path)
        return {"checkpoint": str(ckpt_path), "log": str(log_path), "iterations": cfg.total_iters}

    def _run_density_control(self, events: list[str]):
        cfg = self.config
        avg = self.grad_accum / self.grad_count.clamp(min=1)
        dc = DensityControlConfig(
            grad_threshold=cfg.densify_grad_threshold,
            split_scale_threshold=cfg.densify_split_scale,
            prune_opacity=cfg.prune_opacity,
            max_primitives=cfg.max_primitives,
        )
        new_cloud, stats = adaptive_density_control(self.cloud, avg, dc)
        if stats.capped:
            events.append("primitive cap reached; densification suspended")
        if stats.cloned or stats.split or stats.pruned:
            _remap_optimizer_state(self.opt_state, stats.source_index, GaussianCloud.PARAM_NAMES)
            new_cloud.requires_grad_(True)
            self.cloud = new_cloud
            events.append(
                f"density control: +{stats.cloned} cloned, {stats.split} split, -{stats.pruned} pruned"
            )
        self.grad_accum = torch.zeros(len(self.cloud))
        self.grad_count = torch.zeros(len(self.cloud))

    def save_checkpoint(self, path):
        opt_arrays = {}
        for name, s in self.opt_state.items():
            opt_arrays[f"{name}_m"] = s["m"].numpy().astype(np.float32)
            opt_arrays[f"{name}_v"] = s["v"].numpy().astype(np.float32)
            opt_arrays[f"{name}_step"] = np.array([s["step"]], dtype=np.int64)
        save_model(
            path, self.cloud, self.field,
            meta={"config": self.config.to_dict(), "format": "trained-model"},
            optimizer_arrays=opt_arrays,
        )


def train(bundle: SceneBundle, config: TrainConfig, out_dir) -> dict:
    return Trainer(bundle, config, out_dir).run()


def load_checkpoint(path, dtype: torch.dtype = torch.float32):
    """-> (cloud, field, meta) for rendering/evaluation."""
    cloud, field, meta, _ = load_model(path, dtype=dtype)
    return cloud, field, meta
