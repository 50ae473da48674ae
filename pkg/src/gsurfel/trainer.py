"""Optimization loop: render one view, evaluate the loss stack, backprop, Adam step, densify."""

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import downsample
from .losses import LossWeights, assemble
from .rasterizer import RenderConfig, RenderGrads, render, render_backward
from .surfel import SurfelSet, quat_to_rotmat, normalize_quaternions, random_init, sigmoid

log = logging.getLogger(__name__)

PARAM_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")
REFERENCE_ITERS = 15000


class TrainingError(RuntimeError):
    def __init__(self, msg, surfels=None, iteration=None):
        super().__init__(msg)
        self.surfels = surfels
        self.iteration = iteration


@dataclass
class TrainConfig:
    total_iters: int = 15000
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    spatial_lr_scale: float = 1.0
    lr_rotation: float = 1.0e-3
    lr_scale: float = 5.0e-3
    lr_opacity: float = 5.0e-2
    lr_sh: float = 2.5e-3
    lambda_c_max: float = 0.1
    lambda_o: float = 0.01
    lambda_m: float = 1.0
    use_consistency: bool = True
    use_prior: bool = True
    use_opacity_loss: bool = True
    use_mask_loss: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    # (end iteration, downsample factor); full resolution afterwards
    warmup: tuple = ((1000, 4), (3000, 2))
    densify_from: int = 500
    densify_until: int = 7500
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-5  # mean |dL/du| in pixels at desk-scale image sizes
    percent_dense: float = 0.01
    prune_opacity: float = 0.05
    prune_world_fraction: float = 0.1
    split_factor: float = 1.6
    prune_gradientless: bool = True
    max_surfels: int = 200_000
    init_count: int = 10_000
    normal_grad_scale: float = 10.0
    sh_degree: int = 3
    tile_size: int = 16
    lowpass: float = 0.3  # screen-space covariance floor, pixels^2
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        self.warmup = tuple(tuple(int(v) for v in w) for w in self.warmup)
        lrs = [self.lr_position_init, self.lr_position_final, self.lr_rotation,
               self.lr_scale, self.lr_opacity, self.lr_sh]
        if min(lrs) <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_position_final > self.lr_position_init:
            raise ValueError("position learning rate must decay")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")

    @classmethod
    def for_iterations(cls, total_iters, **overrides):
        """Config whose iteration-indexed schedules are rescaled from the 15k reference run."""
        base = cls()
        f = total_iters / REFERENCE_ITERS
        scaled = dict(
            total_iters=total_iters,
            warmup=tuple((max(1, round(e * f)), k) for e, k in base.warmup),
            densify_from=round(base.densify_from * f),
            densify_until=round(base.densify_until * f),
            densify_interval=max(1, round(base.densify_interval * f)),
        )
        scaled.update(overrides)
        return cls(**scaled)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def render_config(self, background=(0.0, 0.0, 0.0)):
        return RenderConfig(
            tile_size=self.tile_size,
            lowpass=self.lowpass,
            normal_grad_scale=self.normal_grad_scale,
            sh_degree=self.sh_degree,
            background=tuple(float(b) for b in background),
        )


def position_lr(cfg, it):
    """Exponential decay from lr_position_init to lr_position_final over total_iters."""
    t = min(max(it / cfg.total_iters, 0.0), 1.0)
    if t == 1.0:  # the log-space blend misses the endpoint by an ulp
        lr = cfg.lr_position_final
    else:
        lr = float(np.exp(np.log(cfg.lr_position_init) * (1 - t) + np.log(cfg.lr_position_final) * t))
    return lr * cfg.spatial_lr_scale


def lambda_c(cfg, it):
    if not cfg.use_consistency:
        return 0.0
    return cfg.lambda_c_max * min(max(it / cfg.total_iters, 0.0), 1.0)


def group_lrs(cfg, it):
    return {
        "positions": position_lr(cfg, it),
        "rotations": cfg.lr_rotation,
        "log_scales": cfg.lr_scale,
        "opacity_logits": cfg.lr_opacity,
        "sh_coeffs": cfg.lr_sh,
    }


def warmup_factor(cfg, it):
    for end, factor in cfg.warmup:
        if it < end:
            return factor
    return 1


def loss_weights(cfg, it):
    return LossWeights(
        lambda_o=cfg.lambda_o if cfg.use_opacity_loss else 0.0,
        lambda_c=lambda_c(cfg, it),
        lambda_m=cfg.lambda_m if cfg.use_mask_loss else 0.0,
        use_prior=cfg.use_prior,
    )


def loss_and_grad(surfels, camera, reference, weights, render_config, mask=None, prior=None):
    """Total loss for one view and its gradient w.r.t. every raw parameter."""
    target, ctx = render(surfels, camera, render_config)
    opac = sigmoid(surfels.opacity_logits)
    br = assemble(weights, target, camera, reference, opac, mask=mask, prior=prior)
    grads = render_backward(
        surfels, camera, ctx, target,
        RenderGrads(br.grad_color, br.grad_depth, br.grad_normal, br.grad_alpha),
    )
    grads.d_opacity_logit += br.grad_opacity * opac * (1 - opac)
    return br, grads, target


@dataclass
class OptimizerState:
    """Adam moments per parameter group; rows track the SurfelSet."""

    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_surfels(cls, surfels):
        arrs = surfels.arrays()
        return cls(
            {k: np.zeros_like(v) for k, v in arrs.items()},
            {k: np.zeros_like(v) for k, v in arrs.items()},
            0,
        )

    def __len__(self):
        return len(self.exp_avg["positions"])

    def subset(self, idx):
        return OptimizerState(
            {k: v[idx] for k, v in self.exp_avg.items()},
            {k: v[idx] for k, v in self.exp_avg_sq.items()},
            self.step,
        )

    def extend(self, n_new):
        def pad(v):
            return np.concatenate([v, np.zeros((n_new,) + v.shape[1:])])

        return OptimizerState(
            {k: pad(v) for k, v in self.exp_avg.items()},
            {k: pad(v) for k, v in self.exp_avg_sq.items()},
            self.step,
        )

    def to_arrays(self):
        out = {f"m/{k}": v for k, v in self.exp_avg.items()}
        out.update({f"v/{k}": v for k, v in self.exp_avg_sq.items()})
        out["step"] = np.array([self.step], dtype=np.int64)
        return out

    @classmethod
    def from_arrays(cls, arrs):
        return cls(
            {k[2:]: v for k, v in arrs.items() if k.startswith("m/")},
            {k[2:]: v for k, v in arrs.items() if k.startswith("v/")},
            int(arrs["step"][0]),
        )


def adam_step(surfels, grads, state, lrs, cfg):
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    params = surfels.arrays()
    for name, g in grads.arrays().items():
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[name] -= lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


@dataclass
class TrainState:
    surfels: SurfelSet
    optim: OptimizerState
    iteration: int = 0
    grad_accum: np.ndarray = None
    grad_count: np.ndarray = None
    last_touched: np.ndarray = None

    def __post_init__(self):
        n = self.surfels.count
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n)
        if self.last_touched is None:
            self.last_touched = np.full(n, self.iteration - 1, dtype=np.int64)

    def keep(self, mask):
        self.surfels = self.surfels.subset(mask)
        self.optim = self.optim.subset(mask)
        self.grad_accum = self.grad_accum[mask]
        self.grad_count = self.grad_count[mask]
        self.last_touched = self.last_touched[mask]

    def append(self, new, it):
        k = new.count
        self.surfels = self.surfels.concat(new)
        self.optim = self.optim.extend(k)
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(k)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(k)])
        self.last_touched = np.concatenate([self.last_touched, np.full(k, it, dtype=np.int64)])

    def extras(self):
        return {
            "grad_accum": self.grad_accum,
            "grad_count": self.grad_count,
            "last_touched": self.last_touched,
        }


def densify_and_prune(state, cfg, it, scene_extent, bbox_diagonal):
    """Clone small / split large high-gradient surfels, then prune faint or oversized ones."""
    s = state.surfels
    n = s.count
    rng = np.random.default_rng([cfg.seed, it, 1])
    avg = state.grad_accum / np.maximum(state.grad_count, 1)
    hot = avg >= cfg.densify_grad_threshold
    max_scale = s.scales().max(axis=1)
    small = max_scale <= cfg.percent_dense * scene_extent
    room = max(cfg.max_surfels - n, 0)
    cand = np.nonzero(hot)[0]
    if len(cand) > room:
        # keep the strongest gradients; ties by index
        order = np.lexsort((cand, -avg[cand]))
        cand = np.sort(cand[order[:room]])
    chosen = np.zeros(n, dtype=bool)
    chosen[cand] = True
    clone_idx = np.nonzero(chosen & small)[0]
    split_idx = np.nonzero(chosen & ~small)[0]

    R = quat_to_rotmat(normalize_quaternions(s.rotations))
    scales = s.scales()
    new_parts = []
    if len(clone_idx):
        c = s.subset(clone_idx)
        sign = rng.choice([-1.0, 1.0], size=len(clone_idx))
        c.positions += R[clone_idx, :, 0] * (scales[clone_idx, 0] * sign)[:, None]
        new_parts.append(c)
    if len(split_idx):
        for _ in range(2):
            c = s.subset(split_idx)
            z = rng.standard_normal((len(split_idx), 2)) * scales[split_idx]
            c.positions += np.einsum("nij,nj->ni", R[split_idx, :, :2], z)
            c.log_scales -= np.log(cfg.split_factor)
            new_parts.append(c)
    for part in new_parts:
        state.append(part, it)
    if len(split_idx):
        keep = np.ones(state.surfels.count, dtype=bool)
        keep[split_idx] = False
        state.keep(keep)

    s = state.surfels
    prune = (s.opacities() < cfg.prune_opacity) | (
        s.scales().max(axis=1) > cfg.prune_world_fraction * bbox_diagonal
    )
    state.keep(~prune)
    state.grad_accum[:] = 0.0
    state.grad_count[:] = 0.0
    return len(clone_idx), len(split_idx), int(prune.sum())


def prune_gradientless(state, it, n_views):
    """Remove surfels that received no gradient during the last n_views iterations."""
    if it + 1 < n_views:
        return 0
    stale = state.last_touched <= it - n_views
    state.keep(~stale)
    return int(stale.sum())


class _ViewCache:
    """Reference images per warm-up factor, computed on first use."""

    def __init__(self, dataset):
        self.dataset = dataset
        self.cache = {}

    def get(self, idx, factor):
        key = (idx, factor)
        if key not in self.cache:
            v = self.dataset.views[idx]
            cam = v.camera.scaled(factor)
            img = downsample(v.image, factor)[: cam.height, : cam.width]
            mask = None
            if v.mask is not None:
                mask = downsample(v.mask.astype(float), factor)[: cam.height, : cam.width] >= 0.5
            prior = None
            if v.prior_normal is not None:
                p = downsample(v.prior_normal, factor)[: cam.height, : cam.width]
                nrm = np.linalg.norm(p, axis=-1, keepdims=True)
                prior = np.where(nrm > 1e-8, p / np.maximum(nrm, 1e-12), 0.0)
            self.cache[key] = (cam, img, mask, prior)
        return self.cache[key]


def view_for_iteration(cfg, it, n_views):
    epoch, k = divmod(it, n_views)
    order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(n_views)
    return int(order[k])


def initial_state(dataset, cfg, init_surfels=None):
    surfels = init_surfels
    if surfels is None:
        surfels = random_init(dataset.bbox_min, dataset.bbox_max, cfg.init_count, cfg.seed)
    return TrainState(surfels.copy(), OptimizerState.for_surfels(surfels), 0)


def train(dataset, cfg, state=None, init_surfels=None, log_file=None, stop_at=None, callback=None):
    """Run (or resume) the optimization. Returns the final TrainState and the log records."""
    if len(dataset.views) < 2:
        raise TrainingError("training needs at least two views")
    state = state or initial_state(dataset, cfg, init_surfels)
    rcfg = cfg.render_config(dataset.background)
    views = _ViewCache(dataset)
    n_views = len(dataset.views)
    extent = dataset.scale_hint
    records = []
    end = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
    for it in range(state.iteration, end):
        vidx = view_for_iteration(cfg, it, n_views)
        cam, img, mask, prior = views.get(vidx, warmup_factor(cfg, it))
        weights = loss_weights(cfg, it)
        br, grads, _ = loss_and_grad(
            state.surfels, cam, img, weights, rcfg,
            mask=mask if cfg.use_mask_loss else None, prior=prior,
        )
        if not np.isfinite(br.total) or not all(np.all(np.isfinite(g)) for g in grads.arrays().values()):
            raise TrainingError(
                f"non-finite loss at iteration {it}: {br.terms()}",
                surfels=state.surfels.copy(), iteration=it,
            )
        lrs = group_lrs(cfg, it)
        adam_step(state.surfels, grads, state.optim, lrs, cfg)
        state.last_touched[grads.touched] = it
        state.grad_accum[grads.touched] += grads.screen_grad[grads.touched]
        state.grad_count[grads.touched] += 1

        events = {}
        if (cfg.densify_from <= it < cfg.densify_until
                and (it + 1) % cfg.densify_interval == 0):
            cl, sp, pr = densify_and_prune(state, cfg, it, extent, dataset.bbox_diagonal)
            events.update(cloned=cl, split=sp, pruned=pr)
        if cfg.prune_gradientless and (it + 1) % n_views == 0:
            events["pruned_gradientless"] = prune_gradientless(state, it, n_views)
        state.iteration = it + 1

        if it % cfg.log_every == 0 or it == cfg.total_iters - 1 or events:
            rec = {"iter": it, "view": vidx, "total": br.total, **br.terms(),
                   "lambda_c": weights.lambda_c, "surfels": state.surfels.count,
                   "lr": lrs, **events}
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
            log.debug("iter %d loss %.5f surfels %d", it, br.total, state.surfels.count)
        if callback is not None:
            callback(state, br)
    return state, records
