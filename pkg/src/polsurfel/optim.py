"""Training loop: Adam over surfel parameters and cube-map texels, warm-up,
tangent-space supervision from neighbouring views, and a simplified
clone/prune density control.
"""
from __future__ import annotations

import csv
import io as _stdio
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from . import io, loss, metrics, render
from .loss import LOSS_NAMES, LossWeights, TscBatch
from .polcore import DEFAULT_ETA
from .render.cubemap import Cubemap
from .surfel import SurfelSet, logit, sigmoid
from .tangent import UNKNOWN, projected_tangent, pseudo_tangent, sample_aop, DOLP_WEIGHT_KNEE
from .visibility import backproject, visibility_mask

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration",) + LOSS_NAMES + ("total",)
PARAM_GROUPS = ("xyz", "log_scale", "quat", "opacity_logit", "f_dc", "texels")


class NonFiniteLossError(RuntimeError):
    """Raised when a loss or gradient stops being finite; ``dump`` names the saved buffers."""

    def __init__(self, msg, dump=None):
        super().__init__(msg)
        self.dump = dump


@dataclass
class LearningRates:
    """Per-group step sizes.  Position decays exponentially from ``position``
    to ``position_final`` over the run; the rest are constant."""

    position: float = 1.6e-4
    position_final: float = 1.6e-6
    color: float = 2.5e-3
    opacity: float = 0.05
    scaling: float = 5e-3
    rotation: float = 1e-3
    cubemap: float = 1e-2

    def at(self, iteration, total):
        t = np.clip(iteration / max(total, 1), 0.0, 1.0)
        if self.position > 0 and self.position_final > 0:
            pos = float(np.exp((1 - t) * np.log(self.position) + t * np.log(self.position_final)))
        else:
            pos = self.position * (1 - t)
        return {"xyz": pos, "log_scale": self.scaling, "quat": self.rotation,
                "opacity_logit": self.opacity, "f_dc": self.color, "texels": self.cubemap}


@dataclass
class TrainConfig:
    iterations: int = 15000
    warmup_iters: int = 1000
    lr: LearningRates = field(default_factory=LearningRates)
    weights: LossWeights = field(default_factory=LossWeights)
    # initialization
    n_init: int = 10000
    init_radius: float = 1.0
    init_opacity: float = 0.1
    # density control
    densify_from: int = 500
    densify_until: int = 7500
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    max_scale: float = 0.2
    opacity_reset_interval: int = 0   # 3DGS-style periodic reset; off in the simplified scheme
    min_surfels: int = 100
    max_surfels: int = 20000
    # tangent supervision
    neighbors: int = 4
    tau: float = 0.010
    stride: int = 4
    cache_staleness: int = 50
    tsc_use_dominance: bool = False
    tsc_dolp_weighting: bool = False
    # objectives
    use_pol: bool = True
    use_tsc: bool = True
    opacity_reduction: str = "mean"
    opacity_loss_negated: bool = False
    eta: float = DEFAULT_ETA
    cubemap_res: int = 64
    cubemap_init: float = 0.5
    cutoff_sigma: float = 3.0
    # bookkeeping
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 500

    def __post_init__(self):
        if isinstance(self.lr, dict):
            self.lr = LearningRates(**self.lr)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.validate()

    def validate(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0 <= self.warmup_iters < self.iterations:
            raise ValueError("warmup_iters must lie in [0, iterations)")
        rates = asdict(self.lr)
        if any(v < 0 or not np.isfinite(v) for v in rates.values()):
            raise ValueError(f"learning rates must be finite and non-negative: {rates}")
        if self.tau <= 0 or self.stride < 1 or self.neighbors < 0:
            raise ValueError("tau must be positive, stride and neighbors non-negative")
        if self.min_surfels > self.max_surfels:
            raise ValueError("min_surfels exceeds max_surfels")
        if self.opacity_reduction not in ("mean", "sum"):
            raise ValueError("opacity_reduction is 'mean' or 'sum'")
        if self.eta <= 1.0:
            raise ValueError("eta must exceed 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Adam with one step counter shared by all groups."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lrs: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[k] -= lrs[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def remap(self, src, is_new, keys=PARAM_GROUPS[:-1]):
        for k in keys:
            for st in (self.m, self.v):
                a = st[k][src]
                a[is_new] = 0.0
                st[k] = a

    def reset(self, key, rows=None):
        for st in (self.m, self.v):
            if rows is None:
                st[key][:] = 0.0
            else:
                st[key][rows] = 0.0


def initial_surfels(n, rng, radius=1.0, opacity=0.1, points=None) -> SurfelSet:
    """Random surfels uniform in a ball (or at ``points``).

    Scales are isotropic: the root mean squared distance to the three
    nearest neighbours.
    """
    if points is None:
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        xyz = v * radius * rng.uniform(0, 1, (n, 1)) ** (1 / 3)
    else:
        xyz = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(xyz)
    k = min(4, n)
    d, _ = cKDTree(xyz).query(xyz, k)
    d = np.atleast_2d(d)
    nn = np.sqrt(np.mean(d[:, 1:] ** 2, axis=1)) if k > 1 else np.full(n, 0.01)
    s = np.log(np.maximum(nn, 1e-7))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return SurfelSet(xyz, np.stack([s, s], 1), q, np.full(n, float(logit(opacity))), np.zeros((n, 3)))


@dataclass
class DensifyResult:
    surfels: SurfelSet
    src: np.ndarray       # row of the previous set each new row came from
    is_new: np.ndarray    # rows created by cloning
    degenerate: bool = False

    @property
    def identity(self):
        return (not self.is_new.any()) and len(self.src) == len(self.is_new) and \
            np.array_equal(self.src, np.arange(len(self.src))) and not self.degenerate


def densify_prune(surfels: SurfelSet, grad_avg, rng, grad_threshold=2e-4, prune_opacity=0.005,
                  max_scale=0.2, min_count=0, max_count=np.inf) -> DensifyResult:
    """Clone high-gradient surfels, then prune transparent or oversized ones.

    Clones are placed at a point drawn from the parent's own Gaussian, so the
    pair can separate.  Pruning never goes below ``min_count`` (the most
    opaque are kept) unless every surfel is below the opacity floor, which is
    reported as degenerate with an empty set.
    """
    n = len(surfels)
    op = surfels.opacity
    if n == 0 or np.all(op < prune_opacity):
        return DensifyResult(surfels.subset(np.zeros(0, int)), np.zeros(0, int), np.zeros(0, bool), True)
    grad_avg = np.asarray(grad_avg, dtype=np.float64)
    cand = np.flatnonzero(grad_avg > grad_threshold)
    room = int(max(0, min(len(cand), max_count - n)))
    if room < len(cand):
        cand = cand[np.argsort(-grad_avg[cand], kind="stable")[:room]]
        cand.sort()
    src = np.concatenate([np.arange(n), cand]).astype(int)
    is_new = np.zeros(len(src), bool)
    is_new[n:] = True
    out = surfels.subset(src)
    if len(cand):
        R = surfels.rotation[cand]
        local = rng.normal(size=(len(cand), 2)) * surfels.scale[cand]
        out.xyz[n:] += np.einsum("nij,nj->ni", R[:, :, :2], local)
    keep = (out.opacity >= prune_opacity) & (out.scale.max(axis=1) <= max_scale)
    if keep.sum() < min_count:
        order = np.argsort(-out.opacity, kind="stable")
        keep[order[:min(min_count, len(order))]] = True
    idx = np.flatnonzero(keep)
    return DensifyResult(out.subset(idx), src[idx], is_new[idx], False)


def neighbor_views(cameras, k):
    """For each camera, indices of the ``k`` nearest other cameras by centre distance."""
    c = np.stack([cam.center for cam in cameras])
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    k = min(k, len(cameras) - 1)
    return [list(np.argsort(row, kind="stable")[:k]) for row in d]


def build_tsc_batch(ref, depth, alpha, views, neighbor_ids, caches, cfg: TrainConfig, offset=0) -> TscBatch:
    """Back-project the reference depth and gather tangent rows from the
    reference view and every neighbour that sees each point."""
    v_ref = views[ref]
    pts = backproject(depth, v_ref.camera, mask=v_ref.mask, stride=cfg.stride, alpha=alpha, offset=offset)
    rows_t, rows_h, wts, brs, pidx = [], [], [], [], []
    if len(pts):
        for k in [ref] + list(neighbor_ids):
            view = views[k]
            cam = view.camera
            if k == ref:
                vis = np.ones(len(pts), bool)
            else:
                d_k, a_k = caches[k]
                vis = visibility_mask(pts, cam, d_k, cfg.tau, a_k)
            uv, z = cam.project_points(pts.points)
            phi, ok, dom = sample_aop(view, np.where(np.isfinite(uv), uv, -1.0))
            use = np.flatnonzero(vis & ok & (z > 0))
            if not len(use):
                continue
            rows_t.append(projected_tangent(phi[use], cam))
            rows_h.append(pseudo_tangent(phi[use], cam))
            w = np.ones(len(use))
            if cfg.tsc_dolp_weighting and "dolp" in view.extras:
                xi = np.clip(np.rint(uv[use, 0]).astype(int), 0, cam.width - 1)
                yi = np.clip(np.rint(uv[use, 1]).astype(int), 0, cam.height - 1)
                w = np.minimum(1.0, view.extras["dolp"][yi, xi] / DOLP_WEIGHT_KNEE)
            wts.append(w)
            brs.append(dom[use] if cfg.tsc_use_dominance else np.full(len(use), UNKNOWN))
            pidx.append(use)
    if not rows_t:
        z3 = np.zeros((0, 3))
        return TscBatch(pts.pixels, np.zeros(0, int), z3, z3, np.zeros(0), np.zeros(0, int), len(pts))
    return TscBatch(pts.pixels, np.concatenate(pidx), np.concatenate(rows_t), np.concatenate(rows_h),
                    np.concatenate(wts), np.concatenate(brs).astype(int), len(pts))


def evaluate(surfels: SurfelSet, views, cutoff_sigma=3.0):
    """Normal MAE (degrees) per view over the eroded ground-truth mask."""
    out = []
    for v in views:
        buf = render.rasterize(surfels, v.camera, cutoff_sigma)
        mask = v.extras.get("eroded_mask", v.mask)
        out.append(metrics.normal_mae(buf.normal_world(), v.extras["gt_normal"], mask))
    return np.asarray(out)


@dataclass
class Objective:
    losses: dict
    total: float
    grads: Optional[dict]
    buffers: object
    batch: Optional[TscBatch]


def objective(surfels: SurfelSet, cubemap: Cubemap, view, cfg: TrainConfig, iteration: int,
              batch: Optional[TscBatch] = None, make_batch: Optional[Callable] = None,
              grad: bool = True) -> Objective:
    """Weighted training loss of one view and, with ``grad``, its gradients.

    Polarization and tangent terms are live from ``cfg.warmup_iters`` on.
    The tangent batch is taken from ``batch`` or built from the fresh render
    by ``make_batch(buffers)``; it is treated as constant (detached).
    Gradients are keyed like the optimizer groups, ``texels`` included when
    the render was polarized.
    """
    cam = view.camera
    live = iteration >= cfg.warmup_iters
    buf = render.render(surfels, cam, cubemap, cfg.eta, polarized=live, cutoff_sigma=cfg.cutoff_sigma)
    W = cfg.weights.as_dict(iteration)
    vals = dict.fromkeys(LOSS_NAMES, 0.0)
    mask = view.mask
    vals["l_rgb"], g_s0 = loss.l_rgb(buf.s0, view.s0, mask, grad=True)
    g_s0 = g_s0 * W["l_rgb"]
    g_s1 = g_s2 = None
    if live and cfg.use_pol:
        vals["l_pol"], (g_s1, g_s2) = loss.l_pol(buf.s1, view.s1, buf.s2, view.s2, mask, grad=True)
        g_s1, g_s2 = g_s1 * W["l_pol"], g_s2 * W["l_pol"]
    vals["l_m"], g_alpha = loss.l_mask(mask.astype(np.float64), buf.alpha, grad=True)
    g_alpha = g_alpha * W["l_m"]
    vals["l_d"], (g_depth, g_normal) = loss.l_depth_normal(buf.depth, buf.normal, buf.alpha, cam, grad=True)
    g_depth, g_normal = g_depth * W["l_d"], g_normal * W["l_d"]
    if live and cfg.use_tsc:
        if batch is None and make_batch is not None:
            batch = make_batch(buf)
        if batch is not None:
            vals["l_tsc"], g_tsc = loss.l_tsc(batch, buf.normal, cam, grad=True)
            g_normal = g_normal + W["l_tsc"] * g_tsc
    op = surfels.opacity
    vals["l_o"], g_op = loss.l_opacity(op, cfg.opacity_reduction, cfg.opacity_loss_negated, grad=True)
    total = loss.total(vals, cfg.weights, iteration)
    if not grad:
        return Objective(vals, total, None, buf, batch)
    grads, d_tex = render.backward(buf, surfels, cubemap, s0=g_s0, s1=g_s1, s2=g_s2,
                                   alpha=g_alpha, depth=g_depth, normal=g_normal)
    grads["opacity_logit"] = grads["opacity_logit"] + W["l_o"] * g_op * op * (1 - op)
    if d_tex is not None:
        grads["texels"] = d_tex
    return Objective(vals, total, grads, buf, batch)


@dataclass
class TrainResult:
    surfels: SurfelSet
    cubemap: Cubemap
    log: list
    config: TrainConfig
    stats: list = field(default_factory=list)
    degenerate: bool = False

    def log_csv(self):
        return format_log(self.log)


def format_log(rows):
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["iteration"]] + [repr(float(r[k])) for k in LOG_COLUMNS[1:]])
    return buf.getvalue()


class Trainer:
    def __init__(self, views, config: TrainConfig, init: Optional[SurfelSet] = None,
                 out_dir=None):
        if len(views) < 2:
            raise ValueError("training needs at least two views")
        self.views = list(views)
        self.cfg = config
        self.rng = np.random.default_rng(config.seed)
        self.surfels = init.copy() if init is not None else initial_surfels(
            config.n_init, self.rng, config.init_radius, config.init_opacity)
        self.cubemap = Cubemap.constant(config.cubemap_init, config.cubemap_res)
        self.adam = Adam(self._params())
        self.neighbors = neighbor_views([v.camera for v in self.views], config.neighbors)
        self.caches = {}
        self.cache_iter = {}
        self.grad_accum = np.zeros(len(self.surfels))
        self.grad_count = np.zeros(len(self.surfels))
        self.order = []
        self.iteration = 0
        self.log = []
        self.stats = []
        self.degenerate = False
        self.out_dir = Path(out_dir) if out_dir is not None else None

    def _params(self):
        s = self.surfels
        return {"xyz": s.xyz, "log_scale": s.log_scale, "quat": s.quat,
                "opacity_logit": s.opacity_logit, "f_dc": s.f_dc, "texels": self.cubemap.texels}

    def _next_view(self):
        if not self.order:
            self.order = list(self.rng.permutation(len(self.views)))
        return int(self.order.pop(0))

    def _refresh_cache(self, k, it):
        if k in self.caches and it - self.cache_iter[k] <= self.cfg.cache_staleness:
            return
        buf = render.rasterize(self.surfels, self.views[k].camera, self.cfg.cutoff_sigma)
        self.caches[k] = (buf.depth.copy(), buf.alpha.copy())
        self.cache_iter[k] = it

    def _check(self, name, arr, buffers):
        if np.all(np.isfinite(arr)):
            return
        dump = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            dump = self.out_dir / f"nonfinite_{self.iteration:06d}.npz"
            np.savez(dump, **{k: v for k, v in buffers.items() if v is not None})
        raise NonFiniteLossError(f"non-finite {name} at iteration {self.iteration}"
                                 + (f"; buffers saved to {dump}" if dump else ""), dump)

    def step(self):
        cfg = self.cfg
        it = self.iteration
        k = self._next_view()
        view = self.views[k]
        cam = view.camera

        def make_batch(buf):
            for j in self.neighbors[k]:
                self._refresh_cache(j, it)
            return build_tsc_batch(k, buf.depth, buf.alpha, self.views, self.neighbors[k], self.caches,
                                   cfg, offset=int(self.rng.integers(cfg.stride)))

        ob = objective(self.surfels, self.cubemap, view, cfg, it, make_batch=make_batch)
        buf, vals, total, grads = ob.buffers, ob.losses, ob.total, ob.grads
        row = {"iteration": it, **vals, "total": total}
        self._check("loss", np.array(list(vals.values()) + [total]),
                    dict(s0=buf.s0, s1=buf.s1, s2=buf.s2, alpha=buf.alpha, depth=buf.depth, normal=buf.normal))
        for name, g in grads.items():
            self._check(f"gradient of {name}", g, {name: g, "alpha": buf.alpha, "depth": buf.depth})
        self.adam.step(self._params(), grads, cfg.lr.at(it, cfg.iterations))
        self.surfels.normalize_quaternions()
        np.maximum(self.cubemap.texels, 0.0, out=self.cubemap.texels)
        self.caches[k] = (buf.depth.copy(), buf.alpha.copy())
        self.cache_iter[k] = it

        du = buf.screen_grad["u"]
        seen = buf._ctx.proj.visible
        self.grad_accum[seen] += np.linalg.norm(du[seen] * (0.5 * cam.width), axis=1)
        self.grad_count[seen] += 1
        self._density_control(it)

        self.log.append(row)
        self.stats.append({"iteration": it, "view": k, "surfels": len(self.surfels)})
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("it %d view %d total %.5f surfels %d", it, k, total, len(self.surfels))
        self.iteration += 1
        if cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0 and self.out_dir is not None:
            self.save_checkpoint(self.out_dir / f"ckpt_{self.iteration:06d}")
        return row

    def _density_control(self, it):
        cfg = self.cfg
        n = it + 1
        if cfg.densify_interval and cfg.densify_from <= n <= cfg.densify_until and n % cfg.densify_interval == 0:
            avg = self.grad_accum / np.maximum(self.grad_count, 1)
            res = densify_prune(self.surfels, avg, self.rng, cfg.densify_grad_threshold, cfg.prune_opacity,
                                cfg.max_scale, cfg.min_surfels, cfg.max_surfels)
            if res.degenerate:
                self.degenerate = True
                raise NonFiniteLossError(f"all surfels transparent at iteration {it}; model degenerate")
            self.surfels = res.surfels
            self.adam.remap(res.src, res.is_new)
            self.grad_accum = np.zeros(len(self.surfels))
            self.grad_count = np.zeros(len(self.surfels))
        if cfg.opacity_reset_interval and n % cfg.opacity_reset_interval == 0 and n < cfg.densify_until:
            lo = float(logit(0.01))
            self.surfels.opacity_logit[:] = np.minimum(self.surfels.opacity_logit, lo)
            self.adam.reset("opacity_logit")

    def run(self, callback: Optional[Callable] = None) -> TrainResult:
        while self.iteration < self.cfg.iterations:
            row = self.step()
            if callback is not None:
                callback(self, row)
        return self.result()

    def result(self):
        return TrainResult(self.surfels, self.cubemap, self.log, self.cfg, self.stats, self.degenerate)

    # checkpoints -----------------------------------------------------------
    def save_checkpoint(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        io.write_ply(d / "surfels.ply", self.surfels)
        io.write_cubemap(d / "cubemap", self.cubemap)
        (d / "log.csv").write_text(format_log(self.log))
        (d / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=2))
        state = {f"p_{k}": v for k, v in self._params().items()}
        state.update({f"m_{k}": v for k, v in self.adam.m.items()})
        state.update({f"v_{k}": v for k, v in self.adam.v.items()})
        keys = sorted(self.caches)
        state.update(cache_keys=np.array(keys, int), cache_iters=np.array([self.cache_iter[j] for j in keys], int),
                     grad_accum=self.grad_accum, grad_count=self.grad_count,
                     order=np.array(self.order, int), scalars=np.array([self.iteration, self.adam.t]))
        for j in keys:
            state[f"cd_{j}"], state[f"ca_{j}"] = self.caches[j]
        np.savez(d / "state.npz", **state)
        (d / "rng.json").write_text(json.dumps(self.rng.bit_generator.state))
        (d / "stats.json").write_text(json.dumps(self.stats))

    @classmethod
    def from_checkpoint(cls, directory, views, config: Optional[TrainConfig] = None, out_dir=None):
        d = Path(directory)
        cfg = config or TrainConfig.from_dict(json.loads((d / "config.json").read_text()))
        st = np.load(d / "state.npz")
        init = SurfelSet(st["p_xyz"], st["p_log_scale"], st["p_quat"], st["p_opacity_logit"], st["p_f_dc"])
        tr = cls(views, cfg, init=init, out_dir=out_dir)
        tr.surfels = init
        tr.cubemap = Cubemap(st["p_texels"].copy())
        tr.adam = Adam(tr._params())
        for k in PARAM_GROUPS:
            tr.adam.m[k] = st[f"m_{k}"].copy()
            tr.adam.v[k] = st[f"v_{k}"].copy()
        tr.iteration, tr.adam.t = (int(x) for x in st["scalars"])
        tr.grad_accum, tr.grad_count = st["grad_accum"].copy(), st["grad_count"].copy()
        tr.order = [int(x) for x in st["order"]]
        for j, ci in zip(st["cache_keys"], st["cache_iters"]):
            tr.caches[int(j)] = (st[f"cd_{j}"].copy(), st[f"ca_{j}"].copy())
            tr.cache_iter[int(j)] = int(ci)
        tr.rng.bit_generator.state = json.loads((d / "rng.json").read_text())
        tr.log = [{"iteration": int(r["iteration"]), **{k: float(r[k]) for k in LOG_COLUMNS[1:]}}
                  for r in csv.DictReader(_stdio.StringIO((d / "log.csv").read_text()))]
        tr.stats = json.loads((d / "stats.json").read_text())
        return tr


def train(views, config: Optional[TrainConfig] = None, init: Optional[SurfelSet] = None,
          out_dir=None, callback=None) -> TrainResult:
    """Optimize surfels and the environment cube map against ``views``."""
    return Trainer(views, config or TrainConfig(), init, out_dir).run(callback)
