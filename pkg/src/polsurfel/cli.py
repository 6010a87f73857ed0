"""Command-line entry point.

Subcommands: synth, render, train, mask, eval, ablate-tau.  Every command
writes ``effective_config.json`` next to its outputs; feeding that file back
through ``--config`` repeats the run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, metrics, optim, render, synth, visibility
from .optim import TrainConfig

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NONFINITE = 3

DEFAULT_TAUS = (0.002, 0.005, 0.010, 0.020, 0.050)
DATA_DEFAULTS = {"scene": "sphere", "material": "mixed", "views": 12, "resolution": 128,
                 "eta": 1.5, "seed": 0}

log = logging.getLogger("polsurfel")


class CliError(Exception):
    code = EXIT_INPUT


class NonFiniteMetric(CliError):
    code = EXIT_NONFINITE


# configuration ---------------------------------------------------------------

def load_config(path):
    """Read a JSON config: ``{"data": {...}, "train": {...}, "taus": [...]}``."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"{p}: invalid JSON ({e})") from e
    if not isinstance(doc, dict) or set(doc) - {"data", "train", "taus"}:
        raise CliError(f"{p}: top level must be an object with keys among data, train, taus")
    unknown = set(doc.get("data", {})) - set(DATA_DEFAULTS)
    if unknown:
        raise CliError(f"{p}: unknown data keys {sorted(unknown)}")
    return doc


def effective_config(args):
    doc = load_config(args.config)
    data = dict(DATA_DEFAULTS, **doc.get("data", {}))
    train = dict(doc.get("train", {}))
    for key, flag in (("views", args.views), ("resolution", args.resolution), ("eta", args.eta),
                      ("seed", args.seed)):
        if flag is not None:
            data[key] = flag
    for key in ("scene", "material"):
        if getattr(args, key, None) is not None:
            data[key] = getattr(args, key)
    if args.seed is not None:
        train["seed"] = args.seed
    if args.eta is not None:
        train["eta"] = args.eta
    if args.tau is not None:
        train["tau"] = args.tau
    if args.no_pol:
        train["use_pol"] = False
    if args.no_tsc:
        train["use_tsc"] = False
    if getattr(args, "iterations", None) is not None:
        train["iterations"] = args.iterations
        train.setdefault("warmup_iters", min(1000, args.iterations // 3))
        wu = train["warmup_iters"]
        if wu >= args.iterations:
            train["warmup_iters"] = args.iterations // 3
    train.setdefault("eta", data["eta"])
    try:
        cfg = TrainConfig.from_dict(train)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad train config: {e}") from e
    taus = list(doc.get("taus", DEFAULT_TAUS))
    return {"data": data, "train": cfg.to_dict(), "taus": taus}, cfg


def write_effective(out, eff):
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(json.dumps(eff, indent=2, sort_keys=True) + "\n")


def _out(args):
    if args.out is None:
        raise CliError("--out is required")
    return Path(args.out)


def _load_dataset(path):
    p = Path(path)
    if not (p / "cameras.json").is_file():
        raise CliError(f"no dataset at {p} (cameras.json missing)")
    try:
        return synth.Dataset.load(p)
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot read dataset {p}: {e}") from e


def _dataset(args, data):
    if getattr(args, "data", None):
        return _load_dataset(args.data)
    return synth.generate(data["scene"], data["views"], data["resolution"], data["eta"], data["seed"],
                          data["material"])


def _load_model(path):
    p = Path(path)
    if not (p / "surfels.ply").is_file():
        raise CliError(f"no model at {p} (surfels.ply missing)")
    try:
        return io.read_ply(p / "surfels.ply"), io.read_cubemap(p / "cubemap")
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read model {p}: {e}") from e


def _finite(d):
    bad = [k for k, v in d.items() if isinstance(v, float) and not np.isfinite(v)]
    if bad:
        raise NonFiniteMetric(f"non-finite metrics: {bad}")


def save_model(out, surfels, cubemap):
    io.write_ply(out / "surfels.ply", surfels)
    io.write_cubemap(out / "cubemap", cubemap)


# commands ------------------------------------------------------------------

def cmd_synth(args):
    eff, _ = effective_config(args)
    out = _out(args)
    d = eff["data"]
    try:
        ds = synth.generate(d["scene"], d["views"], d["resolution"], d["eta"], d["seed"], d["material"])
    except ValueError as e:
        raise CliError(str(e)) from e
    ds.save(out)
    write_effective(out, eff)
    print(f"wrote {len(ds.views)} views to {out}")
    return EXIT_OK


def cmd_render(args):
    eff, cfg = effective_config(args)
    out = _out(args)
    surfels, cubemap = _load_model(args.model)
    ds = _load_dataset(args.data)
    for i, v in enumerate(ds.views):
        buf = render.render(surfels, v.camera, cubemap, cfg.eta, polarized=True, cutoff_sigma=cfg.cutoff_sigma)
        d = out / f"view_{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for name, arr in (("s0", buf.s0), ("s1", buf.s1), ("s2", buf.s2), ("alpha", buf.alpha),
                          ("depth", buf.depth), ("normal", buf.normal_world())):
            io.write_pfm(d / f"{name}.pfm", arr)
    io.write_cameras(out / "cameras.json", ds.cameras)
    write_effective(out, eff)
    return EXIT_OK


def cmd_train(args):
    eff, cfg = effective_config(args)
    out = _out(args)
    ds = _dataset(args, eff["data"])
    init = io.read_ply(args.init) if args.init else None
    write_effective(out, eff)
    try:
        if args.resume:
            tr = optim.Trainer.from_checkpoint(args.resume, ds.views, cfg, out_dir=out)
        else:
            tr = optim.Trainer(ds.views, cfg, init, out_dir=out)
        res = tr.run()
    except optim.NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    save_model(out, res.surfels, res.cubemap)
    (out / "log.csv").write_text(res.log_csv())
    mae = optim.evaluate(res.surfels, ds.views, cfg.cutoff_sigma)
    m = {"normal_mae_deg": float(np.mean(mae)), "per_view_mae_deg": [float(x) for x in mae],
         "surfels": len(res.surfels)}
    (out / "metrics.json").write_text(json.dumps(m, indent=2) + "\n")
    print(json.dumps({"normal_mae_deg": m["normal_mae_deg"], "surfels": m["surfels"]}))
    _finite({"normal_mae_deg": m["normal_mae_deg"]})
    return EXIT_OK


def visibility_report(surfels, ds, tau, stride, k_neighbors, cutoff_sigma=3.0):
    """Depth-guided masks for every (reference, neighbour) pair and their
    confusion counts against the analytic oracle."""
    bufs = [render.rasterize(surfels, v.camera, cutoff_sigma) for v in ds.views]
    nbrs = optim.neighbor_views(ds.cameras, k_neighbors)
    total = dict(tp=0, fp=0, fn=0, tn=0)
    masks = {}
    for i, v in enumerate(ds.views):
        pts = visibility.backproject(bufs[i].depth, v.camera, v.mask, stride, bufs[i].alpha)
        for j in nbrs[i]:
            pred = visibility.visibility_mask(pts, ds.views[j].camera, bufs[j].depth, tau, bufs[j].alpha)
            truth = visibility.oracle_visibility(pts, ds.views[j].camera, ds.scene)
            c = visibility.confusion(pred, truth)
            for key in total:
                total[key] += c[key]
            masks[(i, j)] = (pts, pred)
    n = sum(total.values())
    acc = (total["tp"] + total["tn"]) / n if n else float("nan")
    cov = (total["tp"] + total["fp"]) / n if n else float("nan")
    return {"tau": tau, "accuracy": acc, "coverage": cov, **total}, masks


def cmd_mask(args):
    eff, cfg = effective_config(args)
    out = _out(args)
    surfels, _ = _load_model(args.model)
    ds = _load_dataset(args.data)
    rep, masks = visibility_report(surfels, ds, cfg.tau, cfg.stride, cfg.neighbors, cfg.cutoff_sigma)
    out.mkdir(parents=True, exist_ok=True)
    for (i, j), (pts, pred) in masks.items():
        img = np.full((ds.views[i].camera.height, ds.views[i].camera.width), -1.0)
        img[pts.pixels[:, 1], pts.pixels[:, 0]] = pred.astype(float)
        io.write_pfm(out / f"mask_{i:03d}_{j:03d}.pfm", img)
    (out / "visibility.json").write_text(json.dumps(rep, indent=2) + "\n")
    write_effective(out, eff)
    print(json.dumps(rep))
    _finite({"accuracy": float(rep["accuracy"])})
    return EXIT_OK


def _read_pred_view(d):
    def pick(*names):
        for n in names:
            if (d / f"{n}.pfm").is_file():
                return io.read_pfm(d / f"{n}.pfm").astype(np.float64)
        raise CliError(f"{d}: none of {names} found")
    return pick("normal", "gt_normal"), pick("depth", "gt_depth")


def eval_metrics(ds, normals, depths, seed=0):
    """Normal MAE over eroded masks and Chamfer between predicted and GT depth clouds."""
    maes, pred_pts, gt_pts = [], [], []
    for v, n, dep in zip(ds.views, normals, depths):
        maes.append(metrics.normal_mae(n, v.extras["gt_normal"], v.extras["eroded_mask"]))
        pred_pts.append(metrics.depth_points(dep, v.camera, v.mask))
        gt_pts.append(metrics.depth_points(v.extras["gt_depth"], v.camera, v.mask))
    cd = metrics.chamfer(np.concatenate(pred_pts), np.concatenate(gt_pts), seed=seed)
    return {"normal_mae_deg": float(np.mean(maes)), "chamfer_milli": cd,
            "per_view_mae_deg": [float(m) for m in maes]}


def cmd_eval(args):
    eff, cfg = effective_config(args)
    out = _out(args)
    ds = _load_dataset(args.data)
    if args.model:
        surfels, _ = _load_model(args.model)
        bufs = [render.rasterize(surfels, v.camera, cfg.cutoff_sigma) for v in ds.views]
        normals = [b.normal_world() for b in bufs]
        depths = [np.where(b.alpha > render.ALPHA_THRESHOLD, b.depth, 0.0) for b in bufs]
    elif args.pred:
        pred = Path(args.pred)
        views = [_read_pred_view(pred / f"view_{i:03d}") for i in range(len(ds.views))]
        normals, depths = [v[0] for v in views], [v[1] for v in views]
    else:
        raise CliError("eval needs --model or --pred")
    m = eval_metrics(ds, normals, depths, seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(m, indent=2) + "\n")
    write_effective(out, eff)
    print(json.dumps({k: m[k] for k in ("normal_mae_deg", "chamfer_milli")}))
    _finite({k: m[k] for k in ("normal_mae_deg", "chamfer_milli")})
    return EXIT_OK


def cmd_ablate_tau(args):
    eff, cfg = effective_config(args)
    out = _out(args)
    ds = _dataset(args, eff["data"])
    fixed = _load_model(args.model)[0] if args.model else None
    rows = []
    for tau in eff["taus"]:
        c = TrainConfig.from_dict(dict(cfg.to_dict(), tau=float(tau)))
        if fixed is None:
            try:
                surfels = optim.train(ds.views, c).surfels
            except optim.NonFiniteLossError as e:
                print(f"error: {e}", file=sys.stderr)
                return EXIT_NONFINITE
        else:
            surfels = fixed
        rep, _ = visibility_report(surfels, ds, float(tau), c.stride, c.neighbors, c.cutoff_sigma)
        mae = float(np.mean(optim.evaluate(surfels, ds.views, c.cutoff_sigma)))
        rows.append({"tau": float(tau), "accuracy": rep["accuracy"], "coverage": rep["coverage"], "mae_deg": mae})
        print(json.dumps(rows[-1]), flush=True)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablate_tau.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["tau", "accuracy", "coverage", "mae_deg"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    write_effective(out, eff)
    _finite({f"{r['tau']}:{k}": float(r[k]) for r in rows for k in ("accuracy", "mae_deg")})
    return EXIT_OK


# parser ----------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with 'data', 'train' and 'taus' sections")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1, help="numba worker threads (1 = deterministic)")
    common.add_argument("--resolution", type=int)
    common.add_argument("--views", type=int)
    common.add_argument("--tau", type=float)
    common.add_argument("--eta", type=float)
    common.add_argument("--no-pol", action="store_true", help="disable the polarimetric loss")
    common.add_argument("--no-tsc", action="store_true", help="disable tangent-space consistency")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="polsurfel", description="Polarimetric surfel reconstruction")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--scene", choices=["sphere", "small_sphere", "torus", "two_spheres"])
    s.add_argument("--material", choices=sorted(synth.MATERIALS))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("render", parents=[common], help="render a model into every dataset view")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_render)

    for name, func, hlp in (("train", cmd_train, "optimize surfels against a dataset"),
                            ("ablate-tau", cmd_ablate_tau, "sweep the visibility threshold")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--data", help="dataset directory (generated from the config when omitted)")
        s.add_argument("--scene", choices=["sphere", "small_sphere", "torus", "two_spheres"])
        s.add_argument("--material", choices=sorted(synth.MATERIALS))
        s.add_argument("--iterations", type=int)
        if name == "train":
            s.add_argument("--init", help="PLY point cloud / surfels to start from")
            s.add_argument("--resume", help="checkpoint directory to resume from")
        else:
            s.add_argument("--model", help="evaluate a fixed model instead of training per tau")
        s.set_defaults(func=func)

    s = sub.add_parser("mask", parents=[common], help="dump depth-guided visibility masks")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("eval", parents=[common], help="normal MAE and Chamfer distance")
    s.add_argument("--data", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--model")
    g.add_argument("--pred", help="directory of view_###/{normal,depth}.pfm (gt_* names accepted)")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_INPUT
        if args.threads > 1:
            # kernels are serial; the setting only reaches numba's parallel pool
            import numba
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (io.FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
