"""Command-line entry point.

Every command writes into ``--out`` (a directory) together with a
``manifest.txt`` that holds the full effective configuration; passing that
manifest back through ``--config`` reproduces the run.

Exit codes: 0 success, 1 usage error (bad flags, missing files, invalid
config), 2 numerical or runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .core import RunConfig, load_cloud
from .errors import InvalidConfig, ShapeError, StochPSRError

log = logging.getLogger("stochpsr")

BUNDLED = ("circle.xyz",)
COMMANDS = ("reconstruct", "query", "raycast", "nbv", "scanloop", "latent-train", "latent-infer", "nll",
            "net-info")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# argument plumbing


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_config_flags(parser):
    g = parser.add_argument_group("configuration (every key of the run config)")
    g.add_argument("--config", type=Path, help="key=value config file; flags override it")
    for f in dataclasses.fields(RunConfig):
        typ = type(f.default)
        names = [_flag(f.name)]
        if f.name == "samples_per_epoch":
            names.append("--samples")
        if typ is bool:
            g.add_argument(*names, dest=f.name, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS,
                           help=f"(default {f.default})")
        else:
            g.add_argument(*names, dest=f.name, type=typ, default=argparse.SUPPRESS, metavar=typ.__name__.upper(),
                           help=f"(default {f.default!r})")


def _effective_config(args) -> RunConfig:
    base = RunConfig.load(_existing(args.config)) if args.config is not None else RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig) if hasattr(args, f.name)}
    return dataclasses.replace(base, **overrides)


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input file not found: {p}")
    return p


def _cloud_path(path) -> Path:
    """Existing path, or the name of a bundled dataset."""
    p = Path(path)
    if p.exists():
        return p
    if str(path) in BUNDLED:
        log.info("using bundled dataset %s", path)
        with resources.as_file(resources.files("stochpsr") / "data" / str(path)) as bundled:
            return Path(bundled)
    raise UsageError(f"input file not found: {p}")


def _vector(text, name):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"--{name} expects comma-separated numbers, got {text!r}") from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, argv, config: RunConfig, extra=None):
    lines = [f"# stochpsr {__version__} {command}", "# argv: " + " ".join(argv)]
    for k, v in (extra or {}).items():
        lines.append(f"# {k}: {v}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n" + config.to_text())


def _fmt(x):
    return repr(float(x))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (str, int, np.integer)) else _fmt(v) for v in row])


def _axis_names(d, prefix=""):
    return [prefix + a for a in "xyz"[:d]]


# ---------------------------------------------------------------------------
# commands


def cmd_reconstruct(args, config, argv):
    from .queries import grid_eval, levelset_from_grid, save_grid, save_implicit, write_obj, write_polyline_csv
    from .errors import EmptyResult
    from .training import train, write_loss_csv

    cloud = load_cloud(_cloud_path(args.cloud))
    config = config.replace(d=cloud.d)
    out = _out_dir(args)
    ckpt_dir = None
    if config.checkpoint_every > 0:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
    _write_manifest(out, "reconstruct", argv, config)
    implicit = train(cloud, config, checkpoint_dir=ckpt_dir)
    save_implicit(implicit, out / "model.nssi")
    write_loss_csv(implicit.history, out / "losses.csv")
    grid = grid_eval(implicit, config.grid_resolution)
    save_grid(grid, out / "grid.bin")
    _write_grid_csv(grid, out / "grid.csv")
    try:
        level = levelset_from_grid(grid)
    except EmptyResult:
        log.warning("mean field has no zero crossing on the grid; writing an empty levelset")
        level = None
    if cloud.d == 2:
        path = out / "levelset.csv"
        if level is None:
            path.write_text("curve,x,y\n")
        else:
            write_polyline_csv(level, path)
    else:
        path = out / "levelset.obj"
        if level is None:
            path.write_text("")
        else:
            write_obj(level, path)
    return 0


def _write_grid_csv(grid, path):
    nodes = grid.nodes()
    rows = (list(n) + [m, v, p] for n, m, v, p in zip(nodes, grid.mean.ravel(), grid.variance.ravel(),
                                                      grid.probability.ravel()))
    _write_rows(path, _axis_names(grid.d) + ["mean", "variance", "inside_probability"], rows)


def _load_query_model(path, code=None):
    from .queries import load_implicit

    implicit = load_implicit(_existing(path))
    if code is not None:
        import torch
        implicit.code = torch.from_numpy(code)
    if implicit.mean_net.latent_width and implicit.code is None:
        raise UsageError(f"{path} is a corpus model without a code; run latent-infer first")
    return implicit


def cmd_query(args, config, argv):
    from .queries import grid_eval

    implicit = _load_query_model(args.checkpoint)
    out = _out_dir(args)
    _write_manifest(out, "query", argv, implicit.config.replace(seed=config.seed))
    if args.points is not None:
        pts = np.loadtxt(_existing(args.points), ndmin=2, comments="#", delimiter=args.delimiter)
        if pts.shape[1] < implicit.d:
            raise UsageError(f"{args.points}: need at least {implicit.d} columns")
        pts = pts[:, : implicit.d]
        mean = implicit.mean(pts)
        var = implicit.variance(pts)
        from .queries import inside_from_moments
        rows = (list(p) + [m, v, q] for p, m, v, q in zip(pts, mean, var, inside_from_moments(mean, var)))
        _write_rows(out / "query.csv", _axis_names(implicit.d) + ["mean", "variance", "inside_probability"], rows)
    else:
        res = args.grid if args.grid is not None else implicit.config.grid_resolution
        _write_grid_csv(grid_eval(implicit, res), out / "query.csv")
    return 0


def cmd_raycast(args, config, argv):
    from .raycast import discretize, expected_collision, naive_opacity, ray_in_box, transmittance

    implicit = _load_query_model(args.checkpoint)
    rays = []
    if args.rays is not None:
        table = np.loadtxt(_existing(args.rays), ndmin=2, comments="#", delimiter=args.delimiter)
        if table.shape[1] != 2 * implicit.d:
            raise UsageError(f"{args.rays}: expected {2 * implicit.d} columns (origin then direction)")
        rays = [(row[: implicit.d], row[implicit.d:]) for row in table]
    for o, dv in zip(args.origin or [], args.direction or []):
        rays.append((_vector(o, "origin"), _vector(dv, "direction")))
    if len(args.origin or []) != len(args.direction or []):
        raise UsageError("--origin and --direction must be given the same number of times")
    if not rays:
        raise UsageError("no rays given (use --origin/--direction or --rays)")
    out = _out_dir(args)
    cfg = implicit.config.replace(seed=config.seed, ray_samples=config.ray_samples, qmc_points=config.qmc_points,
                                  qmc_replicates=config.qmc_replicates)
    _write_manifest(out, "raycast", argv, cfg)
    d = implicit.d
    samples, hits = [], []
    for k, (o, dv) in enumerate(rays):
        if len(o) != d or len(dv) != d:
            raise UsageError(f"ray {k}: origin and direction need {d} components")
        ray = ray_in_box(o, dv, implicit.world_box)
        if ray is None:
            log.warning("ray %d misses the reconstruction box", k)
            hits.append([k, float("nan")] + [float("nan")] * d + [0.0, float("nan")])
            continue
        disc = discretize(implicit, ray, cfg.ray_samples)
        tr = transmittance(implicit, ray, cfg.ray_samples, cfg.qmc_points, cfg.qmc_replicates, cfg.seed, disc=disc)
        _, naive = naive_opacity(implicit, ray, disc=disc)
        for t, p, T, se, nv, mi in zip(tr.times, disc.points, tr.values, tr.stderr, naive, tr.marginal_inside):
            samples.append([k, t] + list(p) + [T, se, 1.0 - T, nv, mi])
        t_hit, point, term = expected_collision(implicit, ray, trans=tr)
        hits.append([k, t_hit] + list(point) + [term, implicit.variance(point[None])[0]])
    _write_rows(out / "rays.csv", ["ray", "t"] + _axis_names(d) + ["transmittance", "transmittance_stderr",
                                                                   "opacity", "naive_opacity", "marginal_inside"],
                samples)
    _write_rows(out / "collisions.csv", ["ray", "t_expected"] + _axis_names(d) + ["terminated_probability",
                                                                                 "variance"], hits)
    return 0


def cmd_nbv(args, config, argv):
    from .nbv import ScoreSettings, global_search, view_sphere_for

    implicit = _load_query_model(args.checkpoint)
    cfg = config.replace(d=implicit.d, box_margin=implicit.config.box_margin,
                         kernel_sigma=implicit.config.kernel_sigma)
    out = _out_dir(args)
    _write_manifest(out, "nbv", argv, cfg, {"mode": args.mode})
    space = view_sphere_for(implicit.world_cloud().points, cfg.view_radius_factor, args.mode)
    poses = global_search(implicit, space, cfg.nbv_starts, cfg.nbv_steps, cfg.nbv_step_size, cfg.fd_step,
                          ScoreSettings.from_config(cfg), seed=cfg.seed)
    d = implicit.d
    rows = [[r, p.score] + list(p.position) + list(p.direction) + [" ".join(_fmt(v) for v in p.params)]
            for r, p in enumerate(poses)]
    _write_rows(out / "poses.csv", ["rank", "score"] + _axis_names(d, "pos_") + _axis_names(d, "dir_") + ["params"],
                rows)
    return 0


def cmd_scanloop(args, config, argv):
    from .scanloop import parse_shape, run_session

    shape = parse_shape(args.shape)
    config = config.replace(d=shape.d)
    out = _out_dir(args)
    _write_manifest(out, "scanloop", argv, config, {"shape": args.shape, "strategy": args.strategy,
                                                    "note": "chamfer_proxy_error is a stand-in reconstruction metric"})
    run_session(shape, config, args.strategy, out_dir=out, space_mode=args.mode)
    return 0


def _write_codes(path, codes):
    codes = np.atleast_2d(codes)
    _write_rows(path, ["scan"] + [f"z{k}" for k in range(codes.shape[1])],
                ([k] + list(c) for k, c in enumerate(codes)))


def cmd_latent_train(args, config, argv):
    from .latent import train_corpus
    from .queries import save_implicit
    from .training import write_loss_csv

    scans = [load_cloud(_cloud_path(p)) for p in args.scans]
    config = config.replace(d=scans[0].d)
    out = _out_dir(args)
    _write_manifest(out, "latent-train", argv, config, {"scans": " ".join(map(str, args.scans))})
    model = train_corpus(scans, config)
    implicit = model.implicit_for(0)
    implicit.code = None
    save_implicit(implicit, out / "corpus.nssi")
    write_loss_csv(model.history, out / "losses.csv")
    _write_codes(out / "codes.csv", model.table.codes.numpy())
    return 0


def _corpus(path):
    from .latent import CorpusModel
    from .queries import load_implicit

    implicit = load_implicit(_existing(path))
    if implicit.latent_table is None:
        raise UsageError(f"{path} holds no latent table (not written by latent-train)")
    return CorpusModel.from_implicit(implicit)


def cmd_latent_infer(args, config, argv):
    from .latent import infer_code
    from .queries import save_implicit

    model = _corpus(args.checkpoint)
    scan = load_cloud(_cloud_path(args.scan))
    cfg = _inference_config(model, config)
    out = _out_dir(args)
    _write_manifest(out, "latent-infer", argv, cfg, {"refine_epochs": args.refine_epochs})
    code, implicit = infer_code(model, scan, cfg.infer_iters, cfg, finetune_epochs=args.refine_epochs)
    save_implicit(implicit, out / "model.nssi")
    _write_codes(out / "code.csv", code.numpy())
    return 0


def _inference_config(model, config):
    keep = {"seed", "infer_iters", "latent_learning_rate", "batch_size", "code_init_sigma", "threads",
            "finetune_epochs", "learning_rate", "samples_per_epoch"}
    changes = {k: getattr(config, k) for k in keep}
    return model.config.replace(**changes)


def cmd_nll(args, config, argv):
    from .latent import cloud_nll, infer_code
    from .queries import load_implicit

    cloud = load_cloud(_cloud_path(args.cloud))
    implicit = load_implicit(_existing(args.checkpoint))
    out = _out_dir(args)
    inferred = False
    if implicit.mean_net.latent_width and (implicit.code is None or args.infer):
        model = _corpus(args.checkpoint)
        cfg = _inference_config(model, config)
        _, implicit = infer_code(model, cloud, cfg.infer_iters, cfg)
        inferred = True
    _write_manifest(out, "nll", argv, implicit.config, {"code_inferred": inferred})
    value = cloud_nll(implicit, cloud)
    _write_rows(out / "nll.csv", ["points", "nll"], [[cloud.n, value]])
    print(_fmt(value))
    return 0


def cmd_net_info(args, config, argv):
    from .queries import load_implicit

    implicit = load_implicit(_existing(args.checkpoint))
    for name, net in (("mean", implicit.mean_net), ("covariance", implicit.cov_net)):
        print(f"{name}: head={net.head} d={net.spatial_dim} width={net.hidden_width} depth={net.depth} "
              f"omega0={net.omega0} latent={net.latent_width} parameters={net.n_parameters()}")
    print(f"cloud: {implicit.cloud.n} points")
    print(f"transform: scale={implicit.transform.scale!r} offset={[float(v) for v in implicit.transform.offset]}")
    if implicit.latent_table is not None:
        print(f"latent table: {implicit.latent_table.shape[0]} codes of width {implicit.latent_table.shape[1]}")
    return 0


HANDLERS = {
    "reconstruct": cmd_reconstruct, "query": cmd_query, "raycast": cmd_raycast, "nbv": cmd_nbv,
    "scanloop": cmd_scanloop, "latent-train": cmd_latent_train, "latent-infer": cmd_latent_infer,
    "nll": cmd_nll, "net-info": cmd_net_info,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stochpsr", description="Stochastic neural surface reconstruction from oriented points.")
    parser.add_argument("--version", action="version", version=f"stochpsr {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text, out_default):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")
        _add_config_flags(p)
        return p

    p = command("reconstruct", "Train mean and covariance fields on an oriented cloud.", "reconstruction")
    p.add_argument("cloud", help="cloud file (.ply, or text rows 'x.. nx..'), or a bundled dataset name")

    p = command("query", "Mean, variance and inside probability at points or on a grid.", "query")
    p.add_argument("checkpoint")
    p.add_argument("--points", help="text file of query points, one per row")
    p.add_argument("--grid", type=int, help="grid resolution (default: config grid_resolution)")
    p.add_argument("--delimiter", default=None, help="column delimiter of --points (default whitespace)")

    p = command("raycast", "Transmittance, opacity and expected collision along rays.", "raycast")
    p.add_argument("checkpoint")
    p.add_argument("--origin", action="append", help="ray origin 'x,y[,z]' (repeatable)")
    p.add_argument("--direction", action="append", help="ray direction 'x,y[,z]' (repeatable)")
    p.add_argument("--rays", help="text file with one ray per row: origin then direction")
    p.add_argument("--delimiter", default=None, help="column delimiter of --rays (default whitespace)")

    p = command("nbv", "Rank camera poses by variance at the expected collision point.", "nbv")
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=("aimed", "sphere", "free"), default="aimed", help="pose parameterization")

    p = command("scanloop", "Simulated scan / reconstruct / next-best-view loop on an analytic shape.", "session")
    p.add_argument("shape", help="circle[:r], sphere[:r], bumped-circle[:angle] or polygon:x,y;x,y;...")
    p.add_argument("--strategy", choices=("ours", "random", "furthest"), default="ours")
    p.add_argument("--mode", choices=("aimed", "sphere", "free"), default="aimed", help="pose parameterization")

    p = command("latent-train", "Jointly train shared fields and one latent code per scan.", "corpus")
    p.add_argument("scans", nargs="+")

    p = command("latent-infer", "Fit a latent code for a new scan with frozen networks.", "inferred")
    p.add_argument("checkpoint")
    p.add_argument("scan")
    p.add_argument("--refine-epochs", type=int, default=0, help="fine-tune epochs after code fitting")

    p = command("nll", "Mean negative log likelihood of a cloud under a model.", "nll")
    p.add_argument("checkpoint")
    p.add_argument("cloud")
    p.add_argument("--infer", action="store_true", help="re-fit the latent code even if the checkpoint has one")

    p = command("net-info", "Print network and checkpoint details.", ".")
    p.add_argument("checkpoint")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        level = logging.WARNING - 10 * min(args.verbose, 2)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        config = _effective_config(args)
        return HANDLERS[args.command](args, config, argv)
    except (UsageError, InvalidConfig, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (StochPSRError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # unexpected failure: still a runtime error, keep the traceback at -v
        log.debug("unhandled exception", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
