"""Command-line entry point: render, train, predict, fuse, evaluate,
gradient checks and the loss ablation."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .features import CheckpointError, config_from_params, load_params, save_params
from .fusion_eval import (FusionThresholds, filter_and_fuse, pointcloud_metrics, read_ply,
                          write_metrics_csv, write_ply)
from .fusion_eval import depth_metrics, pooled_depth_metrics
from .geometry import CameraError
from .losses import ABLATION_ROWS, DegenerateBatchError, LossConfig
from .matching import InvariantError
from .numerics import NonFiniteError
from .scenes import (DatasetError, Scene, load_collection, load_scene, read_pfm, read_spec_file,
                     render, save_scene, suite_specs, write_pfm)
from .trainer import TrainingDiverged, ablation, evaluate, gt_valid, predict_scene, train

log = logging.getLogger("contrastmvs")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DATA_ERRORS = (DatasetError, CameraError, CheckpointError, ConfigError, FileNotFoundError,
               IsADirectoryError, DegenerateBatchError)
NUMERIC_ERRORS = (TrainingDiverged, NonFiniteError, InvariantError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers


def _scene_dirs(root: Path) -> list[Path]:
    if (root / "manifest.txt").is_file():
        return [root]
    dirs = sorted(p.parent for p in root.rglob("manifest.txt"))
    if not dirs:
        raise DatasetError(f"{root}: no scene manifests found")
    return dirs


def _rel(scene_dir: Path, root: Path) -> Path:
    return scene_dir.relative_to(root)


def _configs(args):
    train_cfg, fusion = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    return train_cfg, fusion


def _pred_name(vid: int, kind: str, ext: str) -> str:
    return f"{kind}_{vid:08d}.{ext}"


# --------------------------------------------------------------- commands


def cmd_render(args) -> int:
    if args.spec is None and not args.suite:
        raise UsageError("give --spec FILE or --suite")
    specs = suite_specs() if args.suite else read_spec_file(args.spec)
    out = Path(args.out)
    for name, spec in specs.items():
        scene = render(spec)
        target = save_scene(scene, out / name if len(specs) > 1 or args.suite else out)
        log.info("wrote %s (%d views)", target, len(scene))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, _ = _configs(args)
    if args.losses is not None:
        cfg = replace(cfg, loss=LossConfig.for_losses(
            args.losses, l1_weights=cfg.loss.l1_weights, cml_weights=cfg.loss.cml_weights,
            wfl_weights=cfg.loss.wfl_weights, stop_grad_weight=cfg.loss.stop_grad_weight))
    scenes = load_collection(args.data)
    out = Path(args.out)
    _, rows = train(scenes, cfg, out_dir=out)
    from .plotting import save_loss_curves

    save_loss_curves(out / "loss_curves.png", rows)
    print(f"trained {len(rows)} steps; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .plotting import save_depth_png

    cfg, _ = _configs(args)
    params = load_params(args.ckpt)
    cascade = replace(cfg.cascade, model=config_from_params(params))
    root, out = Path(args.data), Path(args.out)
    for sdir in _scene_dirs(root):
        scene = load_scene(sdir)
        depths, confs = predict_scene(params, scene, cascade, cfg.num_views, args.threads)
        dest = out / _rel(sdir, root)
        dest.mkdir(parents=True, exist_ok=True)
        for vid, cam, d, c in zip(scene.ids, scene.cameras, depths, confs):
            write_pfm(dest / _pred_name(vid, "depth", "pfm"), d)
            write_pfm(dest / _pred_name(vid, "conf", "pfm"), c)
            save_depth_png(dest / _pred_name(vid, "depth", "png"), d, cam.depth_min, cam.depth_max)
        log.info("predicted %d views of %s", len(scene), sdir)
    return EXIT_OK


def _load_predictions(pred: Path, scene: Scene, need_conf: bool = True):
    depths, confs = [], []
    for vid in scene.ids:
        path = pred / _pred_name(vid, "depth", "pfm")
        if not path.is_file():
            raise DatasetError(f"view {vid}: missing prediction {path}")
        depths.append(read_pfm(path).astype(np.float64))
        if need_conf:
            cpath = pred / _pred_name(vid, "conf", "pfm")
            confs.append(read_pfm(cpath).astype(np.float64) if cpath.is_file() else None)
    if need_conf and any(c is None for c in confs):
        confs = None
    return depths, confs


def cmd_fuse(args) -> int:
    _, th = _configs(args)
    th = FusionThresholds(
        conf=th.conf if args.tc is None else args.tc,
        reproj_px=th.reproj_px if args.tpx is None else args.tpx,
        rel_depth=th.rel_depth if args.td is None else args.td,
        min_views=th.min_views if args.k is None else args.k)
    scene = load_scene(args.data)
    depths, confs = _load_predictions(Path(args.pred), scene)
    cloud = filter_and_fuse(depths, confs, scene.cameras, th, images=scene.images)
    if len(cloud) == 0:
        log.warning("fusion produced an empty point cloud")
    write_ply(args.out, cloud)
    print(f"fused {len(cloud)} points -> {args.out}")
    return EXIT_OK


def cmd_eval_depth(args) -> int:
    root, pred = Path(args.gt), Path(args.pred)
    rows, parts = [], []
    for sdir in _scene_dirs(root):
        scene = load_scene(sdir)
        depths, _ = _load_predictions(pred / _rel(sdir, root), scene, need_conf=False)
        per_view = [depth_metrics(depths[i], scene.depths[i], gt_valid(scene, i))
                    for i in range(len(scene))]
        m = pooled_depth_metrics(per_view)
        parts.append(m)
        rows.append({"scene": str(_rel(sdir, root)), "epe": m.epe, "e1": m.e1, "e3": m.e3,
                     "pixels": m.count})
    total = pooled_depth_metrics(parts)
    rows.append({"scene": "ALL", "epe": total.epe, "e1": total.e1, "e3": total.e3,
                 "pixels": total.count})
    write_metrics_csv(args.out, rows, ("scene", "epe", "e1", "e3", "pixels"))
    print(f"epe {total.epe:.4f}  e1 {total.e1:.2f}  e3 {total.e3:.2f}")
    return EXIT_OK


def cmd_eval_cloud(args) -> int:
    recon, gt = read_ply(args.recon), read_ply(args.gt)
    if len(recon) == 0 or len(gt) == 0:
        raise DatasetError("point-cloud metrics need two non-empty clouds")
    acc, comp, overall = pointcloud_metrics(recon, gt, args.max_dist)
    write_metrics_csv(args.out, [{"scene": Path(args.recon).stem, "accuracy": acc,
                                  "completeness": comp, "overall": overall}],
                      ("scene", "accuracy", "completeness", "overall"))
    print(f"accuracy {acc:.6f}  completeness {comp:.6f}  overall {overall:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import CASES, TOLERANCE, run_case

    if args.op is None and not args.all:
        raise UsageError("give --op NAME or --all")
    names = list(CASES) if args.all else [args.op]
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise UsageError(f"unknown op {unknown[0]!r}; known: {', '.join(CASES)}")
    failed = 0
    for name in names:
        res = run_case(name, args.seeds)
        ok = res.passed(TOLERANCE)
        failed += not ok
        print(f"{name:20s} max_rel_err {res.worst:.3e}  seeds {res.seeds:3d}  "
              f"coords {res.checked:6d}  {'ok' if ok else 'FAIL'}  ({res.seconds:.1f}s)",
              flush=True)
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_ablation(args) -> int:
    from .plotting import save_ablation_chart, save_loss_curves

    cfg, _ = _configs(args)
    root = Path(args.data)
    if args.eval_data is not None:
        train_scenes = load_collection(root)
        eval_scenes = load_collection(args.eval_data)
    elif (root / "train").is_dir() and (root / "eval").is_dir():
        train_scenes = load_collection(root / "train")
        eval_scenes = load_collection(root / "eval")
    else:
        train_scenes = eval_scenes = load_collection(root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def on_row(entry, rows):
        save_loss_curves(out / f"loss_{entry['row']}.png", rows)

    rows = args.rows.split(",") if args.rows else list(ABLATION_ROWS)
    bad = [r for r in rows if r not in ABLATION_ROWS]
    if bad:
        raise UsageError(f"unknown ablation row {bad[0]!r}")
    table = ablation(train_scenes, eval_scenes, cfg, rows, args.threads, on_row)
    write_metrics_csv(out / "ablation.csv", table, ("row", "losses", "epe", "e1", "e3"))
    save_ablation_chart(out / "ablation.png", table)
    for r in table:
        print(f"({r['row']}) {r['losses']:8s} epe {r['epe']:.4f}  e1 {r['e1']:.2f}  "
              f"e3 {r['e3']:.2f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, th = _configs(args)
    params = load_params(args.ckpt)
    cfg = replace(cfg, cascade=replace(cfg.cascade, model=config_from_params(params)))
    scenes = load_collection(args.data)
    pooled, _ = evaluate(params, scenes, cfg, "depth", args.threads)
    print(f"epe {pooled.epe:.4f}  e1 {pooled.e1:.2f}  e3 {pooled.e3:.2f}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="contrastmvs", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True, threads=False):
        sp.add_argument("--seed", type=int, default=None, help="overrides [train] seed")
        if config:
            sp.add_argument("--config", default=None, help="INI config (default: built-in)")
        if threads:
            sp.add_argument("--threads", type=int, default=1, help="worker cap")

    sp = sub.add_parser("render-dataset", help="render synthetic scenes to disk")
    sp.add_argument("--spec", help="scene spec INI, one section per scene")
    sp.add_argument("--suite", action="store_true", help="render the bundled 5+2 scene suite")
    sp.add_argument("--out", required=True)
    common(sp, config=False)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--losses", choices=list(ABLATION_ROWS), default=None)
    sp.add_argument("--epochs", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="per-view depth, confidence and colour PNG")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    common(sp, threads=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("fuse", help="fuse predicted depth maps of one scene")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--tc", type=float, default=None, help="confidence threshold")
    sp.add_argument("--tpx", type=float, default=None, help="reprojection threshold (px)")
    sp.add_argument("--td", type=float, default=None, help="relative depth threshold")
    sp.add_argument("--k", type=int, default=None, help="minimum consistent views")
    common(sp)
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("eval-depth", help="EPE / e1 / e3 of predicted depth maps")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    common(sp, config=False)
    sp.set_defaults(func=cmd_eval_depth)

    sp = sub.add_parser("eval-cloud", help="accuracy / completeness of a point cloud")
    sp.add_argument("--recon", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-dist", type=float, default=None)
    common(sp, config=False)
    sp.set_defaults(func=cmd_eval_cloud)

    sp = sub.add_parser("evaluate", help="predict and score a checkpoint in memory")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    common(sp, threads=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--op", default=None)
    g.add_argument("--all", action="store_true")
    sp.add_argument("--seeds", type=int, default=20)
    common(sp, config=False)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablation", help="train and score the four loss selections")
    sp.add_argument("--data", required=True, help="training scenes (or a dir with train/ eval/)")
    sp.add_argument("--eval-data", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rows", default=None, help="comma list, default l1,cml,wfl,cml+wfl")
    sp.add_argument("--epochs", type=int, default=None)
    common(sp, threads=True)
    sp.set_defaults(func=cmd_ablation)
    return p


INPUT_PATHS = ("spec", "data", "eval_data", "ckpt", "pred", "gt", "recon", "config")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for attr in INPUT_PATHS:
        value = getattr(args, attr, None)
        if value is not None and not Path(value).exists():
            parser.print_usage(sys.stderr)
            print(f"contrastmvs: error: --{attr.replace('_', '-')} {value}: no such path",
                  file=sys.stderr)
            return EXIT_DATA
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"contrastmvs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"contrastmvs: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"contrastmvs: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"contrastmvs: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
