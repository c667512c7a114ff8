"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation error, 2 I/O or format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import kittio
from .camera import CameraRig
from .cda import (circulated_loss, critical_pairs, csa_to_resolution, occupancy_confidence,
                  voxel_distributions)
from .config import RunConfig
from .csa import cubic_anisotropy, reassign
from .grid import GridGeometry, LabelGrid
from .kittio import ClassMapping, FormatError, ParseError
from .lift import FeatureGrid, FeatureMap2D, ScoreGrid, fuse_seeds, sample_features, seed_mask
from .metrics import (confusion, evaluate_ranges, format_table, iou_miou, sparsity_stats)
from .synth import SceneSpec, generate_scene


def fmt(v: float) -> str:
    return f"{v:.6f}"


class Context:
    def __init__(self, args):
        self.args = args
        self.as_json = args.json
        self.config_path = Path(args.config) if args.config else None
        self.config = RunConfig.load(self.config_path) if self.config_path else RunConfig()
        threads = args.threads if args.threads is not None else os.environ.get("VOXALIGN_THREADS")
        self.threads = int(threads) if threads not in (None, "") else 1
        if self.threads < 1:
            raise ValueError(f"thread count must be positive, got {self.threads}")

    @property
    def config_dir(self) -> Optional[Path]:
        return self.config_path.parent if self.config_path else None

    def mapping(self) -> ClassMapping:
        path = self.config.class_mapping
        if path is None:
            return ClassMapping.semantic_kitti()
        p = Path(path)
        if self.config_dir is not None and not p.is_absolute():
            p = self.config_dir / p
        return ClassMapping.load(p)

    def emit(self, payload: dict, text: str) -> None:
        print(json.dumps(payload, indent=2) if self.as_json else text)


def load_labels(path: str, ctx: Context) -> LabelGrid:
    p = Path(path)
    if p.suffix == ".label":
        inv = p.with_suffix(".invalid")
        return kittio.VoxelFileBundle(label=p, invalid=inv if inv.exists() else None).load(ctx.mapping())
    if p.suffix == ".bin":
        return kittio.read_occupancy_bin(p.read_bytes())
    obj = kittio.load(p)
    if not isinstance(obj, LabelGrid):
        raise FormatError(f"{p}: expected a labels container")
    return obj


def load_features(path: str) -> FeatureGrid:
    obj = kittio.load(path)
    if not isinstance(obj, FeatureGrid):
        raise FormatError(f"{path}: expected a scores or features container")
    return obj


def cmd_csa(ctx: Context) -> int:
    a = ctx.args
    labels = load_labels(a.labels_in, ctx)
    groups = ctx.config.semantic_groups(ctx.config_dir)
    amap = cubic_anisotropy(reassign(labels, groups), ctx.config.csa)
    kittio.save(a.map_out, amap)
    s = amap.s_csa
    payload = {"groups": groups.name, "voxels": int(s.size), "s_csa_min": float(s.min()),
               "s_csa_max": float(s.max()), "s_csa_mean": float(s.mean())}
    ctx.emit(payload, f"groups {groups.name}\nvoxels {s.size}\ns_csa min {fmt(s.min())} "
                      f"max {fmt(s.max())} mean {fmt(s.mean())}")
    return 0


def cmd_critical(ctx: Context) -> int:
    a, cfg = ctx.args, ctx.config
    scores = load_features(a.scores_in)
    amap = kittio.load(a.csa_in)
    dims = scores.geometry.dims
    pair = cfg.pair
    if dims != pair.high:
        raise ValueError(f"scores {dims.shape} do not match configured high resolution {pair.high.shape}")
    conf = occupancy_confidence(scores)
    csa_hi = csa_to_resolution(amap, dims, cfg.csa_resample)
    conf_lo = csa_lo = None
    if cfg.pairing == "independent":
        if not a.low_scores:
            raise ValueError("independent pairing needs --low-scores")
        low = load_features(a.low_scores)
        conf_lo = occupancy_confidence(low)
        csa_lo = csa_to_resolution(amap, low.geometry.dims, cfg.csa_resample)
    crit, _ = critical_pairs(conf, csa_hi, cfg.k, pair, cfg.pairing, conf_lo, csa_lo)
    crit = type(crit)(crit.resolution, crit.indices, crit.ranking_score,
                      voxel_distributions(scores, crit.indices), crit.low_indices)
    kittio.save_critical_set(a.set_out, crit)
    payload = {"k": crit.k, "ranking_max": float(crit.ranking_score[0]),
               "ranking_min": float(crit.ranking_score[-1]), "pairing": cfg.pairing}
    ctx.emit(payload, f"k {crit.k}\nranking max {fmt(crit.ranking_score[0])} "
                      f"min {fmt(crit.ranking_score[-1])}\npairing {cfg.pairing}")
    return 0


def cmd_circ(ctx: Context) -> int:
    a = ctx.args
    high = load_features(a.scores_high_in)
    low = load_features(a.scores_low_in)
    crit = kittio.load_critical_set(a.set_in)
    if crit.low_indices is None:
        raise ValueError(f"{a.set_in}: critical set has no low-resolution pairing")
    rep = circulated_loss(voxel_distributions(high, crit.indices),
                          voxel_distributions(low, crit.low_indices))
    if a.grad_out:
        for tag, g in zip(("high", "low"), rep.gradient):
            Path(f"{a.grad_out}.{tag}.vxal").write_bytes(
                kittio.write_container("features", g.reshape(g.shape[0], 1, 1, -1)))
    ctx.emit({"loss": rep.value, "k": crit.k}, f"loss {fmt(rep.value)}")
    return 0


def _rig(ctx: Context) -> CameraRig:
    if ctx.args.calib:
        return kittio.read_calibration(Path(ctx.args.calib).read_text(), ctx.config.image_size)
    K = np.array([[707.0912, 0.0, 601.8873], [0.0, 707.0912, 183.1104], [0.0, 0.0, 1.0]])
    return CameraRig.forward_x(K, ctx.config.image_size)


def cmd_eval(ctx: Context) -> int:
    a, cfg = ctx.args, ctx.config
    pred = load_labels(a.pred_in, ctx)
    gt = load_labels(a.gt_in, ctx)
    n = cfg.num_classes
    res = iou_miou(confusion(pred, gt, num_classes=n), cfg.zero_division)
    names = ctx.mapping().names if n == 20 and cfg.class_mapping is None else None
    names = names or [str(i) for i in range(n)]
    payload = {"overall": res.to_dict(names)}
    rows = [["class", "IoU"]] + [[nm, fmt(v)] for nm, v in zip(names[1:], res.per_class)]
    text = [f"IoU {fmt(res.iou)}", f"mIoU {fmt(res.miou)}", "", format_table(rows)]
    if a.ranges:
        by_range = evaluate_ranges(pred, gt, _rig(ctx), n, cfg.ranges, cfg.zero_division)
        payload["ranges"] = {f"{r:g}": v.to_dict(names) for r, v in by_range.items()}
        rrows = [["range", "IoU", "mIoU"]] + [[f"{r:g}m", fmt(v.iou), fmt(v.miou)]
                                            for r, v in by_range.items()]
        text += ["", format_table(rrows)]
    ctx.emit(payload, "\n".join(text))
    return 0


def cmd_sparsity(ctx: Context) -> int:
    a = ctx.args
    gt = load_labels(a.gt_in, ctx)
    n = max(ctx.config.num_classes, int(gt.labels.max()) + 1)
    rep = sparsity_stats(gt)
    counts = np.zeros(n, dtype=np.int64)
    counts[: rep.counts.size] = rep.counts
    rep = type(rep)(counts, rep.empty_fraction, rep.valid_total)
    names = list(ctx.mapping().names) if n == 20 else [str(i) for i in range(n)]
    if a.csv:
        Path(a.csv).write_text(rep.to_csv(names))
    rows = [["class", "count", "log10"]] + [
        [nm, str(int(c)), "-" if np.isnan(lc) else fmt(lc)]
        for nm, c, lc in zip(names, rep.counts, rep.log10_counts)]
    ctx.emit(rep.to_dict(names),
             f"valid voxels {rep.valid_total}\nempty fraction {fmt(rep.empty_fraction)}\n\n"
             + format_table(rows))
    return 0


def cmd_lift(ctx: Context) -> int:
    a, cfg = ctx.args, ctx.config
    if not a.view:
        raise ValueError("at least one --view FEATMAP CALIB pair is required")
    views = []
    for fm_path, calib_path in a.view:
        c = kittio.read_container(Path(fm_path).read_bytes())
        # stored (width, height, 1, C); feature maps are (height, width, C)
        fm = FeatureMap2D(c.data[:, :, 0, :].transpose(1, 0, 2).astype(float), cfg.downscale)
        rig = kittio.read_calibration(Path(calib_path).read_text(), cfg.image_size)
        views.append((fm, rig))
    pair = cfg.pair
    geo_hi = GridGeometry.semantic_kitti(pair.high)
    geo_lo = GridGeometry.semantic_kitti(pair.low)
    hi = sample_features(views, geo_hi)
    lo = sample_features(views, geo_lo)
    seeds = {}
    for tag, grid, prop_path in (("high", hi, a.proposals_high), ("low", lo, a.proposals_low)):
        if prop_path:
            prop = kittio.load(prop_path, grid.geometry)
            prop = ScoreGrid(grid.geometry, prop.values[..., 0])
            masked = seed_mask(grid, prop, cfg.theta)
            seeds[tag] = int(np.count_nonzero(prop.scores > cfg.theta))
            if tag == "high":
                hi = masked
            else:
                lo = masked
    hi, lo = fuse_seeds(hi, lo, pair, sequential=cfg.fuse_mode == "sequential")
    out = Path(a.grid_out)
    out.mkdir(parents=True, exist_ok=True)
    kittio.save(out / "high.vxal", hi)
    kittio.save(out / "low.vxal", lo)
    payload = {"views": len(views), "channels": hi.channels, "seeds": seeds}
    ctx.emit(payload, f"views {len(views)}\nchannels {hi.channels}\n"
                      + "".join(f"seeds {k} {v}\n" for k, v in seeds.items()).rstrip("\n"))
    return 0


def cmd_synth(ctx: Context) -> int:
    a = ctx.args
    spec = SceneSpec.load(a.spec_in)
    labels, rigs, depths = generate_scene(spec)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kittio.save(out / "labels.vxal", labels)
    for i, (rig, dm) in enumerate(zip(rigs, depths)):
        (out / f"calib_{i}.txt").write_text(kittio.format_calibration(rig))
        # (width, height, 1, 1) matches the feature-map container layout
        kittio.save(out / f"depth_{i}.vxal", _depth_grid(dm.depth))
    occupied = int(np.count_nonzero(labels.labels))
    payload = {"voxels": labels.dims.count, "occupied": occupied, "cameras": len(rigs)}
    ctx.emit(payload, f"voxels {labels.dims.count}\noccupied {occupied}\ncameras {len(rigs)}")
    return 0


def _depth_grid(depth: np.ndarray) -> FeatureGrid:
    H, W = depth.shape
    return FeatureGrid(GridGeometry((W, H, 1), (0.0, 0.0, 0.0), 1.0), depth.T[:, :, None, None])


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--threads", type=int, metavar="N",
                        help="worker threads (falls back to VOXALIGN_THREADS)")

    parser = argparse.ArgumentParser(prog="voxalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("csa", parents=[common], help="semantic reassignment + cubic anisotropy")
    p.add_argument("labels_in")
    p.add_argument("map_out")
    p.set_defaults(func=cmd_csa)

    p = sub.add_parser("critical", parents=[common], help="critical voxel selection and pairing")
    p.add_argument("scores_in")
    p.add_argument("csa_in")
    p.add_argument("set_out")
    p.add_argument("--low-scores", help="low-resolution scores (independent pairing)")
    p.set_defaults(func=cmd_critical)

    p = sub.add_parser("circ", parents=[common], help="circulated loss between two resolutions")
    p.add_argument("scores_high_in")
    p.add_argument("scores_low_in")
    p.add_argument("set_in")
    p.add_argument("--grad-out", metavar="PREFIX", help="write PREFIX.high.vxal / PREFIX.low.vxal")
    p.set_defaults(func=cmd_circ)

    p = sub.add_parser("eval", parents=[common], help="IoU / mIoU evaluation")
    p.add_argument("pred_in")
    p.add_argument("gt_in")
    p.add_argument("--ranges", action="store_true", help="also evaluate the configured distance ranges")
    p.add_argument("--calib", help="calib.txt defining the camera for range splits")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sparsity", parents=[common], help="voxel label distribution")
    p.add_argument("gt_in")
    p.add_argument("--csv", metavar="PATH", help="write per-class counts and log10 counts")
    p.set_defaults(func=cmd_sparsity)

    p = sub.add_parser("lift", parents=[common], help="feature lifting, seed selection and fusion")
    p.add_argument("grid_out", help="output directory for high.vxal and low.vxal")
    p.add_argument("--view", nargs=2, action="append", metavar=("FEATMAP", "CALIB"))
    p.add_argument("--proposals-high")
    p.add_argument("--proposals-low")
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic scene bundle")
    p.add_argument("spec_in")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = Context(args)
        return args.func(ctx)
    except (FormatError, ParseError, OSError) as exc:
        print(f"voxalign: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"voxalign: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
