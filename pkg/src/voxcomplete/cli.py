"""Command-line interface.

Subcommands cover the whole pipeline: dataset generation, mesh
voxelization, dissection, training, completion, variation sampling,
evaluation, and the two experiment drivers. All randomness flows from
explicit --seed flags; --threads 1 pins the math backend to a single
thread for bit-reproducible runs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .errors import VoxCompleteError
from .grids import (
    GridSpec,
    load_vxg,
    rasterize_cuboid,
    sample_dissection,
    save_vxf,
    save_vxg,
)
from .meshvox import load_mesh, pad_to_cube, voxelize
from .metrics import evaluate, write_case_reports_json
from .model import load_checkpoint, save_checkpoint
from .synth import generate_dataset
from .train import infer_complete, sample_variations, train
from .experiments import run_benchmark, run_latent_deviation

log = logging.getLogger(__name__)


def _add_seed(p, default=0):
    p.add_argument("--seed", type=int, default=default)


def _set_threads(n):
    if n is not None:
        import torch

        torch.set_num_threads(n)
        torch.set_num_interop_threads(1)


def _load_config(path) -> RunConfig:
    return load_run_config(path) if path else RunConfig()


def _load_data_dir(path):
    files = sorted(Path(path).glob("*.vxg"))
    if not files:
        raise VoxCompleteError(f"no .vxg files under {path}")
    return [load_vxg(f) for f in files]


def cmd_gen_data(args):
    spec = GridSpec(args.cube)
    cfg = _load_config(args.config)
    generate_dataset(args.n, spec, args.seed, cfg.synth_ranges, out_dir=args.out)
    print(f"wrote {args.n} shapes to {args.out}")
    return 0


def cmd_voxelize(args):
    mesh = load_mesh(getattr(args, "in"))
    tight = voxelize(mesh, args.voxel_mm)
    grid = pad_to_cube(tight, args.cube) if args.cube else pad_to_cube(
        tight, max(tight.data.shape)
    )
    save_vxg(grid, args.out)
    print(f"voxelized {getattr(args, 'in')} -> {args.out} ({grid.count} voxels)")
    return 0


def cmd_dissect(args):
    s = load_vxg(getattr(args, "in"))
    cuboid, x, y = sample_dissection(s, args.seed)
    save_vxg(x, args.out_x)
    save_vxg(y, args.out_y)
    if args.out_mask:
        save_vxg(rasterize_cuboid(cuboid, s.spec), args.out_mask)
    print(f"dissected {getattr(args, 'in')}: |x|={x.count} |y|={y.count}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    shapes = _load_data_dir(args.data)
    n_val = max(1, int(round(len(shapes) * args.val_fraction)))
    if len(shapes) - n_val < 1:
        raise VoxCompleteError("dataset too small to split")
    train_shapes = shapes[: len(shapes) - n_val]
    val_shapes = shapes[len(shapes) - n_val :]
    result = train(
        train_shapes,
        val_shapes,
        cfg.model,
        cfg.train,
        cfg.loss,
        cfg.dissect,
        cfg.augment,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", result.net)
    from .train import write_train_log

    write_train_log(result.rows, out / "train_log.csv")
    print(
        f"trained {cfg.train.objective}: best epoch {result.best_epoch}, "
        f"val DSC {result.best_val_dsc:.4f}"
    )
    return 0


def cmd_complete(args):
    net = load_checkpoint(args.checkpoint)
    x = load_vxg(getattr(args, "in"))
    z = None
    if args.z:
        z = np.array([float(v) for v in args.z.split(",")])
    pred = infer_complete(net, x, z)
    save_vxf(pred, args.out)
    if args.out_bin:
        save_vxg(pred.binarize(), args.out_bin)
    print(f"completed {getattr(args, 'in')} -> {args.out}")
    return 0


def cmd_sample(args):
    net = load_checkpoint(args.checkpoint)
    x = load_vxg(getattr(args, "in"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = sample_variations(net, x, args.n, args.seed)
    codes = {}
    for i, (z, pred) in enumerate(pairs):
        save_vxf(pred, out / f"variation_{i:02d}.vxf")
        save_vxg(pred.binarize(), out / f"variation_{i:02d}.vxg")
        codes[f"variation_{i:02d}"] = [float(v) for v in z]
    with open(out / "latent_codes.json", "w") as fh:
        json.dump(codes, fh, indent=2, sort_keys=True)
    print(f"wrote {args.n} variations to {out}")
    return 0


def cmd_evaluate(args):
    from .grids import load_vxf

    pred_path = Path(args.pred)
    if pred_path.suffix == ".vxf":
        pred = load_vxf(pred_path)
    else:
        from .grids import ProbGrid

        g = load_vxg(pred_path)
        pred = ProbGrid(g.spec, g.data.astype(float))
    target = load_vxg(args.target)
    report = evaluate(pred, target, args.threshold)
    write_case_reports_json([report], args.json_out)
    payload = json.loads(Path(args.json_out).read_text())
    print(json.dumps(payload["cases"][0], indent=2, sort_keys=True))
    return 0


def cmd_experiment(args):
    cfg = _load_config(args.config)
    if args.which == "table1":
        report = run_benchmark(
            cfg.benchmark,
            cfg.model,
            cfg.train,
            cfg.loss,
            cfg.dissect,
            cfg.augment,
            out_dir=args.out,
            save_checkpoints=args.save_checkpoints,
        )
        for arm, summary in report["table"].items():
            print(
                f"{arm}: DSC {summary['dsc_mean']:.4f} +/- {summary['dsc_std']:.4f}"
            )
    else:
        net = load_checkpoint(args.checkpoint)
        result = run_latent_deviation(
            net,
            cfg.benchmark,
            cfg.dissect,
            n_cases=args.n_cases,
            k_per_case=args.k_per_case,
            seed=args.seed,
            out_dir=args.out,
        )
        print(f"spearman rho = {result['spearman_rho']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxcomplete",
        description="Probabilistic 3D shape completion of dissected volumes",
    )
    parser.add_argument("--threads", type=int, default=None, help="math threads; 1 for bit-reproducible runs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--cube", type=int, default=32)
    _add_seed(p, 7)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("voxelize", help="voxelize a surface mesh to VXG1")
    p.add_argument("--in", required=True)
    p.add_argument("--voxel-mm", type=float, default=1.0, dest="voxel_mm")
    p.add_argument("--cube", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("dissect", help="randomly dissect a grid into X/Y")
    p.add_argument("--in", required=True)
    _add_seed(p)
    p.add_argument("--out-x", default="x.vxg")
    p.add_argument("--out-y", default="y.vxg")
    p.add_argument("--out-mask", default=None)
    p.set_defaults(func=cmd_dissect)

    p = sub.add_parser("train", help="train a completion model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="directory of .vxg shapes")
    p.add_argument("--val-fraction", type=float, default=0.15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("complete", help="complete a dissected input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--z", default=None, help="comma-separated latent code")
    p.add_argument("--out", required=True, help="VXF1 probability output")
    p.add_argument("--out-bin", default=None, help="binarized VXG1 output")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("sample", help="sample completion variations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--n", type=int, default=5)
    _add_seed(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="score a prediction against a target")
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--json-out", default="metrics.json", dest="json_out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run an experiment driver")
    p.add_argument("which", choices=["table1", "latent-deviation"])
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None, help="for latent-deviation")
    p.add_argument("--save-checkpoints", action="store_true")
    p.add_argument("--n-cases", type=int, default=16)
    p.add_argument("--k-per-case", type=int, default=8)
    _add_seed(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    _set_threads(args.threads)
    try:
        return args.func(args)
    except VoxCompleteError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
