"""`trisr` command line: one binary, one subcommand per pipeline stage."""

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from pydantic import ValidationError
from rich.console import Console

from trisr import logger
from trisr.config import (EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, METRIC_CSV_COLUMNS,
                          load_ini_config, settings)
from trisr.exceptions import NonFiniteLoss, TrisrError, UsageError
from trisr.schemas import LossKind, NoiseKind, TrainingConfig, UpdateMode, VolumeFormat

console = Console(stderr=True)

LOSS_ALIASES = {"standard": LossKind.STANDARD, "ragan": LossKind.RELATIVISTIC, "relativistic": LossKind.RELATIVISTIC}

# CLI flag -> TrainingConfig field, for train/infer overrides
CONFIG_FLAGS = {
    "iters": "total_iters",
    "batch_size": "batch_size",
    "seed": "seed",
    "lr": "gamma",
    "sigma0": "sigma0",
    "window": "window",
    "stride": "stride",
    "checkpoint_every": "checkpoint_every",
    "update_mode": "update_mode",
    "dtype": "dtype",
}


class ArgumentParser(argparse.ArgumentParser):
    """Raises UsageError instead of exiting with argparse's status 2."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _print_resolved(command: str, values: Dict[str, Any]) -> None:
    console.print(f"[blue]trisr {command}[/blue]")
    for key in sorted(values):
        console.print(f"  {key} = {values[key]}")


def load_config(path: Optional[str], overrides: Dict[str, Any]) -> TrainingConfig:
    """TrainingConfig from an INI (or JSON, as written by train) file plus CLI overrides."""
    values: Dict[str, Any] = {}
    if path:
        if Path(path).suffix == ".json":
            values = TrainingConfig.model_validate_json(Path(path).read_text()).model_dump()
        else:
            values = load_ini_config(path)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainingConfig(**values)


def _config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {field: getattr(args, flag, None) for flag, field in CONFIG_FLAGS.items()}


def _add_config_flags(p: argparse.ArgumentParser, training: bool) -> None:
    p.add_argument("--config", help="INI file with [train], [data], [model] sections (or a run's config.json)")
    p.add_argument("--window", type=int, help="HR patch edge in voxels")
    p.add_argument("--stride", type=int, help="HR patch step in voxels")
    p.add_argument("--batch-size", type=int, help="patches per batch")
    p.add_argument("--dtype", choices=["float32", "float64"], help="numeric type of networks")
    if training:
        p.add_argument("--iters", type=int, help="total iterations T")
        p.add_argument("--seed", type=int, help="seed for init, sampling and noise")
        p.add_argument("--lr", type=float, help="Adam learning rate gamma")
        p.add_argument("--sigma0", type=float, help="initial instance-noise std")
        p.add_argument("--checkpoint-every", type=int, help="iterations between trainer checkpoints")
        p.add_argument("--update-mode", choices=[m.value for m in UpdateMode], help="player update semantics")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="trisr", description="Volumetric x2 super-resolution with a three-player GAN")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (1 = reference mode)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("convert", help="convert between NIfTI and RVOL")
    p.add_argument("--in", dest="input", required=True, help="input volume")
    p.add_argument("--out", required=True, help="output volume")
    p.add_argument("--format", choices=[f.value for f in VolumeFormat], help="output format (default: by suffix)")

    p = sub.add_parser("patch", help="cut a volume into overlapping patches")
    p.add_argument("--in", dest="input", required=True, help="input volume")
    p.add_argument("--out", help="directory for patch_NNNNN.rvol files")
    p.add_argument("--window", type=int, required=True, help="patch edge in voxels")
    p.add_argument("--stride", type=int, required=True, help="patch step in voxels")
    p.add_argument("--dry-run", action="store_true", help="only print the per-axis origins")

    p = sub.add_parser("downsample", help="halve each dimension (2x2x2 block mean)")
    p.add_argument("--in", dest="input", required=True, help="input volume")
    p.add_argument("--out", required=True, help="output volume")

    p = sub.add_parser("train", help="train the three players")
    p.add_argument("--data", required=True, help="volume file or directory of volumes")
    p.add_argument("--out", default=settings.DEFAULT_OUT_DIR, help="run directory")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")
    _add_config_flags(p, training=True)

    p = sub.add_parser("infer", help="x2 super-resolve a volume")
    p.add_argument("--in", dest="input", required=True, help="LR volume")
    p.add_argument("--checkpoint", required=True, help="generator TSRC checkpoint")
    p.add_argument("--out", required=True, help="SR volume")
    _add_config_flags(p, training=False)

    p = sub.add_parser("eval", help="PSNR/SSIM/NRMSE as CSV on stdout")
    p.add_argument("--ref", required=True, help="reference (HR) volume")
    p.add_argument("--test", action="append", default=[], help="test volume; repeatable")
    p.add_argument("--baseline", action="store_true", help="also score trilinear upsampling of the downsampled ref")
    p.add_argument("--data-range", type=float, help="PSNR/SSIM data range (default: ref max - min)")
    p.add_argument("--ssim-window", type=int, default=7, help="SSIM box edge")

    p = sub.add_parser("dynamics", help="Dirac-GAN convergence experiment")
    p.add_argument("--loss", choices=sorted(LOSS_ALIASES), default="standard", help="GAN objective")
    p.add_argument("--noise", choices=[n.value for n in NoiseKind], default="none", help="instance noise")
    p.add_argument("--steps", type=int, default=2000, help="simultaneous gradient steps")
    p.add_argument("--lr", type=float, default=0.1, help="step size")
    p.add_argument("--sigma0", type=float, default=1.0, help="initial noise std (annealed)")
    p.add_argument("--init", type=float, nargs=2, default=[1.0, 1.0], metavar=("THETA", "PSI"), help="start point")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("phantom", help="write a seeded synthetic volume")
    p.add_argument("--dims", type=int, nargs=3, required=True, metavar=("W", "H", "D"), help="volume dims")
    p.add_argument("--seed", type=int, default=0, help="phantom seed")
    p.add_argument("--out", required=True, help="output volume")

    return parser


# ---------------------------------------------------------------- commands

def cmd_convert(args: argparse.Namespace) -> int:
    from trisr.volume_io import read_volume, write_volume

    _print_resolved("convert", {"in": args.input, "out": args.out, "format": args.format})
    write_volume(read_volume(args.input), args.out, args.format)
    console.print(f"[green]Wrote {args.out}[/green]")
    return EXIT_OK


def cmd_patch(args: argparse.Namespace) -> int:
    from trisr.file_utils import ensure_dir
    from trisr.volume_io import PatchGrid, extract_patches, read_volume, write_volume

    _print_resolved("patch", vars(args))
    v = read_volume(args.input)
    if args.dry_run:
        for axis, n in zip("WHD", v.dims):
            origins = PatchGrid.origins_along(n, args.window, args.stride)
            print(f"{axis} ({n}): {len(origins)} origins {origins}")
        return EXIT_OK
    if not args.out:
        raise UsageError("patch: --out is required unless --dry-run is given")
    grid, patches = extract_patches(v, args.window, args.stride)
    out = ensure_dir(args.out)
    for i, patch in enumerate(patches):
        write_volume(patch, out / f"patch_{i:05d}.rvol")
    console.print(f"[green]Wrote {len(grid)} patches to {out}[/green]")
    return EXIT_OK


def cmd_downsample(args: argparse.Namespace) -> int:
    from trisr.volume_io import downsample_half, read_volume, write_volume

    _print_resolved("downsample", {"in": args.input, "out": args.out})
    v = downsample_half(read_volume(args.input))
    write_volume(v, args.out)
    console.print(f"[green]Wrote {args.out} with dims {v.dims}[/green]")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    from trisr import trainer
    from trisr.file_utils import atomic_write_text, ensure_dir, find_volume_files
    from trisr.volume_io import read_volume

    cfg = load_config(args.config, _config_overrides(args))
    _print_resolved("train", {"data": args.data, "out": args.out, "resume": args.resume, **cfg.model_dump()})

    dataset = [read_volume(path) for path in find_volume_files(args.data)]
    out = ensure_dir(args.out)
    atomic_write_text(out / "config.json", cfg.model_dump_json(indent=2))
    if args.resume:
        trainer.resume(dataset, out, cfg)
    else:
        trainer.train(dataset, cfg, out)
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    from trisr.trainer import infer
    from trisr.volume_io import read_volume, write_volume

    cfg = load_config(args.config, _config_overrides(args))
    _print_resolved("infer", {"in": args.input, "checkpoint": args.checkpoint, "out": args.out, **cfg.model_dump()})
    sr = infer(read_volume(args.input), args.checkpoint, cfg)
    write_volume(sr, args.out)
    console.print(f"[green]Wrote {args.out} with dims {sr.dims}[/green]")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    import csv

    from trisr.metrics import evaluate, metric_row
    from trisr.volume_io import downsample_half, read_volume, upsample_trilinear

    if not args.test and not args.baseline:
        raise UsageError("eval: give at least one --test or --baseline")
    _print_resolved("eval", vars(args))

    ref = read_volume(args.ref)
    pairs = [(path, read_volume(path)) for path in args.test]
    if args.baseline:
        pairs.append(("trilinear-baseline", upsample_trilinear(downsample_half(ref))))

    writer = csv.writer(sys.stdout)
    writer.writerow(METRIC_CSV_COLUMNS)
    for name, test in pairs:
        report = evaluate(ref, test, args.data_range, args.ssim_window)
        writer.writerow(metric_row(args.ref, name, report))
    sys.stdout.flush()
    return EXIT_OK


def cmd_dynamics(args: argparse.Namespace) -> int:
    from trisr.dynamics import export_trajectory, simulate
    from trisr.file_utils import ensure_dir

    loss = LOSS_ALIASES[args.loss]
    _print_resolved("dynamics", {**vars(args), "loss": loss.value})
    state = simulate(loss, args.noise, args.lr, args.steps, tuple(args.init), args.seed, args.sigma0)
    out = ensure_dir(args.out)
    export_trajectory(state, out / f"trajectory_{loss.value}_{args.noise}.csv")
    r0 = state.trajectory[0]
    initial = (r0[0] ** 2 + r0[1] ** 2) ** 0.5
    console.print(
        f"[green]final (theta, psi) = ({state.theta:.6g}, {state.psi:.6g}), "
        f"radius {state.radius:.6g} (initial {initial:.6g})[/green]"
    )
    return EXIT_OK


def cmd_phantom(args: argparse.Namespace) -> int:
    from trisr.synthetic import make_phantom
    from trisr.volume_io import write_volume

    _print_resolved("phantom", vars(args))
    write_volume(make_phantom(tuple(args.dims), args.seed), args.out)
    console.print(f"[green]Wrote {args.out}[/green]")
    return EXIT_OK


COMMANDS = {
    "convert": cmd_convert,
    "patch": cmd_patch,
    "downsample": cmd_downsample,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "dynamics": cmd_dynamics,
    "phantom": cmd_phantom,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            settings.THREADS = args.threads
        return COMMANDS[args.command](args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except NonFiniteLoss as e:
        console.print(f"[red]{e}[/red]")
        if e.dump_path:
            console.print(f"[red]State dumped to {e.dump_path}[/red]")
        return EXIT_NUMERIC
    except TrisrError as e:
        console.print(f"[red]{type(e).__name__}: {e}[/red]")
        return e.exit_code
    except ValidationError as e:
        console.print(f"[red]Invalid configuration:[/red]\n{e}")
        return EXIT_USAGE
    except ValueError as e:
        console.print(f"[red]{e}[/red]")
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return EXIT_DATA


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
