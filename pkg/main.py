#!/usr/bin/env python3
"""
Main entry point for the DAN blind super-resolution toolkit
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

logger = logging.getLogger("dan")


class UsageError(Exception):
    """Invalid or missing command-line input"""

    def __init__(self, message: str, code: str = "E_USAGE"):
        super().__init__(message)
        self.code = code


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="flat TOML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=int, help="seed for all randomness")
    common.add_argument("--scale", type=int, choices=[1, 2, 3, 4], help="scale factor")
    common.add_argument("--setting", type=int, choices=[1, 2], help="degradation setting")
    common.add_argument("--iterations", type=int, help="alternations T")
    common.add_argument("--out", type=str, help="output directory")
    common.add_argument("--checkpoint", type=str, help="model checkpoint")
    common.add_argument("--shave", type=int, help="border removed before metrics (default: scale)")
    common.add_argument("--lambda-kernel", type=float, help="weight of the kernel loss")
    common.add_argument("--ablation", choices=["dpcb", "crb", "no-softmax", "no-longskip"], help="ablation preset")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="dan", description="DAN blind super-resolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="build evaluation sets or training tiles")
    synth.add_argument("--hr", required=True, help="directory of HR PNGs")
    synth.add_argument("--train", action="store_true", help="cut training tiles instead of an evaluation set")

    train = sub.add_parser("train", parents=[common], help="train DAN end to end")
    train.add_argument("--tiles", required=True, help="directory of HR training tiles")
    train.add_argument("--resume", help="checkpoint to resume from")
    train.add_argument("--max-steps", type=int, help="stop after this many steps")

    infer = sub.add_parser("infer", parents=[common], help="super-resolve a directory of LR PNGs")
    infer.add_argument("--lr", required=True, help="directory of LR PNGs")
    infer.add_argument("--no-kernels", action="store_true", help="skip kernel heatmaps and container")

    evaluate = sub.add_parser("eval", parents=[common], help="PSNR/SSIM and kernel errors on an evaluation set")
    evaluate.add_argument("--eval-set", required=True, help="directory written by synth")
    evaluate.add_argument("--non-blind", action="store_true", help="condition on ground-truth kernels")

    sweep = sub.add_parser("sweep", parents=[common], help="metrics for every iteration count")
    sweep.add_argument("--eval-set", required=True, help="directory written by synth")
    sweep.add_argument("--t-min", type=int, default=1)
    sweep.add_argument("--t-max", type=int, default=7)

    kernels = sub.add_parser("kernels", parents=[common], help="export or visualize kernel containers")
    kernels.add_argument("--input", help="kernel container to visualize")
    kernels.add_argument("--count", type=int, default=8, help="kernels to sample for setting 2")
    kernels.add_argument("--basis", action="store_true", help="also export the fitted PCA basis")

    bench = sub.add_parser("bench", parents=[common], help="parameters, MACs and inference speed")
    bench.add_argument("--eval-set", help="images to time")
    bench.add_argument("--input-size", type=int, default=64, help="LR side used for the MAC count")

    plot = sub.add_parser("plot", parents=[common], help="render sweep or kernel-error CSV files")
    plot.add_argument("--input", required=True, nargs="+", help="CSV files written by sweep or eval")

    serve = sub.add_parser("serve", parents=[common], help="start the FastAPI service")
    serve.add_argument("--host", type=str, default="0.0.0.0", help="Host for the FastAPI server (default: 0.0.0.0)")
    serve.add_argument("--port", type=int, default=8001, help="Port for the FastAPI server (default: 8001)")
    serve.add_argument("--reload", action="store_true", help="Enable auto-reload for development")
    return parser


def _configure_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _run_config(args, base=None):
    """Layer --config, --set and the dedicated flags; a bad value is a usage error"""
    from config.config import load_run_config
    from src.errors import ConfigError

    try:
        return load_run_config(
            args.config, args.overrides, base=base,
            seed=args.seed, scale=args.scale, setting=args.setting, iterations=args.iterations,
            shave=args.shave, lambda_kernel=args.lambda_kernel, ablation=args.ablation,
        )
    except ConfigError as e:
        raise UsageError(str(e), code=e.code) from e


def _out_dir(args) -> str:
    return args.out or os.path.join("runs", args.command)


def _require_checkpoint(args) -> str:
    if not args.checkpoint:
        raise UsageError(f"{args.command} requires --checkpoint")
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    return args.checkpoint


def _pipeline(args):
    from config.config import write_effective_config
    from dan_pipeline import DANPipeline

    # the checkpoint configuration is the base; requested architecture changes are rejected
    pipeline = DANPipeline.from_checkpoint(
        _require_checkpoint(args), configure=lambda saved: _run_config(args, base=saved)
    )
    write_effective_config(pipeline.run, _out_dir(args))
    return pipeline


def cmd_synth(args) -> dict:
    from dan_pipeline import synthesize

    return synthesize(_run_config(args), args.hr, _out_dir(args), train=args.train)


def cmd_train(args) -> dict:
    from src.training import Trainer

    trainer = Trainer(_run_config(args), args.tiles, _out_dir(args), resume=args.resume)
    reports = trainer.fit(args.max_steps)
    last = reports[-1].model_dump() if reports else {}
    return {"step": trainer.step, "last": last}


def cmd_infer(args) -> dict:
    pipeline = _pipeline(args)
    return pipeline.infer_directory(args.lr, _out_dir(args), args.iterations, save_kernels=not args.no_kernels)


def cmd_eval(args) -> dict:
    pipeline = _pipeline(args)
    if args.non_blind:
        return pipeline.non_blind(args.eval_set, _out_dir(args), args.shave)
    return pipeline.evaluate(args.eval_set, _out_dir(args), args.iterations, args.shave)


def cmd_sweep(args) -> dict:
    if args.t_min < 1 or args.t_max < args.t_min:
        raise UsageError("--t-min must be >= 1 and not above --t-max")
    pipeline = _pipeline(args)
    return pipeline.sweep(args.eval_set, _out_dir(args), range(args.t_min, args.t_max + 1), args.shave)


def cmd_kernels(args) -> dict:
    from config.config import write_effective_config
    from src.data import DegradationSpec, derive_seed
    from src.image_io import PNGProcessor
    from src.kernel_store import read_kernels, write_basis, write_kernels
    from src.kernels import gaussian8_sigmas, isotropic_gaussian, sample_kernel

    run = _run_config(args)
    out = Path(_out_dir(args))
    png = PNGProcessor()
    spec = DegradationSpec.from_run(run)
    if args.input:
        kernels = read_kernels(args.input)
    elif run.setting == 1:
        kernels = [isotropic_gaussian(spec.kernel_size, float(s)) for s in gaussian8_sigmas(max(run.scale, 2))]
    else:
        kernels = [sample_kernel(spec.family, np.random.default_rng(derive_seed(run.seed, i)))[0]
                   for i in range(args.count)]
    if not args.input:
        write_kernels(kernels, str(out / "kernels.bkrn"))

    for index, kernel in enumerate(kernels):
        png.write_heatmap(kernel, out / f"kernel_{index:02d}.png")
    summary = {"kernels": len(kernels), "kernel_size": kernels[0].size if kernels else 0}

    if args.basis:
        basis = spec.basis()
        write_basis(basis, str(out / "basis.pcab"))
        png.write_heatmap(basis.mean.reshape(basis.kernel_size, basis.kernel_size), out / "basis_mean.png")
        for index, component in enumerate(basis.components):
            png.write_heatmap(component.reshape(basis.kernel_size, basis.kernel_size), out / f"basis_pc{index:02d}.png")
        summary["basis_dim"] = basis.d
    write_effective_config(run, str(out))
    return summary


def cmd_bench(args) -> dict:
    from config.config import write_effective_config
    from dan_pipeline import DANPipeline
    from src.data import DegradationSpec
    from src.network import build_dan

    size = (3, args.input_size, args.input_size)
    if args.checkpoint:
        pipeline = _pipeline(args)
    else:
        # untrained model: the count and the timing do not depend on the weights
        run = _run_config(args)
        basis = DegradationSpec.from_run(run).basis()
        pipeline = DANPipeline(build_dan(run, basis), run, basis)
        write_effective_config(run, _out_dir(args))
    return pipeline.bench(_out_dir(args), args.eval_set, size, args.iterations)


def cmd_plot(args) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from src.evaluation import read_csv_rows

    os.makedirs(_out_dir(args), exist_ok=True)
    written: List[str] = []
    for path in args.input:
        rows = read_csv_rows(path)
        if not rows:
            raise UsageError(f"{path} has no rows")
        fig, ax = plt.subplots(figsize=(6, 4))
        if "T" in rows[0]:
            ax.plot([int(r["T"]) for r in rows], [float(r["psnr_y"]) for r in rows], marker="o")
            ax.set_xlabel("iterations T")
            ax.set_ylabel("PSNR-Y (dB)")
        elif "group" in rows[0]:
            ax.bar([r["group"] for r in rows], [float(r["l1_complete"]) for r in rows])
            ax.set_ylabel("kernel L1 error")
            ax.tick_params(axis="x", rotation=45)
        else:
            plt.close(fig)
            raise UsageError(f"{path} is neither a sweep nor a kernel-error table")
        ax.set_title(Path(path).stem)
        fig.tight_layout()
        target = os.path.join(_out_dir(args), f"{Path(path).stem}.png")
        fig.savefig(target, dpi=120)
        plt.close(fig)
        written.append(target)
    return {"plots": written}


def cmd_serve(args) -> dict:
    import uvicorn

    if args.checkpoint:
        os.environ["DAN_CHECKPOINT"] = _require_checkpoint(args)
    print(f"Starting DAN Blind Super-Resolution API Server...")
    print(f"Access the API documentation at: http://localhost:{args.port}/docs")
    uvicorn.run("api:app", host=args.host, port=args.port, reload=args.reload)
    return {}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "kernels": cmd_kernels,
    "bench": cmd_bench,
    "plot": cmd_plot,
    "serve": cmd_serve,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand

    Args:
        argv: arguments without the program name (sys.argv[1:] when omitted)

    Returns:
        exit code: 0 success, 1 runtime failure, 2 usage error
    """
    from src.errors import DanError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    _configure_logging(args.verbose)
    try:
        result = COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"dan-error[{e.code}]: {' '.join(str(e).split())}", file=sys.stderr)
        return EXIT_USAGE
    except DanError as e:
        print(e.one_line(), file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        print(f"dan-error[E_RUNTIME]: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    if result:
        logger.info("%s finished: %s", args.command, result)
    return EXIT_OK


def main():
    """Main function: load .env from the project root and dispatch"""
    env_path = os.path.join(os.path.dirname(os.path.abspath(__file__)), ".env")
    if os.path.exists(env_path):
        load_dotenv(env_path)
    sys.exit(run())


if __name__ == "__main__":
    main()
