import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from lodslab import config
from lodslab.config import default_config_toml, load_run_config
from lodslab.oracle import ORACLE_PRESETS, run_oracle_preset, write_reports
from lodslab.priors import VARIANTS
from lodslab.recipes import RECIPES, recipe_suite, run_distill, run_eval, run_export, run_train
from lodslab.utils import LodsError, parse_guidance

logger = logging.getLogger("lodslab")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lodslab", description="Score-distillation prior laboratory")
    parser.add_argument("--print-defaults", action="store_true", help="Print the default run config and exit")
    parser.add_argument("--log-level", type=str, default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging level (default from LODS_LOG_LEVEL)")
    commands = parser.add_subparsers(dest="command")

    def common(sub, out=True):
        sub.add_argument("--config", type=str, default=None, help="TOML run config")
        sub.add_argument("--seed", type=int, default=None, help="Run seed")
        if out:
            sub.add_argument("--out", type=str, default=None, help="Run directory")

    train = commands.add_parser("train", help="Train a conditional denoiser")
    common(train)
    train.add_argument("--data", type=str, default=None, choices=["mixture2d", "shapes"], help="Training corpus")
    train.add_argument("--steps", type=int, default=None, help="Optimizer steps")

    distill = commands.add_parser("distill", help="Distil a prior into generator parameters")
    common(distill)
    distill.add_argument("--variant", type=str, default=None, choices=VARIANTS, help="Prior variant")
    distill.add_argument("--w", type=str, default=None, help="Guidance weight (number or 'inf')")
    distill.add_argument("--generator", type=str, default=None, choices=["identity", "splats"], help="Generator")
    distill.add_argument("--steps", type=int, default=None, help="Distillation steps")
    distill.add_argument("--checkpoint", type=str, default=None, help="Trained denoiser checkpoint")
    distill.add_argument("--particles", type=int, default=None, help="Particles for the identity generator")
    distill.add_argument("--noise-policy", type=str, default=None, choices=["fresh", "reuse"],
                         help="Noise for the alignment step")
    distill.add_argument("--snapshot-every", type=int, default=None, help="Keep theta every N steps")

    oracle = commands.add_parser("oracle", help="Analytic versus Monte-Carlo sandbox checks")
    oracle.add_argument("--preset", type=str, default="equal-variance", choices=ORACLE_PRESETS)
    oracle.add_argument("--w", type=str, default="7.5", help="Guidance weight")
    oracle.add_argument("--n", type=int, default=100_000, help="Monte-Carlo samples")
    oracle.add_argument("--seed", type=int, default=0)
    oracle.add_argument("--out", type=str, default=None, help="Directory for oracle.json")

    evaluate = commands.add_parser("eval", help="MMD of a saved run's particles")
    evaluate.add_argument("--run", type=str, required=True, help="Run directory")
    evaluate.add_argument("--n", type=int, default=1000, help="Reference samples")
    evaluate.add_argument("--seed", type=int, default=0)

    export = commands.add_parser("export", help="Render theta snapshots to images / CSV")
    export.add_argument("--run", type=str, required=True, help="Run directory")

    recipe = commands.add_parser("recipe", help="Run a canned experiment grid")
    recipe.add_argument("name", type=str, choices=RECIPES)
    recipe.add_argument("--out", type=str, default=None, help="Report directory")
    recipe.add_argument("--seed", type=int, default=0)
    recipe.add_argument("--checkpoint", type=str, default=None, help="Trained mixture2d checkpoint")
    recipe.add_argument("--steps", type=int, default=None, help="Steps per distillation")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """CLI flags that were given, as a nested RunConfig fragment."""
    o: Dict[str, Any] = {"experiment": "train" if args.command == "train" else "distill"}
    sections: Dict[str, Dict[str, Any]] = {}

    def put(section, key, value):
        if value is not None:
            sections.setdefault(section, {})[key] = value

    if args.seed is not None:
        o["seed"] = args.seed
    if args.command == "train":
        put("dataset", "kind", args.data)
        put("train", "steps", args.steps)
    else:
        put("prior", "variant", args.variant)
        put("prior", "w", parse_guidance(args.w))
        put("prior", "steps", args.steps)
        put("prior", "noise_policy", args.noise_policy)
        put("generator", "kind", args.generator)
        put("generator", "particles", args.particles)
        put("denoiser", "checkpoint", args.checkpoint)
        if args.snapshot_every is not None:
            o["snapshot_every"] = args.snapshot_every
    o.update(sections)
    return o


def _print_banner(args: argparse.Namespace):
    print("-" * 50)
    print("...Current arguments used...")
    for k, v in vars(args).items():
        print(f"{k}: '{v}' ")
    print("-" * 50)


def run_command(args: argparse.Namespace) -> int:
    if args.command in ("train", "distill"):
        cfg = load_run_config(args.config, _overrides(args))
        run_dir = Path(args.out or Path(cfg.output_dir) / args.command)
        if args.command == "train":
            summary = run_train(cfg, run_dir)
        else:
            summary = run_distill(cfg, run_dir).summary()
        print(json.dumps(summary, indent=2))
        logger.info(f"Artifacts in {run_dir}")
        return 0

    if args.command == "oracle":
        reports = run_oracle_preset(args.preset, parse_guidance(args.w), n=args.n, seed=args.seed)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            write_reports(reports, Path(args.out) / "oracle.json")
        print(json.dumps([r.to_dict() for r in reports], indent=2))
        failed = [r.quantity for r in reports if r.verdict != "pass"]
        if failed:
            logger.error(f"Oracle checks failed: {failed}")
            return 1
        return 0

    if args.command == "eval":
        print(json.dumps(run_eval(args.run, n=args.n, seed=args.seed), indent=2))
        return 0

    if args.command == "export":
        for path in run_export(args.run):
            print(path)
        return 0

    out = Path(args.out or Path(config.OUTPUT_DIR) / f"recipe-{args.name}")
    report = recipe_suite(args.name, out, seed=args.seed, checkpoint=args.checkpoint, steps=args.steps)
    print(json.dumps({"recipe": report["recipe"], "passed": report["passed"]}, indent=2))
    return 0 if report["passed"] else 1


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        print(default_config_toml(), end="")
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("lodslab: error: a command is required", file=sys.stderr)
        return 2

    logging.basicConfig(
        level=args.log_level or config.LOG_LEVEL,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    _print_banner(args)
    try:
        return run_command(args)
    except (LodsError, OSError, ValueError) as e:
        logger.error(str(e))
        print(f"lodslab: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
