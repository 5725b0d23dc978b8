"""
GP-SEM Actuator Identification
Command-line front end: simulate, identify, classify, compensate and evaluate.
"""

import argparse
import logging
import os
import sys

from dotenv import load_dotenv

# Add src directory to Python path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))

from pipeline import EVALUATIONS, ActuatorPipeline, __version__  # noqa: E402
from scenario import ConfigError, RunConfig, environment_defaults, load_scenario  # noqa: E402

# Load environment variables
load_dotenv()

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_CODES = {"validation": EXIT_VALIDATION, "numerical": EXIT_NUMERICAL, "internal": EXIT_INTERNAL}

logger = logging.getLogger("gpsem")


def on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpsem",
        description="Mixture-of-GP identification and passive compensation of a 1-DOF actuator",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario JSON file or name under data/scenarios")
    common.add_argument("--seed", type=int, help="random seed (default: scenario, then GPSEM_SEED)")
    common.add_argument("--out", help="output directory (default: GPSEM_OUTPUT_DIR)")
    common.add_argument("--modes", type=int, help="total number of mixture modes K")
    common.add_argument("--pi", type=float, help="Markov stay probability")
    common.add_argument("--iters", type=int, help="SEM iterations")
    common.add_argument("--restarts", type=int, help="SEM chains started, the best one is continued")
    common.add_argument("--sgn-feature", type=on_off, help="append sgn(θ̇) to the features (on|off)")
    common.add_argument("--disturbance", type=on_off, help="use the last mode as disturbance mode (on|off)")
    common.add_argument("--no-figures", action="store_true", help="skip HTML figure export")

    sub = parser.add_subparsers(dest="command", required=True)
    simulate = sub.add_parser("simulate", parents=[common], help="generate an annotated dataset")
    simulate.add_argument("--dataset", help="dataset path to write")

    identify = sub.add_parser("identify", parents=[common], help="run Stochastic EM on a dataset")
    identify.add_argument("--dataset", required=True)
    identify.add_argument("--bundle", help="bundle path to write")

    classify = sub.add_parser("classify", parents=[common], help="mode posteriors from a bundle")
    classify.add_argument("--bundle", required=True)
    classify.add_argument("--dataset", help="classify this dataset instead of the training set")

    compensate = sub.add_parser("compensate", parents=[common], help="closed-loop run with the learned policy")
    compensate.add_argument("--bundle", help="model bundle (omit for the uncompensated policy)")
    compensate.add_argument("--duration", type=float)

    evaluate = sub.add_parser("evaluate", parents=[common], help="reproduction experiments")
    evaluate.add_argument("--which", default="all", choices=EVALUATIONS + ("all",))
    evaluate.add_argument("--bundle")
    evaluate.add_argument("--dataset")

    sub.add_parser("version", help="print the version")
    return parser


def parse_args(args):
    return build_parser().parse_args(args)


def build_pipeline(args) -> ActuatorPipeline:
    scenario = load_scenario(args.config)
    run = RunConfig.resolve(scenario, {
        "seed": args.seed,
        "modes": args.modes,
        "stay_probability": args.pi,
        "iterations": args.iters,
        "restarts": args.restarts,
        "sgn_feature": args.sgn_feature,
        "disturbance": args.disturbance,
        "output_dir": args.out,
    })
    return ActuatorPipeline(scenario, run, write_figures=not args.no_figures)


def print_result(result) -> None:
    if not result["success"]:
        print(f"❌ {result['command']} failed: {result['error']}")
        return
    print(f"✅ {result['command']} finished (config {result['config_hash'][:12]})")
    for key in ("dataset_path", "bundle_path", "report_path"):
        if key in result:
            print(f"💾 {result[key]}")
    summary = result.get("summary", {})
    if summary:
        print("📊 Summary:")
        for key, value in summary.items():
            print(f"  {key}: {value}")


def main(raw_args) -> int:
    args = parse_args(raw_args)
    if args.command == "version":
        print(f"gpsem {__version__}")
        return EXIT_OK

    try:
        level = environment_defaults()["log_level"]
    except ConfigError as e:
        print(f"❌ {e}")
        return EXIT_VALIDATION
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        pipeline = build_pipeline(args)
    except (ConfigError, ValueError) as e:
        print(f"❌ {e}")
        return EXIT_VALIDATION

    logger.info("Pipeline: %s", pipeline.get_stats())
    if args.command == "simulate":
        result = pipeline.simulate(args.dataset)
    elif args.command == "identify":
        result = pipeline.identify(args.dataset, args.bundle)
    elif args.command == "classify":
        result = pipeline.classify(args.bundle, args.dataset)
    elif args.command == "compensate":
        result = pipeline.compensate(args.bundle, args.duration)
    else:
        result = pipeline.evaluate(args.which, args.bundle, args.dataset)

    print_result(result)
    if result["success"]:
        return EXIT_OK
    return EXIT_CODES[result.get("error_kind", "internal")]


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
