"""Command-line entry point.

    python main.py run --config configs/trig.json --out runs/trig
    python main.py fit-lti --config configs/msd.json --out runs/msd
"""
import argparse
import json
import logging
import os
import sys

import pipeline
from sysid import plant as plants
from utils import storage
from utils.config import DEFAULT_OUT_DIR, STAGES, load_config
from utils.errors import RciSysidError
from utils.log import configure_logging

logger = logging.getLogger("rci_sysid")

STAGE_COMMANDS = {
    "fit-lti": "fit_lti",
    "init-rci": "init_rci",
    "fit-qlpv": "fit_qlpv",
    "reduce": "reduce",
    "fit-concurrent": "fit_concurrent",
    "control-sim": "control_sim",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="rci-sysid",
                                     description="qLPV identification with control-invariant sets")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults for every missing key)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default=DEFAULT_OUT_DIR, help="output directory")
    common.add_argument("--data", help="training CSV (t,u1..,y1..)")
    common.add_argument("--test-data", help="test CSV; defaults to the training CSV")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="simulate the configured plant and write train/test CSVs")
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {STAGE_COMMANDS[name]} stage")
    sub.add_parser("eval", parents=[common], help="BFR of every saved model")
    sub.add_parser("sweep-tau", parents=[common], help="concurrent fits over tau_grid")
    sub.add_parser("sweep-kp", parents=[common], help="qLPV fits over kp_grid")
    sub.add_parser("run", parents=[common], help="all enabled stages in order")
    return parser


def cmd_gen_data(args, config):
    seed = config.seed if args.seed is None else args.seed
    train, test = plants.generate(config.data, seed)
    os.makedirs(args.out, exist_ok=True)
    plants.save_csv(train, os.path.join(args.out, "train.csv"))
    plants.save_csv(test, os.path.join(args.out, "test.csv"))
    logger.info("Wrote %d training and %d test samples to %s", train.n, test.n, args.out)


def cmd_eval(run):
    found = 0
    for stage in STAGES:
        path = storage.artifact_path(run.out_dir, stage)
        if not os.path.exists(path):
            continue
        result = pipeline.load_stage(path, stage)
        metrics = pipeline.evaluate(result.model, run.train, run.test)
        found += 1
        print(json.dumps({"stage": stage, "n_x": result.model.n_x, "n_p": result.model.n_p, **metrics}))
    if not found:
        logger.warning("No model files in %s", run.out_dir)


def dispatch(args):
    config = load_config(args.config)
    if args.command == "gen-data":
        return cmd_gen_data(args, config)
    run = pipeline.prepare_run(config, args.out, args.seed, args.data, args.test_data)
    if args.command == "run":
        for stage in STAGES:
            if config.stage_enabled(stage):
                pipeline.run_stage(run, stage)
    elif args.command in STAGE_COMMANDS:
        pipeline.run_stage(run, STAGE_COMMANDS[args.command])
    elif args.command == "eval":
        cmd_eval(run)
    elif args.command == "sweep-tau":
        pipeline.sweep_tau(run)
    elif args.command == "sweep-kp":
        pipeline.sweep_kp(run)


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        dispatch(args)
    except RciSysidError as e:
        logger.error("%s", e)
        print(json.dumps({"error": str(e), "type": type(e).__name__, "stage": e.stage,
                          "exit_code": e.exit_code}), file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
