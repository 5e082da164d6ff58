"""Command-line entry point: ``vluu {synth,train,eval,experiment,gradcheck}``.

Exit codes: 0 success, 2 usage/config error, 3 data/checkpoint error,
4 numeric divergence, 1 anything else (including failed gradient checks).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from vluu.errors import ConfigError, VluuError

log = logging.getLogger("vluu")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel experiment cells")
    p.add_argument("--out", default=None, help="output directory (or results file for eval)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="vluu", parents=[common],
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic benchmark")
    p.add_argument("--config", help="flat JSON synth config")

    p = sub.add_parser("train", parents=[common], help="train one strategy")
    p.add_argument("--strategy", required=True)
    p.add_argument("--data", required=True, help="directory written by 'synth'")
    p.add_argument("--config", help="flat JSON train config")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True, help="fully labeled dataset directory")

    p = sub.add_parser("experiment", parents=[common], help="run an experiment grid")
    p.add_argument("--spec", required=True, help="JSON experiment spec")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    return parser


def cmd_synth(args):
    from vluu.experiment import write_benchmark
    from vluu.synth import SynthConfig

    config = SynthConfig.from_file(args.config) if args.config else SynthConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.out is None:
        raise ConfigError("synth needs --out")
    bm = write_benchmark(config, args.out)
    n_train = sum(len(d) for d in bm.partial)
    print(f"wrote {n_train} training images in {len(bm.partial)} partial datasets "
          f"and {len(bm.test)} test images to {args.out}")
    return 0


def cmd_train(args):
    from vluu.checkpoint import write_checkpoint, write_disc_logs, write_history
    from vluu.experiment import load_benchmark
    from vluu.train import TrainConfig, train

    if not Path(args.data).is_dir():
        raise ConfigError(f"data directory {args.data} does not exist")
    if args.out is None:
        raise ConfigError("train needs --out")
    params = {}
    if args.config:
        params = TrainConfig.from_file(args.config).to_dict()
    params["strategy"] = args.strategy
    for key, value in (("seed", args.seed), ("alpha", args.alpha), ("lambda", args.lam),
                       ("total_steps", args.steps)):
        if value is not None:
            params[key] = value
    config = TrainConfig.from_dict(params)
    partial, _, oracle = load_benchmark(args.data)
    if config.strategy == "oracle" and oracle is None:
        raise ConfigError(f"{args.data} has no oracle/ dataset")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"strategy": config.strategy, "seed": config.seed, "train_config": config.to_dict()}

    def checkpoint(step, model, history):
        write_checkpoint(out / "checkpoint.bin", model, step, meta)
        log.info("step %d loss %.5f", step, history.losses[-1])

    result = train(oracle if config.strategy == "oracle" else partial, config, checkpoint)
    write_history(out / "history.tsv", result.history)
    if result.disc is not None:
        write_checkpoint(out / "disc_checkpoint.bin", result.disc, config.total_steps, meta)
        write_disc_logs(out, result.history)
    print(f"{config.strategy}: final loss {result.history.losses[-1]:.6f}, "
          f"checkpoint {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args):
    from vluu.checkpoint import read_checkpoint
    from vluu.data import FullDataset, load_dataset
    from vluu.errors import DataError
    from vluu.evaluate import evaluate, header, result_row

    model, meta = read_checkpoint(args.checkpoint)
    test = load_dataset(args.test)
    if not isinstance(test, FullDataset):
        raise DataError(f"{args.test} is not a fully labeled dataset")
    row = result_row(meta.get("strategy", model.kind), meta.get("seed", 0), evaluate(model, test))
    if args.out:
        path = Path(args.out)
        new = not path.exists()
        with open(path, "a") as fh:
            if new:
                fh.write(header(test.num_classes) + "\n")
            fh.write(row + "\n")
    print(row)
    return 0


def cmd_experiment(args):
    from vluu.experiment import ExperimentSpec, run_experiment

    spec = ExperimentSpec.from_file(args.spec)
    if args.out:
        spec.output_dir = args.out
    if args.seed is not None:
        spec.seeds = [args.seed]
    run_experiment(spec, jobs=args.jobs)
    out = Path(spec.output_dir)
    print((out / f"{spec.name}_summary.txt").read_text(), end="")
    return 0


def cmd_gradcheck(args):
    from vluu.gradcheck import format_report, run_gradcheck

    results = run_gradcheck(seed=args.seed or 0)
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except VluuError as exc:
        print(f"vluu {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except json.JSONDecodeError as exc:
        print(f"vluu {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
