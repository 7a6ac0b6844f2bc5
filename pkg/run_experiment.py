import json
import logging
import multiprocessing as mp
import os
import sys
from typing import List, Optional

from fpp_flows.common import (
    ConfigError,
    DomainError,
    Experiments,
    FppError,
    configure_logging,
)
from fpp_flows.config import ExperimentConfig
from fpp_flows.experiments import replay, run
from fpp_flows.utils.fileio import load_yaml

logger = logging.getLogger("run_experiment")


def _load(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    data = load_yaml(path)
    # a manifest written by a previous run nests the config
    if "config" in data and "config_hash" in data:
        data = data["config"]
    return ExperimentConfig.from_dict(data)


def main(argv: Optional[List[str]] = None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="Monte-Carlo experiments on maximal flows.")
    parser.add_argument("command", choices=Experiments.list() + ["replay"])
    parser.add_argument("--config", type=str, default=None)
    parser.add_argument("--out", type=str, default="runs")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--dimension", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--all-cores", action="store_true")
    parser.add_argument("--p", type=int, default=None)
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)

    configure_logging(args.verbose)
    try:
        config = _load(args.config)
        if args.command != "replay":
            config = config.replace(experiment=args.command)
        config = config.replace(
            dimension=args.dimension,
            workers=mp.cpu_count() if args.all_cores else args.workers,
            verbose=args.verbose or None,
        )
        if args.command == "replay":
            if args.p is None or args.seed is None:
                raise ConfigError("replay needs --p and --seed.")
            for record in replay(config, args.p, args.seed):
                print(json.dumps(record, sort_keys=True))
            return 0
        config = config.replace(seed=args.seed)
        out_dir = os.path.join(args.out, config.experiment)
        return run(config, out_dir, config_path=args.config)
    except (ConfigError, DomainError) as e:
        logger.error("%s", e)
        return 2
    except FppError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
