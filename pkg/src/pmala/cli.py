"""Command-line entry point: ``pmala <command> [options]``.

Exit codes: 0 on success, 2 for invalid input, 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, DomainError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("pmala")


def _add_common(p, needs_config=True):
    p.add_argument("--config", required=needs_config, help="experiment YAML file")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--workers", type=int, default=1, help="parallel sweep cells")
    p.add_argument("--out", help="override output.dir")


def build_parser():
    parser = argparse.ArgumentParser(prog="pmala", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("simulate-data", "simulate observations to CSV"),
                        ("pilot", "random-walk pilot run and covariance estimate"),
                        ("sweep", "chains over the (N, gamma) grid"),
                        ("diagnose", "noise study and regime diagnostics")]:
        _add_common(sub.add_parser(name, help=help_))
    th = sub.add_parser("theory", help="efficiency surface and maximin tables")
    _add_common(th, needs_config=False)
    th.add_argument("--K", type=float, default=1.0, help="roughness constant")
    th.add_argument("--ell-max", type=float, default=None)
    th.add_argument("--n-ell", type=int, default=100)
    th.add_argument("--sigma2-max", type=float, default=10.0)
    th.add_argument("--n-sigma2", type=int, default=100)
    th.add_argument("--sigma-min", type=float, default=0.5)
    th.add_argument("--sigma-max", type=float, default=3.0)
    th.add_argument("--n-sigma", type=int, default=11)
    return parser


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_output(args.out)
    return cfg


def run(args):
    from . import experiments as ex

    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    if args.command == "theory":
        ex.cmd_theory(args.out or ".", K=args.K, ell_max=args.ell_max, n_ell=args.n_ell,
                      sigma2_max=args.sigma2_max, n_sigma2=args.n_sigma2, sigma_min=args.sigma_min,
                      sigma_max=args.sigma_max, n_sigma=args.n_sigma)
        return
    cfg = _config(args)
    if args.command == "simulate-data":
        path = ex.cmd_simulate_data(cfg)
        log.info("wrote %s", path)
    elif args.command == "pilot":
        res = ex.cmd_pilot(cfg)
        log.info("pilot acceptance rates %s", res["acceptance_rates"])
    elif args.command == "sweep":
        rows = ex.cmd_sweep(cfg, workers=args.workers)
        log.info("swept %d cells", len(rows))
    elif args.command == "diagnose":
        report, _ = ex.cmd_diagnose(cfg)
        log.info("variance slope %.3f", report.slope)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        run(args)
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
