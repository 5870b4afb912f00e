"""Command-line interface.

Verbs: ``gen-env``, ``run <config>``, ``preset <name>``, ``validate <config>``.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .config import load_config
from .env import LAWS, LatticeBox, check_supercritical, generate_environment, save_environment
from .errors import ConfigError, ParameterError, PercHomError, StageError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="perchom", description="Homogenization experiments on percolation clusters.")
    sub = ap.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-env", help="sample an environment and write it as a PERCENV file")
    g.add_argument("output")
    g.add_argument("--box", type=int, default=81, help="side of the centered box")
    g.add_argument("--d", type=int, default=2, choices=(2, 3))
    g.add_argument("--p", type=float, default=0.7)
    g.add_argument("--lambda", dest="lam", type=float, default=1.0)
    g.add_argument("--law", default="bernoulli-unit", help=f"one of {', '.join(LAWS)}")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true", help="allow p at or below the supercritical guard")

    r = sub.add_parser("run", help="run the experiment described by a config file")
    r.add_argument("config")
    r.add_argument("--output", help="output directory (overrides the config)")

    p = sub.add_parser("preset", help="run a named preset")
    p.add_argument("name", choices=("smoke", "figure1", "figure2"))
    p.add_argument("--output", help="output directory (default: preset name)")

    v = sub.add_parser("validate", help="parse a config and print its canonical form")
    v.add_argument("config")
    return ap


def _err(msg: str) -> None:
    print(f"perchom: {msg}", file=sys.stderr)


def _report(man, outdir) -> None:
    print(f"{man.experiment}: {len(man.outputs)} artifacts in {outdir}")
    print(f"total {man.timings.get('total', 0.0):.2f} s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.verb == "validate":
            cfg = load_config(args.config)
            sys.stdout.write(cfg.to_text())
            return EXIT_OK
        if args.verb == "gen-env":
            try:
                check_supercritical(args.p, args.d, args.force)
            except ParameterError as exc:
                raise ConfigError(f"{exc} (use --force)") from None
            env = generate_environment(LatticeBox.centered(args.box, args.d), args.p, args.lam, args.law, args.seed)
            save_environment(env, args.output)
            print(f"wrote {args.output}: {env.n_open()} open bonds of {env.box.n_bonds}")
            return EXIT_OK
        from .runner import run, run_preset

        if args.verb == "run":
            cfg = load_config(args.config)
            out = args.output or cfg.output
            _report(run(cfg, out), out)
        else:
            out = args.output or args.name
            _report(run_preset(args.name, out), out)
        return EXIT_OK
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except StageError as exc:
        _err(str(exc))
        return EXIT_CONFIG if isinstance(exc.cause, (ConfigError, ParameterError)) else EXIT_NUMERIC
    except PercHomError as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_CONFIG if isinstance(exc, ParameterError) else EXIT_NUMERIC
    except OSError as exc:
        _err(str(exc))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
