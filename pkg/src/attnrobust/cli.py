"""``attnrobust`` command line.

Exit codes: 0 success, 2 validation error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import DEFAULT_EPSILON_GRID, load_config
from .errors import ConfigError, CorpusParseError, DivergenceError, LabelError

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3


def _grid(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError("grid", f"cannot parse {text!r}") from None


def _overrides(extra: list[str]) -> list[str]:
    for item in extra:
        if not (item.startswith("--") and "=" in item):
            raise ConfigError(item, "unrecognized argument (overrides look like --key=value)")
    return extra


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnrobust", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train every seed in a config and write summary.json")
    r.add_argument("config")

    s = sub.add_parser("sweep", help="run a config across an epsilon grid")
    s.add_argument("config")
    s.add_argument("--grid", type=str, default=",".join(f"{e:g}" for e in DEFAULT_EPSILON_GRID))
    s.add_argument("--jobs", type=int, default=1)

    c = sub.add_parser("compare", help="tabulate completed runs over the same corpus")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out", default=".")

    rep = sub.add_parser("report", help="re-render heatmaps.html from reports.jsonl")
    rep.add_argument("run_dir")

    syn = sub.add_parser("synth", help="write a synthetic binary sentiment corpus")
    syn.add_argument("out_dir")
    syn.add_argument("--n-train", type=int, default=2000)
    syn.add_argument("--n-valid", type=int, default=400)
    syn.add_argument("--n-test", type=int, default=600)
    syn.add_argument("--n-unlabeled", type=int, default=2000)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--unlabeled-domain", choices=("in", "out"), default="out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    # imported late so `--help` does not pay for torch
    from . import harness

    try:
        if args.command in ("run", "sweep"):
            cfg = load_config(args.config, _overrides(extra))
            if args.command == "run":
                print(harness.run(cfg) / "summary.json")
            else:
                result = harness.sweep(cfg, _grid(args.grid), jobs=args.jobs)
                print(f"robustness (std of per-epsilon mean accuracy): {result.robustness:.6f}")
        else:
            if extra:
                parser.error(f"unrecognized arguments: {' '.join(extra)}")
            if args.command == "compare":
                harness.compare(args.runs, args.out)
            elif args.command == "report":
                for path in harness.rerender(args.run_dir):
                    print(path)
            elif args.command == "synth":
                from .synthetic import write_corpus

                write_corpus(
                    args.out_dir,
                    args.n_train,
                    args.n_valid,
                    args.n_test,
                    args.n_unlabeled,
                    seed=args.seed,
                    unlabeled_domain=args.unlabeled_domain,
                )
    except (ConfigError, CorpusParseError, LabelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
