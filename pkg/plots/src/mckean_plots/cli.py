"""Batch figure rendering from the command line.

    mckean-plots picard-decay --picard picard.csv --out fig/picard
    mckean-plots density-histogram --density density.csv --paths paths.csv --out fig/density
"""

import argparse
import sys

from .figures import EXPECTED_HEADERS, FIGURE_KINDS, FigureSpec, SchemaError, render


def main(argv=None):
    parser = argparse.ArgumentParser(prog="mckean-plots")
    parser.add_argument("kind", choices=FIGURE_KINDS)
    parser.add_argument("--out", default="figure",
                        help="output path stem (.png and .svg are written)")
    for role in sorted({r for roles in EXPECTED_HEADERS.values() for r in roles}):
        parser.add_argument(f"--{role}", help=f"{role}.csv input")
    args = parser.parse_args(argv)
    inputs = {role: getattr(args, role)
              for role in EXPECTED_HEADERS[args.kind]
              if getattr(args, role, None)}
    try:
        written = render(FigureSpec(kind=args.kind, inputs=inputs, out=args.out))
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
