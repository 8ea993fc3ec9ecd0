"""viz command line: `viz embed` and `viz rounds`."""

from __future__ import annotations

import argparse
import sys

from .frames import ParseError
from .plots import plot_embeddings, plot_rounds


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viz", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    embed = sub.add_parser("embed", help="2-D projection scatter of an embedding CSV")
    embed.add_argument("csv", help="embedding CSV exported by the simulator")
    embed.add_argument("--proj", choices=("pca", "tsne"), default="pca")
    embed.add_argument("--color", choices=("original", "current"), default="original")
    embed.add_argument("--highlight", type=int, nargs="*", default=[],
                       help="class ids drawn last with a distinct marker")
    embed.add_argument("--seed", type=int, default=0, help="projection seed (t-SNE)")
    embed.add_argument("-o", "--out", required=True, help="output image path")
    embed.add_argument("--force", action="store_true", help="overwrite the output file")

    rounds = sub.add_parser("rounds", help="metric-vs-round curves from rounds.jsonl files")
    rounds.add_argument("jsonl", nargs="+", help="rounds.jsonl files, one line per run")
    rounds.add_argument("--metric", choices=("remaining_acc", "unlearning_acc", "loss"),
                        default="remaining_acc")
    rounds.add_argument("-o", "--out", required=True, help="output image path")
    rounds.add_argument("--force", action="store_true", help="overwrite the output file")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "embed":
            plot_embeddings(
                args.csv,
                args.out,
                projection=args.proj,
                color_by=args.color,
                highlight=tuple(args.highlight),
                seed=args.seed,
                force=args.force,
            )
        else:
            plot_rounds(args.jsonl, args.out, metric=args.metric, force=args.force)
    except (ParseError, FileNotFoundError, FileExistsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
