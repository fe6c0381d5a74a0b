"""Command line: embexport export --conllu F --model M --layers 0,1 --out F.emb"""

from __future__ import annotations

import argparse
import json
import sys

from .core import ExportError, ExportSpec, export


def build_parser():
    top = argparse.ArgumentParser(prog="embexport", description=__doc__)
    sub = top.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="write an EMB1 file for a CoNLL-U file")
    p.add_argument("--conllu", required=True)
    p.add_argument("--model", default="hash-64",
                   help="'hash-<dim>' (offline) or a transformers model id")
    p.add_argument("--layers", default="0,1",
                   help="comma-separated layer indices; must include 0")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=16)
    return top


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        layers = tuple(int(x) for x in args.layers.split(",") if x.strip())
        spec = ExportSpec(
            conllu=args.conllu, model=args.model, layers=layers,
            out=args.out, batch_size=args.batch_size,
        )
        manifest = export(spec)
    except (ExportError, ValueError, OSError) as exc:
        print(f"embexport: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(manifest, indent=2))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
