"""CLI: encoder-bridge encode --meta PATH --out PATH --model NAME
[--batch-size N] [--normalize]"""

from __future__ import annotations

import argparse
import sys

from .encode import BridgeError, EncodeJob, encode_corpus


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="encoder-bridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("encode", help="encode a metadata file into a DRKAEMB1 vector file")
    p.add_argument("--meta", required=True, help="JSON Lines description metadata")
    p.add_argument("--out", required=True, help="output DRKAEMB1 path")
    p.add_argument("--model", required=True, help="sentence encoder name, or hash:<dim>")
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.add_argument("--normalize", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = EncodeJob(
        meta_path=args.meta,
        out_path=args.out,
        model_name=args.model,
        batch_size=args.batch_size,
        normalize=args.normalize,
    )
    try:
        rows, dim = encode_corpus(job)
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {rows} vectors of dimension {dim} to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
