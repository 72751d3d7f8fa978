"""CLI mirroring the primary toolkit's fim subcommand flags."""

from __future__ import annotations

import argparse
import sys

import torch

from .extract import ExtractorConfig, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fim-extract",
        description="Extract diagonal Fisher scores from a checkpoint using "
                    "random token inputs and emit the interchange JSON",
    )
    parser.add_argument("--model", required=True,
                        help="micro archive file or HF model directory")
    parser.add_argument("--model-kind", default="auto", choices=["auto", "micro", "hf"])
    parser.add_argument("--n", type=int, default=8)
    parser.add_argument("--seq-len", type=int, default=64)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--out", default="fim.json")
    parser.add_argument("--elementwise", default=None,
                        help="also write the elementwise archive here")
    parser.add_argument("--device", default="cpu")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = ExtractorConfig(
        model=args.model, n_samples=args.n, seq_len=args.seq_len, seed=args.seed,
        out=args.out, elementwise_out=args.elementwise, device=args.device,
        model_kind=args.model_kind,
    )
    try:
        doc = extract(config)
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MemoryError, torch.cuda.OutOfMemoryError) as exc:
        print(f"error: out of memory during the backward pass; reduce --seq-len "
              f"or --n ({exc})", file=sys.stderr)
        return 1
    print(f"extracted {len(doc['per_layer'])} layers -> {args.out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
