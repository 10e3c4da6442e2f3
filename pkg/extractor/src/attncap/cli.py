"""attncap CLI: extract --model ID --image PATH --out DIR [--per-layer]."""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ExtractorError, ModelUnavailable
from .extract import AGG_MEAN, AGG_PER_LAYER, ExtractionJob, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attncap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="capture attention for one image")
    p.add_argument("--model", required=True, help='runtime id: "mock", "mock-untagged", or a transformers model id')
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-layer", action="store_true", help="emit per-layer rows instead of the layer/head mean")
    p.add_argument("--label", type=int, default=0, choices=(0, 1), help="image-level ground truth if known (default 0)")
    p.add_argument("--sample-id", default="")
    p.add_argument("--seed", type=int, default=0, help="mock runtime seed (default 0)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    job = ExtractionJob(
        model=args.model,
        image_path=args.image,
        out_dir=args.out,
        aggregation_mode=AGG_PER_LAYER if args.per_layer else AGG_MEAN,
        label=args.label,
        sample_id=args.sample_id,
        seed=args.seed,
    )
    try:
        out = extract(job)
    except ModelUnavailable as exc:
        print(f"error: ModelUnavailable: {exc}", file=sys.stderr)
        return 3
    except ExtractorError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    print(json.dumps({"out_dir": str(out)}))
    return 0


def entrypoint() -> None:
    raise SystemExit(main())
