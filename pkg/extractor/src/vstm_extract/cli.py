"""vstm-extract: encode an image directory into a .vstm1 container."""

import argparse
import sys

from .extract import ExtractionError, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vstm-extract",
        description="Batch-encode images with a CLIP vision checkpoint into "
        "a vstm embedding container (manifest JSON written alongside).",
    )
    parser.add_argument("--images", required=True, help="directory of image files")
    parser.add_argument("--model", required=True, help="checkpoint name or path")
    parser.add_argument("--out", required=True, help="output .vstm1 path")
    parser.add_argument("--batch-size", type=int, default=16)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        container, manifest = extract(
            args.images, args.model, batch_size=args.batch_size, out_path=args.out
        )
    except (ExtractionError, OSError, ValueError) as err:
        print(f"vstm-extract: {err}", file=sys.stderr)
        return 2
    n, d = container.embeddings.shape
    print(f"wrote {n} x {d} embeddings to {args.out} ({len(manifest.failures)} failures)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
