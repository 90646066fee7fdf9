"""`refiner <manifest.json> [--weights PATH]` entry point."""

from __future__ import annotations

import argparse
import sys

from .pipeline import refine_batch


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="refiner", description="DDIM image refiner (manifest protocol)")
    parser.add_argument("manifest", help="JSON manifest: inputs, output_dir, strength, prompt, seed")
    parser.add_argument("--weights", default=None, help="per-scene denoiser coefficient table (.npz)")
    args = parser.parse_args(argv)
    try:
        outputs = refine_batch(args.manifest, weights_path=args.weights)
    except Exception as e:
        print(f"refiner error: {e}", file=sys.stderr)
        return 1
    print(f"refined {len(outputs)} images")
    return 0


if __name__ == "__main__":
    sys.exit(main())
