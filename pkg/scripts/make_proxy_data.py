"""Write the procedural grayscale corpus (shapes / segments / glyphs) as IDX files."""

from __future__ import annotations

import argparse

from kirby.synthetic import write_proxy_corpus


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("root", help="output directory")
    parser.add_argument("--train", type=int, default=10000)
    parser.add_argument("--test", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    for name, path in write_proxy_corpus(args.root, args.train, args.test, args.seed).items():
        print(f"{name:<24} {path}")


if __name__ == "__main__":
    main()
