"""Degree ablation on the synthetic spiral, several seeds, via the CLI."""
import argparse
import sys

from kdl.cli import main


def run():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/spiral_ablation")
    ap.add_argument("--degrees", default="1,2,3")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--max-epochs", default="200")
    args = ap.parse_args()
    return main(["ablation", "--config", "configs/spiral_kdl3.json", "--params", "configs/train_spiral.json",
                 "--data", "synthetic:spiral", "--out", args.out, "--degrees", args.degrees,
                 "--seeds", args.seeds, "--max-epochs", args.max_epochs, "--with-fc"])


if __name__ == "__main__":
    sys.exit(run())
