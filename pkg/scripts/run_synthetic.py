#!/usr/bin/env python3
"""End-to-end demo on generated data: synthesize, train, evaluate, predict.

Writes everything under ./demo_run (or the directory given as argv[1]) and
shells out to the installed CLI so the walkthrough matches what a user types.
"""

import pathlib
import subprocess
import sys


def run(*args: str) -> None:
    print("$", " ".join(args))
    subprocess.run(args, check=True)


def main() -> None:
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
    out.mkdir(parents=True, exist_ok=True)
    data = out / "data"
    run("segloc", "synth", "--out", str(data), "--videos", "60",
        "--frames", "32", "--dim", "16", "--segments", "4", "--seed", "0")
    run("segloc", "train",
        "--manifest", str(data / "manifest.tsv"),
        "--out", str(out / "params.bin"),
        "--epochs", "50",
        "--log", str(out / "loss.log"))
    run("segloc", "eval",
        "--manifest", str(data / "manifest.tsv"),
        "--params", str(out / "params.bin"),
        "--n", "1,5", "--iou", "0.3,0.5,0.7")
    run("segloc", "predict",
        "--manifest", str(data / "manifest.tsv"),
        "--params", str(out / "params.bin"))


if __name__ == "__main__":
    main()
