"""Overfit the toy model on synthetic blobs and report training-set MAE.

    python3 scripts/overfit.py --steps 300 --out runs/overfit
"""

import argparse
import tempfile
import time
from pathlib import Path

import numpy as np

from gapnet.dataio import RunConfig, make_blob_dataset, scan_dataset
from gapnet.pipeline import train, training_mae


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--flip", action="store_true")
    ap.add_argument("--out", help="run directory (default: a temporary one)")
    args = ap.parse_args()

    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="gapnet-overfit-"))
    root = make_blob_dataset(out / "data", n=args.images, size=args.size, seed=args.seed)
    run = RunConfig(
        preset="toy", lr=args.lr, batch_size=args.images, train_sizes=(args.size,),
        infer_size=args.size, epochs=args.steps, seed=args.seed,
    )
    t0 = time.perf_counter()
    model, man = train(root, run, out / "run", flip=args.flip, max_steps=args.steps)
    elapsed = time.perf_counter() - t0
    losses = np.asarray(man.losses)
    for i in range(0, len(losses), max(1, len(losses) // 10)):
        chunk = losses[i : i + max(1, len(losses) // 10)]
        print(f"steps {i + 1:>4}-{i + len(chunk):<4} mean loss {chunk.mean():.4f}")
    score = training_mae(model, scan_dataset(root), args.size)
    print(f"steps={man.steps} seconds={elapsed:.1f} training_mae={score:.4f} run_dir={out / 'run'}")


if __name__ == "__main__":
    main()
