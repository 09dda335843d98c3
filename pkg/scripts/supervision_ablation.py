"""Train the toy model briefly under each supervision setting on blobs.

Desk-scale only: it shows the settings are wired and trainable, not the
benchmark ranking.

    python3 scripts/supervision_ablation.py --steps 100
"""

import argparse
import tempfile
from dataclasses import replace
from pathlib import Path

from gapnet.dataio import RunConfig, image_to_chw, load_mask, make_blob_dataset, read_image_array, scan_dataset
from gapnet.metrics import evaluate_pair
from gapnet.model import SUPERVISION_SETTINGS
from gapnet.pipeline import predict, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--settings", default="".join(sorted(SUPERVISION_SETTINGS)))
    args = ap.parse_args()

    tmp = Path(tempfile.mkdtemp(prefix="gapnet-ablation-"))
    train_root = make_blob_dataset(tmp / "train", n=8, size=64, seed=0)
    test_recs = scan_dataset(make_blob_dataset(tmp / "test", n=8, size=64, seed=1))
    base = RunConfig(preset="toy", lr=3e-3, batch_size=8, train_sizes=(64,), infer_size=64, epochs=args.steps)
    print(f"{'setting':<9}{'final loss':>11}{'mae':>8}{'fmax':>8}{'sm':>8}")
    for s in args.settings:
        run = replace(base, supervision_setting=s)
        model, man = train(train_root, run, tmp / f"run_{s}", flip=False, max_steps=args.steps)
        rows = []
        for r in test_recs:
            p3 = predict(model, image_to_chw(read_image_array(r.image_path)), 64)["p3"]
            rows.append(evaluate_pair(p3, load_mask(r.mask_path)))
        mean = {k: sum(getattr(m, k) for m in rows) / len(rows) for k in ("mae", "f_max", "s_measure")}
        print(f"{s:<9}{man.losses[-1]:>11.4f}{mean['mae']:>8.4f}{mean['f_max']:>8.4f}{mean['s_measure']:>8.4f}")


if __name__ == "__main__":
    main()
