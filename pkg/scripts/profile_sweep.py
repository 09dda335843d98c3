"""Parameter and MAC totals across presets, modes and input sizes.

    python3 scripts/profile_sweep.py --sizes 320 352 384
"""

import argparse

from gapnet.model import PAPER_MACS, PAPER_PARAMS, ModelConfig, build_model, count_macs, count_params


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[320, 352, 384])
    ap.add_argument("--presets", nargs="+", default=["paper", "toy"])
    ap.add_argument("--modes", nargs="+", default=["image", "video"])
    args = ap.parse_args()

    print(f"{'preset':<7}{'mode':<7}{'size':>5}{'params':>12}{'MACs (G)':>11}{'vs ref':>9}")
    for preset in args.presets:
        for mode in args.modes:
            model = build_model(ModelConfig.preset(preset, mode=mode))
            params = count_params(model)["total"]
            for size in args.sizes:
                macs = count_macs(model, size).total
                ref = f"{macs / PAPER_MACS - 1:+.1%}" if (preset, mode, size) == ("paper", "image", 384) else ""
                print(f"{preset:<7}{mode:<7}{size:>5}{params:>12,d}{macs / 1e9:>11.3f}{ref:>9}")
    print(f"reference: {PAPER_PARAMS / 1e6:.2f}M parameters, {PAPER_MACS / 1e9:.2f}G at 384")


if __name__ == "__main__":
    main()
