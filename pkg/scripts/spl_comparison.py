"""Hand-designed self-paced regularizers vs. the learned pace-generator on the
synthetic benchmark (one split, one seed).

    python3 scripts/spl_comparison.py --seed 1
"""

import argparse

from apl_seg.data import SplitConfig, SyntheticConfig, generate_synthetic, make_split
from apl_seg.evaluation import format_table
from apl_seg.spl import KINDS
from apl_seg.trainer import desk_config, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--labeled", type=int, default=50)
    ap.add_argument("--noise", type=float, default=0.5)
    args = ap.parse_args()

    samples = generate_synthetic(SyntheticConfig(num_images=500, noise_level=args.noise, seed=0))
    test = generate_synthetic(SyntheticConfig(num_images=200, noise_level=args.noise, seed=1000))
    labeled, unlabeled = make_split(samples, SplitConfig(labeled_count=args.labeled, seed=args.seed))
    cfg = desk_config(seed=args.seed)
    reports = {}
    for mode in [f"spl:{k}" for k in KINDS] + ["full"]:
        reports[mode] = run_ablation(mode, cfg, labeled, unlabeled, test)
        print(f"{mode}: max F {reports[mode].max_f:.4f}", flush=True)
    print(format_table(reports, title="self-paced regularizers vs. learned pace"))


if __name__ == "__main__":
    main()
