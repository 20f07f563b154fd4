"""Recall of labeled depth outliers and inlier loss of the temporal-consistency filter.

    python scripts/outlier_recall.py --fractions 0.05 0.1 0.2 0.3 --seeds 4
"""
import argparse

import numpy as np

from monovi.pipeline import PipelineConfig, run_initialization
from monovi.sim import Scenario, generate_sequence


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.05, 0.1, 0.2, 0.3])
    ap.add_argument("--seeds", type=int, default=4)
    args = ap.parse_args(argv)

    cfg = PipelineConfig(compute_condition=False)
    print("fraction  seed  branch  outliers  recall  inliers_dropped")
    for frac in args.fractions:
        recalls = []
        for seed in range(args.seeds):
            seq = generate_sequence(Scenario(kind="excited", duration=0.8, seed=seed, outlier_fraction=frac))
            win, gt = seq.window(0, 5), seq.truth(0, 5)
            rep = run_initialization(win, cfg)
            ids = {f.feature_id for f in rep.stage1_estimate.features}
            outliers, inliers = gt.outliers & ids, ids - gt.outliers
            rejected = set(rep.rejected_features)
            recall = len(rejected & outliers) / len(outliers) if outliers else float("nan")
            dropped = len(rejected & inliers) / len(inliers)
            recalls.append(recall)
            print(f"{frac:8.2f}  {seed:4d}  {rep.rejection_branch!s:>6}  {len(outliers):8d}  {recall:6.2f}  {dropped:15.2%}")
        print(f"{frac:8.2f}  mean recall {np.nanmean(recalls):.2f}")


if __name__ == "__main__":
    main()
