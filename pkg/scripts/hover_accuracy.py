"""Scale error with and without depth constraints on noisy low-motion windows.

    python scripts/hover_accuracy.py --seeds 50
"""
import argparse
import sys

import numpy as np

from monovi.errors import InitializationFailed
from monovi.evaluation import evaluate_window
from monovi.pipeline import PipelineConfig, run_initialization
from monovi.sim import generate_sequence, preset


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--keyframes", type=int, default=5)
    args = ap.parse_args(argv)

    cfg = PipelineConfig(compute_condition=False, keyframes=args.keyframes)
    base, depth = [], []
    print("seed  accel[m/s2]  scale_err_vi[%]  scale_err_depth[%]")
    for seed in range(args.seeds):
        seq = generate_sequence(preset("noisy-hover", seed))
        win, gt = seq.window(0, args.keyframes), seq.truth(0, args.keyframes)
        try:
            rep = run_initialization(win, cfg)
        except InitializationFailed as exc:
            print(f"{seed:4d}  failed in {exc.stage}")
            continue
        # stage 1 is exactly the depth-free solution
        e1 = evaluate_window(rep.stage1_estimate.states, gt.states).scale_error_pct
        e2 = evaluate_window(rep.estimate.states, gt.states).scale_error_pct
        base.append(e1)
        depth.append(e2)
        print(f"{seed:4d}  {gt.mean_acceleration:11.4f}  {e1:15.1f}  {e2:18.1f}")
    if base:
        base, depth = np.array(base), np.array(depth)
        print(
            f"improved in {int(np.sum(depth < base))}/{len(base)}; "
            f"mean {base.mean():.1f}% -> {depth.mean():.1f}%, median {np.median(base):.1f}% -> {np.median(depth):.1f}%",
            file=sys.stderr,
        )


if __name__ == "__main__":
    main()
