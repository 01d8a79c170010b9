"""Feasibility experiment: train the candidate acceptance fixture and report
every quality number the acceptance suite will assert."""

import json
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from glioworld.config import CohortConfig, ModelConfig, TrainConfig
from glioworld.cohort import generate_cohort, split_cohort
from glioworld.metrics import counterfactual_direction, evaluate_model, render_report
from glioworld.model import WorldModel
from glioworld.train import train_model


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    patch = int(sys.argv[2]) if len(sys.argv) > 2 else 8
    cohort_cfg = CohortConfig(n_subjects=8, patch=patch)
    cohort = generate_cohort(7, cohort_cfg)
    train, val = split_cohort(cohort, 0.8, seed=0)
    print("train subjects:", [t.subject_id for t in train])
    print("val subjects:", [t.subject_id for t in val])

    c_lat = int(sys.argv[3]) if len(sys.argv) > 3 else 0
    mc = ModelConfig(n_layers=4, d_model=64, n_heads=4, d_ff=256, patch=patch,
                     grid=32, c_lat=c_lat, aligner_taps=(1, 2), aligner_width=16,
                     flow_depth=2)
    tc = TrainConfig(steps=steps, batch_size=4, lr=1e-3, seed=0)
    model = WorldModel(mc, seed=0, dtype=np.float32)
    t0 = time.time()
    train_model(model, train, tc, progress=True)
    print(f"trained {steps} steps in {time.time() - t0:.0f}s")

    for name, subset in (("TRAIN", train), ("VAL", val)):
        t1 = time.time()
        rep = evaluate_model(model, subset, steps=None)
        print(f"===== {name} (eval {time.time() - t1:.0f}s) =====")
        print(render_report(rep))
    t1 = time.time()
    cf = counterfactual_direction(model, val, steps=None)
    print(f"counterfactual (val): {cf['fraction_correct']:.2f} over {cf['n']} pairs "
          f"({time.time() - t1:.0f}s)")
    for d in cf["details"]:
        print("  ", json.dumps(d))


if __name__ == "__main__":
    main()
