"""Scarce-real augmentation trend: rendered synthetic pool versus a pure-noise control.

    python scripts/augmentation_trend.py --out runs/trend --seeds 5
"""

import argparse
import json
from pathlib import Path

import numpy as np
import torch

from agridiff import synthdata as sd
from agridiff.downstream import ExperimentConfig, NoiseGenerator, RenderGenerator, run_ratio_experiment
from agridiff.stats import paired_t_test


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/trend")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--n-real", type=int, default=1000)
    ap.add_argument("--real-per-class", type=int, default=20)
    ap.add_argument("--ratios", type=float, nargs="+", default=[0, 400])
    ap.add_argument("--epochs", type=int, default=15)
    args = ap.parse_args()
    torch.set_num_threads(1)

    out = Path(args.out)
    real = sd.generate_dataset(out / "real", "outdoor", args.n_real, seed=0, label_by="species")
    summary = {}
    for name, gen in (("render", RenderGenerator()), ("noise", NoiseGenerator())):
        acc = []
        for seed in range(args.seeds):
            cfg = ExperimentConfig(ratios=args.ratios, epochs=args.epochs, seed=seed,
                                   real_per_class=args.real_per_class)
            rep = run_ratio_experiment(cfg, real, gen, out / f"{name}_{seed}")
            acc.append([c["accuracy"] for c in rep["cells"]])
            print(name, seed, " ".join(f"{a:.3f}" for a in acc[-1]), flush=True)
        acc = np.array(acc)
        _, p = paired_t_test(acc[:, -1], acc[:, 0], alternative="greater")
        summary[name] = {"ratios": args.ratios, "mean_accuracy": acc.mean(0).tolist(), "p_last_gt_first": p}
        print(name, "mean", " ".join(f"{a:.3f}" for a in acc.mean(0)), f"p={p:.4g}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
