"""Preference tuning toward bright and toward dark latents, both scored by the bright reward.

A working tuner must move the bright score up in the first run and down in the
second; a shift in the same direction would point at a side effect of
fine-tuning rather than at the reward signal.

    python scripts/preference_control.py runs/base.ckpt
"""

import argparse

import numpy as np
import torch

from agridiff import synthdata as sd
from agridiff.diffusion import LatentDiffusion, sample_latents
from agridiff.preference import AnnotationRecord, compare_models, preference_tune, train_reward


def prompts(n, seed):
    rng = np.random.default_rng(seed)
    return [sd.caption_for(sd.random_scene("indoor" if i % 2 == 0 else "outdoor", rng)) for i in range(n)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args()
    torch.set_num_threads(1)

    base = LatentDiffusion.load(args.checkpoint)
    Z = sample_latents(base, prompts(500, 11), [500_000 + i for i in range(500)])
    m = Z.double().mean((1, 2, 3))
    score = 5.0 + 5.0 * (m - m.mean()) / (m - m.mean()).abs().max()
    rewards = {}
    for name, s in (("bright", score), ("dark", 10.0 - score)):
        recs = [AnnotationRecord(str(i), Z[i], float(s[i])) for i in range(len(Z))]
        rewards[name], r, _ = train_reward(recs, seed=0, epochs=40)
        rewards[name].eval()
        print(f"{name} reward: held-out pearson {r:.4f}")

    p = prompts(250, 0)
    for name, reward in rewards.items():
        tuned = LatentDiffusion.load(args.checkpoint)
        preference_tune(tuned, reward, p[50:], p[:50], epochs=1, prompts_per_epoch=args.steps)
        res = compare_models(base, tuned, rewards["bright"], p[:50])
        print(f"tuned toward {name}: bright score {res['base_mean_reward']:.4f} -> {res['tuned_mean_reward']:.4f} "
              f"(t={res['t']:.2f}, p={res['p_two_sided']:.3g})")


if __name__ == "__main__":
    main()
