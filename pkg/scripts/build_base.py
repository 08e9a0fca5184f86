"""Train the desk-scale base checkpoint used by the acceptance suite and the probe scripts.

    python scripts/build_base.py runs/base.ckpt
"""

import argparse
import time

import torch

from agridiff import synthdata as sd
from agridiff.diffusion import build_model, train_diffusion, train_vae
from agridiff.schedule import default_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--n-single", type=int, default=512)
    ap.add_argument("--n-rows", type=int, default=256)
    ap.add_argument("--vae-steps", type=int, default=800)
    ap.add_argument("--vae-lr", type=float, default=4e-3)
    ap.add_argument("--diffusion-steps", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    t0 = time.time()
    images, captions = sd.training_corpus(args.n_single, args.n_rows, seed=args.seed)
    images = torch.from_numpy(images)
    model = build_model(captions, default_schedule(50), seed=args.seed, extra_vocab=sd.CAPTION_VOCAB)
    hist = train_vae(model.vae, images, steps=args.vae_steps, batch_size=32, lr=args.vae_lr, seed=args.seed)
    print(f"vae: recon={hist[-1]['recon']:.5f} ({time.time() - t0:.0f}s)")
    model.freeze_frozen()
    trainer = train_diffusion(model, images, captions, steps=args.diffusion_steps, batch_size=32, lr=1e-3,
                              seed=args.seed)
    model.save(args.out, trainer.state, stage="base")
    print(f"saved {args.out} ({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
