"""Expert-preference alignment: reward model, softmax weights and reward-weighted fine-tuning."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import DiffusionTrainer, LatentDiffusion, denoising_loss, sample_latents
from .nets import RewardModel, make_train_state, train_step
from .stats import DegenerateDataError, paired_t_test, pearson

log = logging.getLogger(__name__)

SCORE_MIN, SCORE_MAX = 0.0, 10.0


@dataclass
class AnnotationRecord:
    image_id: str
    latent: torch.Tensor
    score: float

    def __post_init__(self):
        if not SCORE_MIN <= float(self.score) <= SCORE_MAX:
            raise ValueError(f"score {self.score} outside [0, 10]")
        if self.latent.ndim != 3 or self.latent.shape[0] != 4:
            raise ValueError(f"latent must be [4, h, w], got {tuple(self.latent.shape)}")


# ------------------------------------------------------------------ annotations


def read_annotations(path) -> dict[str, float]:
    """``image_id -> score``; duplicate ids resolve last-write-wins with a warning."""
    scores: dict[str, float] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            iid, s = row["image_id"], float(row["score"])
            if not SCORE_MIN <= s <= SCORE_MAX:
                raise ValueError(f"{path}: score {s} for {iid} outside [0, 10]")
            if iid in scores:
                log.warning("duplicate annotation for %s; keeping the later score", iid)
            scores[iid] = s
    return scores


def append_annotation(path, image_id: str, score: float) -> None:
    if not SCORE_MIN <= score <= SCORE_MAX:
        raise ValueError(f"score {score} outside [0, 10]")
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(["image_id", "score"])
        w.writerow([image_id, f"{score:g}"])


def heuristic_score(img: np.ndarray) -> float:
    """Automatic stand-in for a human rater: rewards a single, centred, well-sized plant.

    Used only by the unattended pipeline; interactive scoring goes through the CLI.
    """
    from .synthdata import plant_mask

    mask = plant_mask(np.asarray(img))
    cover = float(mask.mean())
    if cover == 0.0:
        return 0.0
    ys, xs = np.nonzero(mask)
    H, W = mask.shape
    off = np.hypot(xs.mean() / W - 0.5, ys.mean() / H - 0.5)
    size_term = np.exp(-((cover - 0.12) / 0.08) ** 2)
    return float(np.clip(10.0 * size_term * (1.0 - 1.6 * off), 0.0, 10.0))


# ----------------------------------------------------------------- reward model


def reward_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(pred, target)


@torch.no_grad()
def predict_rewards(model: RewardModel, latents: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    return torch.cat([model(latents[i:i + batch_size]) for i in range(0, len(latents), batch_size)])


def train_reward(records, split: float = 0.8, seed: int = 0, epochs: int = 30, batch_size: int = 32,
                 lr: float = 1e-3, weight_decay: float = 1e-4, widths=(32, 64, 128, 256), hidden: int = 128,
                 log_fn=None):
    """Fit the reward CNN by MSE; returns ``(model, test_pearson, info)``."""
    records = list(records)
    if len(records) < 50:
        raise ValueError(f"need at least 50 annotation records, got {len(records)}")
    scores = np.array([float(r.score) for r in records])
    if np.all(scores == scores[0]):
        raise DegenerateDataError("all annotation scores identical; correlation undefined")
    order = np.random.default_rng(seed).permutation(len(records))
    n_train = int(round(split * len(records)))
    tr, te = order[:n_train], order[n_train:]
    Z = torch.stack([r.latent.float() for r in records])
    y = torch.tensor(scores, dtype=torch.float32)
    torch.manual_seed(seed)
    model = RewardModel(in_ch=Z.shape[1], widths=widths, hidden=hidden)
    state = make_train_state(model, lr=lr, weight_decay=weight_decay, ema_decay=None, clip=10.0)
    g = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        model.train()
        perm = torch.as_tensor(tr)[torch.randperm(len(tr), generator=g)]
        losses = []
        for i in range(0, len(perm), batch_size):
            idx = perm[i:i + batch_size]
            if len(idx) < 2:
                continue
            losses.append(train_step(state, reward_loss(model(Z[idx]), y[idx])))
        if log_fn:
            log_fn({"stage": "reward", "epoch": epoch, "loss": float(np.mean(losses))})
    pred = predict_rewards(model, Z[te]).numpy()
    r = pearson(pred, scores[te])
    info = {"n_train": len(tr), "n_test": len(te), "test_mse": float(np.mean((pred - scores[te]) ** 2)),
            "test_pred": pred.tolist(), "test_true": scores[te].tolist()}
    return model, r, info


# ------------------------------------------------------------ preference weights


def preference_weights(rewards, tau: float = 1.0) -> np.ndarray:
    """Softmax of ``rewards / tau`` with max-subtraction."""
    r = np.asarray(rewards, dtype=np.float64)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if r.ndim != 1 or len(r) == 0:
        raise ValueError("rewards must be a non-empty 1-D array")
    x = (r - r.max()) / tau
    e = np.exp(x)
    return e / e.sum()


def select_top_k(rewards, seeds, k: int) -> list[int]:
    """Indices of the k highest rewards; ties go to the lower seed."""
    if not 1 <= k <= len(rewards):
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={len(rewards)}")
    order = sorted(range(len(rewards)), key=lambda i: (-float(rewards[i]), int(seeds[i])))
    return order[:k]


def weighted_sft_loss(denoiser, z0, t, eps, cond, mask, weights, schedule) -> torch.Tensor:
    """Sum over selected candidates of weight times per-candidate denoising error."""
    per = denoising_loss(denoiser, z0, t, eps, cond, mask, schedule)
    return (torch.as_tensor(weights, dtype=per.dtype) * per).sum()


def preference_finetune_step(trainer: DiffusionTrainer, prompt: str, reward_model: RewardModel,
                             N: int = 12, k: int = 8, tau: float = 1.0, step_seed: int = 0,
                             image_size: int = 64) -> dict:
    """Generate N candidates, keep the top k by predicted reward, take one weighted denoising step."""
    if N < k:
        raise ValueError(f"N ({N}) must be >= k ({k})")
    if reward_model is None:
        raise ValueError("reward model required")
    model = trainer.model
    seeds = [step_seed * N + i for i in range(N)]
    model.denoiser.eval()
    cands = sample_latents(model, [prompt], seeds, image_size, denoiser=model.denoiser)
    rewards = predict_rewards(reward_model, cands).numpy().astype(np.float64)
    sel = select_top_k(rewards, seeds, k)
    w = preference_weights(rewards[sel], tau)
    z0 = cands[sel]
    t, eps = trainer.sample_noise(z0)
    with torch.no_grad():
        cond, mask = model.embedder([prompt] * k)
    model.denoiser.train()
    loss = weighted_sft_loss(model.denoiser, z0, t, eps, cond, mask, w, model.schedule)
    val = train_step(trainer.state, loss)
    model.denoiser.eval()
    return {"loss": val, "mean_reward": float(rewards.mean()), "selected_reward": float(rewards[sel].mean()),
            "weights": w.tolist()}


@torch.no_grad()
def sample_rewards(model: LatentDiffusion, reward_model: RewardModel, prompts, seeds,
                   image_size: int = 64) -> np.ndarray:
    z = sample_latents(model, prompts, seeds, image_size)
    return predict_rewards(reward_model, z).numpy().astype(np.float64)


def validate_mean_reward(model: LatentDiffusion, reward_model: RewardModel, prompts, seeds,
                         image_size: int = 64) -> float:
    return float(sample_rewards(model, reward_model, prompts, seeds, image_size).mean())


def preference_tune(model: LatentDiffusion, reward_model: RewardModel, train_prompts, val_prompts,
                    epochs: int = 20, prompts_per_epoch: int = 25, N: int = 12, k: int = 8, tau: float = 1.0,
                    lr: float = 1e-5, ema_decay: float = 0.999, clip: float = 0.5, seed: int = 0,
                    val_seed: int = 1_000_000, best_path=None, image_size: int = 64, log_fn=None) -> dict:
    """Reward-weighted fine-tuning with per-epoch validation; keeps the best-validation checkpoint."""
    from .nets import param_checksum

    for p in reward_model.parameters():
        p.requires_grad_(False)
    reward_model.eval()
    reward_sum = param_checksum(reward_model)
    model.adopt_ema()
    trainer = DiffusionTrainer(model, lr=lr, ema_decay=ema_decay, clip=clip, seed=seed)
    val_seeds = [val_seed + i for i in range(len(val_prompts))]
    base = validate_mean_reward(model, reward_model, val_prompts, val_seeds, image_size)
    history = [{"epoch": 0, "val_mean_reward": base}]
    best = (base, 0)
    if best_path is not None:
        model.save(best_path, trainer.state, stage="preference", epoch=0, val_mean_reward=base)
    rng = np.random.default_rng(seed)
    step = 0
    t0 = time.time()
    for epoch in range(1, epochs + 1):
        stats = []
        for _ in range(prompts_per_epoch):
            prompt = train_prompts[int(rng.integers(len(train_prompts)))]
            stats.append(preference_finetune_step(trainer, prompt, reward_model, N, k, tau,
                                                  step_seed=seed * 100_003 + step, image_size=image_size))
            step += 1
        v = validate_mean_reward(model, reward_model, val_prompts, val_seeds, image_size)
        rec = {"epoch": epoch, "val_mean_reward": v, "train_loss": float(np.mean([s["loss"] for s in stats])),
               "candidate_reward": float(np.mean([s["mean_reward"] for s in stats])), "steps": step}
        history.append(rec)
        if log_fn:
            log_fn({"stage": "preference", **rec, "wall_time": time.time() - t0})
        if v > best[0]:
            best = (v, epoch)
            if best_path is not None:
                model.save(best_path, trainer.state, stage="preference", epoch=epoch, val_mean_reward=v)
    if param_checksum(reward_model) != reward_sum:
        raise RuntimeError("reward model changed during preference tuning")
    return {"history": history, "best_epoch": best[1], "best_val_mean_reward": best[0],
            "base_val_mean_reward": base, "steps": step}


def compare_models(base: LatentDiffusion, tuned: LatentDiffusion, reward_model: RewardModel, prompts,
                   seed: int = 2_000_000, image_size: int = 64) -> dict:
    """Mean rewards of two checkpoints on identical (prompt, seed) pairs plus a paired t-test."""
    seeds = [seed + i for i in range(len(prompts))]
    rb = sample_rewards(base, reward_model, prompts, seeds, image_size)
    rt = sample_rewards(tuned, reward_model, prompts, seeds, image_size)
    t, p = paired_t_test(rt, rb)
    _, p_greater = paired_t_test(rt, rb, alternative="greater")
    return {"n": len(prompts), "base_mean_reward": float(rb.mean()), "tuned_mean_reward": float(rt.mean()),
            "t": t, "p_two_sided": p, "p_greater": p_greater}
