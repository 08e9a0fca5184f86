"""Latent diffusion: training, ancestral sampling, DreamBooth fine-tuning and img2img translation."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import __version__
from .checkpoint import (load_checkpoint, load_module, load_optimizer, module_tensors, optimizer_tensors,
                         save_checkpoint)
from .nets import (EMA, VAE, Denoiser, DivergenceError, TextEmbedder, TrainState, make_train_state,
                   train_step, vae_elbo_loss)
from .schedule import NoiseSchedule, forward_sample, reverse_step

log = logging.getLogger(__name__)

PROVENANCE_TAGS = ("subject", "prior", "generic")


def to_tensor(images) -> torch.Tensor:
    if torch.is_tensor(images):
        return images.float()
    return torch.as_tensor(np.stack([np.asarray(i) for i in images]), dtype=torch.float32)


@dataclass
class TrainingBatch:
    images: torch.Tensor | None
    captions: list
    provenance: str = "generic"
    latents: torch.Tensor | None = None  # cached frozen-VAE means

    def __post_init__(self):
        if self.provenance not in PROVENANCE_TAGS:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        n = len(self.latents) if self.latents is not None else len(self.images)
        if n != len(self.captions):
            raise ValueError("images and captions must align 1:1")
        if self.provenance == "subject":
            from .nets import tokenize
            for c in self.captions:
                if "sks" not in tokenize(c):
                    raise ValueError(f"subject caption lacks the sks identifier: {c!r}")


@dataclass
class GenerationRequest:
    prompt: str
    seed: int
    num_inference_steps: int | None = None


# ------------------------------------------------------------------ model bundle


@dataclass
class LatentDiffusion:
    vae: VAE
    embedder: TextEmbedder
    denoiser: Denoiser
    schedule: NoiseSchedule
    ema: EMA | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.freeze_frozen()

    def freeze_frozen(self):
        for p in self.vae.parameters():
            p.requires_grad_(False)
        self.vae.eval()
        self.embedder.sks_row.requires_grad_(False)

    def sampling_denoiser(self) -> Denoiser:
        """Denoiser carrying the EMA shadow weights (live weights if no EMA)."""
        net = copy.deepcopy(self.denoiser)
        if self.ema is not None:
            self.ema.copy_to(net)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        return net

    def adopt_ema(self) -> None:
        """Load the EMA shadow into the live denoiser so fine-tuning starts from the sampled weights."""
        if self.ema is not None:
            self.ema.copy_to(self.denoiser)

    def encode(self, images) -> torch.Tensor:
        with torch.no_grad():
            return self.vae.encode_mu(to_tensor(images))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.vae.decode(z)

    def latent_shape(self, image_size: int) -> tuple[int, int, int]:
        s = image_size // self.vae.factor
        return (4, s, s)

    def save(self, path, state: TrainState | None = None, **meta) -> None:
        tensors = {}
        tensors.update(module_tensors("vae", self.vae))
        tensors.update(module_tensors("embedder", self.embedder))
        tensors.update(module_tensors("denoiser", self.denoiser))
        if self.ema is not None:
            tensors.update({f"ema.denoiser.{k}": v for k, v in self.ema.shadow.items()})
        opt_steps = {}
        if state is not None:
            moments, opt_steps = optimizer_tensors("optim.denoiser", self.denoiser, state.optimizer)
            tensors.update(moments)
        metadata = {
            **self.metadata, **meta,
            "kind": "latent_diffusion",
            "tool_version": __version__,
            "vae": self.vae.config,
            "embedder": {**self.embedder.config, "vocab": self.embedder.vocab},
            "denoiser": self.denoiser.config,
            "ema": None if self.ema is None else {"decay": self.ema.decay, "num_updates": self.ema.num_updates},
            "optimizer_steps": opt_steps,
            "train_step": 0 if state is None else state.step,
        }
        save_checkpoint(path, tensors, metadata, self.schedule.descriptor())

    @classmethod
    def load(cls, path) -> "LatentDiffusion":
        tensors, meta, sched = load_checkpoint(path)
        if meta.get("kind") != "latent_diffusion":
            raise ValueError(f"{path}: not a latent diffusion checkpoint")
        vae = VAE(**meta["vae"])
        emb_cfg = dict(meta["embedder"])
        vocab = emb_cfg.pop("vocab")
        embedder = TextEmbedder(vocab, **emb_cfg)
        denoiser = Denoiser(**meta["denoiser"])
        load_module("vae", vae, tensors)
        load_module("embedder", embedder, tensors)
        load_module("denoiser", denoiser, tensors)
        ema = None
        if meta.get("ema"):
            ema = EMA(denoiser, meta["ema"]["decay"])
            ema.num_updates = meta["ema"]["num_updates"]
            for k in ema.shadow:
                ema.shadow[k] = tensors[f"ema.denoiser.{k}"].clone()
        model = cls(vae, embedder, denoiser, NoiseSchedule.from_descriptor(sched), ema,
                    {k: meta[k] for k in ("config_hash", "stage") if k in meta})
        model._optim = (tensors, meta.get("optimizer_steps", {}))
        return model

    def restore_optimizer(self, state: TrainState) -> None:
        saved = getattr(self, "_optim", None)
        if saved:
            load_optimizer("optim.denoiser", self.denoiser, state.optimizer, *saved)


def build_model(captions, schedule: NoiseSchedule, vae_cfg=None, text_cfg=None, unet_cfg=None,
                seed: int = 0, extra_vocab=()) -> LatentDiffusion:
    torch.manual_seed(seed)
    vae = VAE(**(vae_cfg or {}))
    embedder = TextEmbedder.from_corpus(captions, extra=extra_vocab, seed=seed, **(text_cfg or {}))
    unet = dict(unet_cfg or {})
    unet.setdefault("text_dim", embedder.dim)
    denoiser = Denoiser(**unet)
    return LatentDiffusion(vae, embedder, denoiser, schedule)


# ----------------------------------------------------------------------- losses


def denoising_loss(denoiser: Denoiser, z0, t, eps, cond, mask, schedule: NoiseSchedule) -> torch.Tensor:
    """Per-item mean squared error between injected and predicted noise."""
    z_t = forward_sample(z0, t, eps, schedule)
    pred = denoiser(z_t, t, cond, mask)
    return (pred - eps).pow(2).flatten(1).mean(1)


class DiffusionTrainer:
    """Live training state for the denoiser: optimizer, EMA and a seeded RNG."""

    def __init__(self, model: LatentDiffusion, lr=1e-4, weight_decay=1e-2, ema_decay=0.999, clip=0.5,
                 seed=0, train_sks=False, ema_warmup=False):
        self.model = model
        params = list(model.denoiser.parameters())
        if train_sks:
            model.embedder.sks_row.requires_grad_(True)
            params.append(model.embedder.sks_row)
        self.state = make_train_state(model.denoiser, lr=lr, weight_decay=weight_decay, ema_decay=None,
                                      clip=clip, params=params)
        if ema_decay is not None:
            if model.ema is None or ema_warmup:
                model.ema = EMA(model.denoiser, ema_decay, warmup=ema_warmup)
            else:
                model.ema.decay = ema_decay
            self.state.ema = model.ema
        self.generator = torch.Generator().manual_seed(seed)

    def sample_noise(self, z0: torch.Tensor):
        T = self.model.schedule.T
        t = torch.randint(1, T + 1, (z0.shape[0],), generator=self.generator)
        eps = torch.randn(z0.shape, generator=self.generator)
        return t, eps

    def batch_latents(self, batch: TrainingBatch) -> torch.Tensor:
        if batch.latents is not None:
            return batch.latents
        return self.model.encode(batch.images)

    def batch_loss(self, batch: TrainingBatch, with_text_grad: bool = False) -> torch.Tensor:
        z0 = self.batch_latents(batch)
        t, eps = self.sample_noise(z0)
        if with_text_grad:
            cond, mask = self.model.embedder(batch.captions)
        else:
            with torch.no_grad():
                cond, mask = self.model.embedder(batch.captions)
        return denoising_loss(self.model.denoiser, z0, t, eps, cond, mask, self.model.schedule).mean()


def ddpm_training_step(trainer: DiffusionTrainer, batch: TrainingBatch) -> float:
    trainer.model.denoiser.train()
    loss = trainer.batch_loss(batch)
    try:
        return train_step(trainer.state, loss)
    except DivergenceError as e:
        raise DivergenceError(f"diffusion training diverged at step {trainer.state.step}: {e}") from e


def dreambooth_loss(trainer: DiffusionTrainer, subject_batch: TrainingBatch, prior_batch: TrainingBatch | None,
                    lam: float = 1.0) -> torch.Tensor:
    """Subject denoising loss plus ``lam`` times the prior-preservation loss."""
    if subject_batch.provenance != "subject":
        raise ValueError("subject batch must carry provenance 'subject'")
    if lam > 0 and (prior_batch is None or len(prior_batch.captions) == 0):
        raise ValueError("prior batch required when lambda > 0")
    loss = trainer.batch_loss(subject_batch, with_text_grad=True)
    if lam > 0:
        loss = loss + lam * trainer.batch_loss(prior_batch, with_text_grad=True)
    return loss


# --------------------------------------------------------------------- training


def train_vae(vae: VAE, images: torch.Tensor, steps: int = 500, batch_size: int = 32, lr: float = 2e-3,
              kl_weight: float = 1e-3, seed: int = 0, log_fn=None) -> list[dict]:
    """Fit the VAE on images, then set ``latent_scale`` to whiten the posterior means."""
    g = torch.Generator().manual_seed(seed)
    for p in vae.parameters():
        p.requires_grad_(True)
    vae.train()
    state = make_train_state(vae, lr=lr, weight_decay=0.0, ema_decay=None, clip=1.0)
    lat = vae.factor
    history = []
    for step in range(steps):
        idx = torch.randint(0, len(images), (batch_size,), generator=g)
        x = images[idx]
        z_noise = torch.randn(x.shape[0], 4, x.shape[2] // lat, x.shape[3] // lat, generator=g)
        out = vae_elbo_loss(vae, x, z_noise, kl_weight)
        loss = train_step(state, out["loss"])
        rec = {"stage": "vae", "step": step, "loss": loss, "recon": float(out["recon"].detach()),
               "kl": float(out["kl"].detach())}
        history.append(rec)
        if log_fn:
            log_fn(rec)
    vae.eval()
    with torch.no_grad():
        mus = torch.cat([vae.encode(images[i:i + 256])[0] for i in range(0, len(images), 256)])
        vae.latent_scale.fill_(1.0 / float(mus.std().clamp_min(1e-6)))
    for p in vae.parameters():
        p.requires_grad_(False)
    return history


def train_diffusion(model: LatentDiffusion, images, captions, steps: int = 1000, batch_size: int = 32,
                    lr: float = 1e-3, seed: int = 0, ema_decay: float = 0.999, ema_warmup: bool = True,
                    clip: float = 0.5, log_fn=None) -> DiffusionTrainer:
    """Denoiser-only training with the VAE and text embedder frozen."""
    trainer = DiffusionTrainer(model, lr=lr, ema_decay=ema_decay, clip=clip, seed=seed, ema_warmup=ema_warmup)
    latents = model.encode(images)
    g = torch.Generator().manual_seed(seed + 1)
    t0 = time.time()
    for step in range(steps):
        idx = torch.randint(0, len(latents), (batch_size,), generator=g)
        batch = TrainingBatch(None, [captions[i] for i in idx.tolist()], latents=latents[idx])
        loss = ddpm_training_step(trainer, batch)
        if log_fn:
            log_fn({"stage": "diffusion", "step": step, "loss": loss, "wall_time": time.time() - t0})
    model.denoiser.eval()
    return trainer


# --------------------------------------------------------------------- sampling


def _run_reverse(model: LatentDiffusion, z: torch.Tensor, t_start: int, prompts, generators,
                 denoiser: Denoiser | None = None) -> torch.Tensor:
    net = denoiser or model.sampling_denoiser()
    with torch.no_grad():
        cond, mask = model.embedder(list(prompts))
        for t in range(t_start, 0, -1):
            eps_hat = net(z, t, cond, mask)
            if t > 1:
                noise = torch.stack([torch.randn(z.shape[1:], generator=g) for g in generators])
            else:
                noise = torch.zeros_like(z)
            z = reverse_step(z, t, eps_hat, model.schedule, noise)
    return z


def sample_latents(model: LatentDiffusion, prompts, seeds, image_size: int = 64,
                   num_inference_steps: int | None = None, denoiser: Denoiser | None = None) -> torch.Tensor:
    """Full ancestral chain from z_T ~ N(0, I); one independent generator per seed."""
    T = model.schedule.T
    if num_inference_steps is not None and num_inference_steps != T:
        raise ValueError(f"num_inference_steps must equal T={T}; accelerated sampling is not supported")
    prompts = list(prompts)
    if len(prompts) == 1 and len(seeds) > 1:
        prompts = prompts * len(seeds)
    if len(prompts) != len(seeds):
        raise ValueError("one seed per prompt required")
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    shape = model.latent_shape(image_size)
    z = torch.stack([torch.randn(shape, generator=g) for g in gens])
    return _run_reverse(model, z, T, prompts, gens, denoiser)


def sample(model: LatentDiffusion, req: GenerationRequest | list, image_size: int = 64,
           denoiser: Denoiser | None = None, batch_size: int = 64) -> torch.Tensor:
    """Generate images in [0, 1]; ``req`` is one request or a list of them."""
    reqs = [req] if isinstance(req, GenerationRequest) else list(req)
    outs = []
    for i in range(0, len(reqs), batch_size):
        chunk = reqs[i:i + batch_size]
        for r in chunk:
            if r.num_inference_steps is not None and r.num_inference_steps != model.schedule.T:
                raise ValueError(f"num_inference_steps must equal T={model.schedule.T}")
        z = sample_latents(model, [r.prompt for r in chunk], [r.seed for r in chunk], image_size,
                           denoiser=denoiser)
        outs.append(model.decode(z).clamp(0.0, 1.0))
    out = torch.cat(outs)
    return out[0] if isinstance(req, GenerationRequest) else out


# ------------------------------------------------------------------- DreamBooth


def dreambooth_finetune(model: LatentDiffusion, subject_images, subject_caption: str, class_prompt: str,
                        steps: int = 400, lr: float = 5e-4, lam: float = 1.0, num_prior: int = 200,
                        seed: int = 0, image_size: int = 64, ema_decay: float | None = None,
                        clip: float = 0.5, log_fn=None) -> DiffusionTrainer:
    """Bind ``sks`` to the subject while preserving the class prior.

    Prior images come from the frozen pre-fine-tune model prompted with the
    bare class prompt. Only the denoiser and the ``sks`` embedding row train.
    """
    if "sks" not in subject_caption.lower().split():
        raise ValueError("subject caption must contain the sks identifier")
    prior_seeds = [10_000_000 + seed * 1000 + i for i in range(num_prior)]
    prior_latents = sample_latents(model, [class_prompt], prior_seeds, image_size)
    model.adopt_ema()
    if ema_decay is None:
        model.ema = None
    trainer = DiffusionTrainer(model, lr=lr, ema_decay=ema_decay, clip=clip, seed=seed, train_sks=True)
    subj = model.encode(subject_images)
    g = torch.Generator().manual_seed(seed + 7)
    n = len(subj)
    t0 = time.time()
    for step in range(steps):
        model.denoiser.train()
        pidx = torch.randint(0, num_prior, (n,), generator=g)
        sb = TrainingBatch(None, [subject_caption] * n, "subject", latents=subj)
        pb = TrainingBatch(None, [class_prompt] * n, "prior", latents=prior_latents[pidx])
        loss = dreambooth_loss(trainer, sb, pb, lam)
        val = train_step(trainer.state, loss)
        if log_fn:
            log_fn({"stage": "dreambooth", "step": step, "loss": val, "wall_time": time.time() - t0})
    model.embedder.sks_row.requires_grad_(False)
    model.denoiser.eval()
    return trainer


# ---------------------------------------------------------------------- img2img


def img2img_latents(model: LatentDiffusion, x_init, prompt: str, strength: float, seed: int,
                    denoiser: Denoiser | None = None) -> torch.Tensor:
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must lie in [0, 1], got {strength}")
    x = to_tensor(x_init)
    single = x.ndim == 3
    if single:
        x = x[None]
    z0 = model.encode(x)
    T = model.schedule.T
    t_star = int(round(strength * T))
    if t_star == 0:
        return z0[0] if single else z0
    seeds = [seed] if single else [seed + i for i in range(len(z0))]
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    eps = torch.stack([torch.randn(z0.shape[1:], generator=g) for g in gens])
    z = forward_sample(z0, t_star, eps, model.schedule)
    z = _run_reverse(model, z, t_star, [prompt] * len(z0), gens, denoiser)
    return z[0] if single else z


def img2img(model: LatentDiffusion, x_init, prompt: str, strength: float, seed: int,
            denoiser: Denoiser | None = None) -> torch.Tensor:
    """Partially noise the encoded input to t* = round(strength * T), then denoise with the prompt."""
    z = img2img_latents(model, x_init, prompt, strength, seed, denoiser)
    out = model.decode(z[None] if z.ndim == 3 else z)
    if z.ndim == 3:
        out = out[0]
    return out if strength == 0 else out.clamp(0.0, 1.0)

