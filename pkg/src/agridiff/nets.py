"""Networks (VAE, text embedder, denoiser, classifier, reward CNN) and training utilities."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

LATENT_CHANNELS = 4

PAD, UNK, SKS = "<pad>", "<unk>", "sks"
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


# --------------------------------------------------------------------------- VAE


class VAE(nn.Module):
    """Convolutional VAE with a 4-channel latent and downsample factor ``2**levels``.

    ``latent_scale`` is fitted after training so that encoded means have roughly
    unit variance; ``encode_mu``/``decode`` work in the scaled latent space.
    """

    def __init__(self, in_ch: int = 3, base: int = 16, levels: int = 3):
        super().__init__()
        self.config = {"in_ch": in_ch, "base": base, "levels": levels}
        self.factor = 2 ** levels
        enc = [nn.Conv2d(in_ch, base, 3, padding=1), nn.SiLU()]
        ch = base
        for i in range(levels):
            out = base * min(2 ** (i + 1), 4)
            enc += [nn.Conv2d(ch, out, 4, stride=2, padding=1), nn.SiLU()]
            ch = out
        enc += [nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU(), nn.Conv2d(ch, 2 * LATENT_CHANNELS, 1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(LATENT_CHANNELS, ch, 3, padding=1), nn.SiLU()]
        for i in reversed(range(levels)):
            out = base * min(2 ** i, 4)
            dec += [nn.ConvTranspose2d(ch, out, 4, stride=2, padding=1), nn.SiLU()]
            ch = out
        dec.append(nn.Conv2d(ch, in_ch, 3, padding=1))
        self.decoder = nn.Sequential(*dec)
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.encoder(x)
        mu, logvar = h.chunk(2, dim=1)
        return mu, logvar.clamp(-20.0, 10.0)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def encode_mu(self, x: torch.Tensor) -> torch.Tensor:
        """Posterior mean in scaled latent space."""
        return self.encode(x)[0] * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z / self.latent_scale)


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample KL(N(mu, exp(logvar)) || N(0, I)), summed over latent elements."""
    return 0.5 * (logvar.exp() + mu.pow(2) - 1.0 - logvar).flatten(1).sum(1)


def vae_elbo_loss(vae: VAE, x: torch.Tensor, z_noise: torch.Tensor, kl_weight: float = 1e-3) -> dict:
    """Negative ELBO with a unit-variance Gaussian likelihood (MSE reconstruction).

    Returns ``loss``, ``recon`` and ``kl``. ``kl`` is the batch mean of
    per-sample sums; the minimized term uses it divided by the latent size so
    both terms are per-element averages.
    """
    mu, logvar = vae.encode(x)
    if z_noise.shape != mu.shape:
        raise ValueError(f"z_noise shape {tuple(z_noise.shape)} != latent shape {tuple(mu.shape)}")
    z = mu + (0.5 * logvar).exp() * z_noise
    x_hat = vae.decode_raw(z)
    recon = F.mse_loss(x_hat, x)
    kl = kl_divergence(mu, logvar).mean()
    loss = recon + kl_weight * kl / mu[0].numel()
    if not torch.isfinite(loss):
        raise DivergenceError("non-finite VAE loss")
    return {"loss": loss, "recon": recon, "kl": kl}


# ------------------------------------------------------------------ text embedder


def tokenize(caption: str) -> list[str]:
    return _TOKEN_RE.findall(caption.lower())


class TextEmbedder(nn.Module):
    """Lookup-table prompt encoder standing in for a pretrained text encoder.

    The table is a frozen buffer; the ``sks`` identifier row lives in its own
    parameter so it can be fine-tuned without touching the rest of the table.
    """

    def __init__(self, vocab: list[str], dim: int = 64, max_len: int = 16, seed: int = 0):
        super().__init__()
        if vocab[:3] != [PAD, UNK, SKS]:
            raise ValueError("vocabulary must start with <pad>, <unk>, sks")
        if len(set(vocab)) != len(vocab):
            raise ValueError("duplicate tokens in vocabulary")
        self.vocab = list(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.dim, self.max_len = dim, max_len
        self.config = {"dim": dim, "max_len": max_len, "seed": seed}
        g = torch.Generator().manual_seed(seed)
        table = torch.randn(len(vocab), dim, generator=g)
        table[0] = 0.0
        self.register_buffer("table", table)
        self.sks_row = nn.Parameter(table[2].clone())

    @classmethod
    def from_corpus(cls, captions, extra=(), **kw) -> "TextEmbedder":
        words = set(extra)
        for c in captions:
            words.update(tokenize(c))
        words -= {PAD, UNK, SKS}
        return cls([PAD, UNK, SKS] + sorted(words), **kw)

    @property
    def sks_id(self) -> int:
        return 2

    def encode_ids(self, caption: str) -> list[int]:
        toks = tokenize(caption)
        if not toks:
            raise ValueError("empty caption")
        return [self.index.get(t, 1) for t in toks[: self.max_len]]

    def forward(self, captions: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Embed a batch of captions -> ``(emb [B, L, d], mask [B, L])``."""
        ids = torch.zeros(len(captions), self.max_len, dtype=torch.long)
        for i, c in enumerate(captions):
            row = self.encode_ids(c)
            ids[i, : len(row)] = torch.tensor(row)
        emb = self.table[ids]
        is_sks = (ids == self.sks_id).unsqueeze(-1)
        emb = torch.where(is_sks, self.sks_row.to(emb.dtype).expand_as(emb), emb)
        return emb, ids != 0


def embed_prompt(embedder: TextEmbedder, caption: str) -> tuple[torch.Tensor, torch.Tensor]:
    emb, mask = embedder([caption])
    return emb[0], mask[0]


# ----------------------------------------------------------------------- denoiser


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head attention from spatial positions to prompt tokens.

    A learned null token is always attendable, so an empty/all-padding prompt
    is well defined.
    """

    def __init__(self, ch: int, text_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.q = nn.Linear(ch, ch, bias=False)
        self.k = nn.Linear(text_dim, ch, bias=False)
        self.v = nn.Linear(text_dim, ch, bias=False)
        self.out = nn.Linear(ch, ch)
        self.null = nn.Parameter(torch.zeros(1, 1, text_dim))

    def forward(self, x, ctx, mask):
        b, c, h, w = x.shape
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))
        ctx = torch.cat([self.null.expand(b, 1, -1).to(ctx.dtype), ctx], dim=1)
        mask = torch.cat([torch.ones(b, 1, dtype=torch.bool), mask], dim=1)
        k, v = self.k(ctx), self.v(ctx)
        att = q @ k.transpose(1, 2) / math.sqrt(c)
        att = att.masked_fill(~mask[:, None, :], float("-inf")).softmax(-1)
        out = self.out(att @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class Denoiser(nn.Module):
    """Two-level U-Net predicting the injected noise, with prompt cross-attention at the bottleneck."""

    def __init__(self, ch: int = 32, ch_mult: int = 2, tdim: int = 64, text_dim: int = 64,
                 in_ch: int = LATENT_CHANNELS):
        super().__init__()
        self.config = {"ch": ch, "ch_mult": ch_mult, "tdim": tdim, "text_dim": text_dim, "in_ch": in_ch}
        ch2 = ch * ch_mult
        self.tdim = tdim
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.text_pool = nn.Linear(text_dim, tdim)
        self.conv_in = nn.Conv2d(in_ch, ch, 3, padding=1)
        self.down1 = ResBlock(ch, ch, tdim)
        self.downsample = nn.Conv2d(ch, ch2, 3, stride=2, padding=1)
        self.mid1 = ResBlock(ch2, ch2, tdim)
        self.attn = CrossAttention(ch2, text_dim)
        self.mid2 = ResBlock(ch2, ch2, tdim)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.up1 = ResBlock(ch2 + ch, ch, tdim)
        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, in_ch, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z, t, cond, mask):
        if z.ndim != 4 or z.shape[1] != self.config["in_ch"]:
            raise ValueError(f"expected latent [B, {self.config['in_ch']}, h, w], got {tuple(z.shape)}")
        if torch.is_tensor(t) and t.ndim == 0 or not torch.is_tensor(t):
            t = torch.full((z.shape[0],), int(t))
        temb = timestep_embedding(t, self.tdim).to(z.dtype)
        m = mask.to(z.dtype).unsqueeze(-1)
        pooled = (cond * m).sum(1) / m.sum(1).clamp_min(1.0)
        temb = self.time_mlp(temb) + self.text_pool(pooled)
        h0 = self.conv_in(z)
        h1 = self.down1(h0, temb)
        h = self.downsample(h1)
        h = self.mid1(h, temb)
        h = self.attn(h, cond, mask)
        h = self.mid2(h, temb)
        h = self.upsample(h)[..., : h1.shape[-2], : h1.shape[-1]]
        h = self.up1(torch.cat([h, h1], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


@torch.no_grad()
def predict_noise(denoiser: Denoiser, z_t, t, cond, mask=None) -> torch.Tensor:
    """Evaluation-mode noise prediction; accepts a single latent or a batch."""
    single = z_t.ndim == 3
    if single:
        z_t, cond = z_t[None], cond[None]
        mask = None if mask is None else mask[None]
    if mask is None:
        mask = torch.ones(cond.shape[:2], dtype=torch.bool)
    was_training = denoiser.training
    denoiser.eval()
    try:
        out = denoiser(z_t, t, cond, mask)
    finally:
        denoiser.train(was_training)
    return out[0] if single else out


# --------------------------------------------------------------- classifier / reward


def _conv_bn_relu(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=1, padding=1), nn.BatchNorm2d(cout, momentum=0.1),
                         nn.ReLU())


class Classifier(nn.Module):
    """Four conv blocks (32/64/128/256), adaptive pooling, dropout 0.5, linear head.

    Inputs are area-resampled to ``input_size`` first, so 64 px images and 32 px
    images share one network.
    """

    def __init__(self, num_classes: int, in_ch: int = 3, widths=(32, 64, 128, 256), dropout: float = 0.5,
                 input_size: int | None = 32):
        super().__init__()
        self.config = {"num_classes": num_classes, "in_ch": in_ch, "widths": list(widths), "dropout": dropout,
                       "input_size": input_size}
        self.input_size = input_size
        w = widths
        self.features_net = nn.Sequential(
            _conv_bn_relu(in_ch, w[0]), nn.MaxPool2d(2),
            _conv_bn_relu(w[0], w[1]), nn.MaxPool2d(2),
            _conv_bn_relu(w[1], w[2]), nn.MaxPool2d(2),
            _conv_bn_relu(w[2], w[3]), nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.dropout = nn.Dropout(dropout)
        self.head = nn.Linear(w[3], num_classes)

    def features(self, x):
        if self.input_size is not None and x.shape[-1] != self.input_size:
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="area")
        return self.features_net(x)

    def forward(self, x):
        return self.head(self.dropout(self.features(x)))


class RewardModel(nn.Module):
    """Latent-space reward regressor: three conv+pool blocks, a conv+GAP block, MLP head."""

    def __init__(self, in_ch: int = LATENT_CHANNELS, widths=(32, 64, 128, 256), hidden: int = 128,
                 dropout: float = 0.3):
        super().__init__()
        self.config = {"in_ch": in_ch, "widths": list(widths), "hidden": hidden, "dropout": dropout}
        w = widths
        self.blocks = nn.ModuleList([
            nn.Sequential(_conv_bn_relu(in_ch, w[0]), nn.MaxPool2d(2)),
            nn.Sequential(_conv_bn_relu(w[0], w[1]), nn.MaxPool2d(2)),
            nn.Sequential(_conv_bn_relu(w[1], w[2]), nn.MaxPool2d(2)),
            nn.Sequential(_conv_bn_relu(w[2], w[3]), nn.AdaptiveAvgPool2d(1)),
        ])
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(w[3], hidden), nn.ReLU(), nn.Dropout(dropout),
                                  nn.Linear(hidden, 1))

    def forward(self, z):
        for blk in self.blocks:
            z = blk(z)
        return self.head(z).squeeze(-1)

    def trace_shapes(self, z) -> list[tuple[int, ...]]:
        shapes = []
        for blk in self.blocks:
            z = blk(z)
            shapes.append(tuple(z.shape[1:]))
        z = self.head[0](z)
        shapes.append(tuple(z.shape[1:]))
        z = self.head[3](self.head[2](self.head[1](z)))
        shapes.append(tuple(z.shape[1:]))
        shapes.append(tuple(self.head[4](z).shape[1:]))
        return shapes


# ------------------------------------------------------------------ train utilities


def global_norm(grads) -> float:
    return math.sqrt(sum(float(g.detach().double().pow(2).sum()) for g in grads if g is not None))


def clip_gradients(grads, threshold: float):
    """Global-norm clipping: rescale all gradients by ``threshold / norm`` when norm exceeds it."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm <= threshold:
        return list(grads)
    scale = threshold / norm
    return [None if g is None else g * scale for g in grads]


class EMA:
    """Shadow copy of a module's trainable parameters."""

    def __init__(self, module: nn.Module, decay: float = 0.999, warmup: bool = False):
        self.decay, self.warmup = decay, warmup
        self.num_updates = 0
        self.shadow = {n: p.detach().clone() for n, p in module.named_parameters() if p.requires_grad}

    def current_decay(self) -> float:
        if self.warmup:
            return min(self.decay, (1 + self.num_updates) / (10 + self.num_updates))
        return self.decay

    @torch.no_grad()
    def update(self, module: nn.Module) -> None:
        d = self.current_decay()
        for n, p in module.named_parameters():
            if n in self.shadow:
                self.shadow[n].mul_(d).add_(p.detach(), alpha=1.0 - d)
        self.num_updates += 1

    @torch.no_grad()
    def copy_to(self, module: nn.Module) -> None:
        params = dict(module.named_parameters())
        for n, s in self.shadow.items():
            params[n].copy_(s)


@dataclass
class TrainState:
    module: nn.Module
    optimizer: torch.optim.Optimizer
    ema: EMA | None = None
    clip: float = 0.5
    step: int = 0
    params: list = field(default_factory=list)

    def __post_init__(self):
        if self.clip <= 0:
            raise ValueError("clip threshold must be positive")
        if not self.params:
            self.params = [p for group in self.optimizer.param_groups for p in group["params"]]


def make_train_state(module: nn.Module, lr: float = 1e-5, weight_decay: float = 1e-2,
                     ema_decay: float | None = 0.999, clip: float = 0.5, params=None,
                     ema_warmup: bool = False, betas=(0.9, 0.999), eps: float = 1e-8) -> TrainState:
    params = [p for p in (params if params is not None else module.parameters()) if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, foreach=False)
    ema = EMA(module, ema_decay, warmup=ema_warmup) if ema_decay is not None else None
    return TrainState(module, opt, ema, clip, params=params)


def optimizer_step(state: TrainState, grads) -> TrainState:
    """AdamW update (decoupled weight decay) from explicit gradients."""
    for g in grads:
        if g is not None and not bool(torch.isfinite(g).all()):
            raise DivergenceError(f"non-finite gradient at step {state.step}")
    for p, g in zip(state.params, grads):
        p.grad = None if g is None else g.detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    return state


def ema_update(state: TrainState) -> TrainState:
    if state.ema is not None:
        state.ema.update(state.module)
    return state


def train_step(state: TrainState, loss: torch.Tensor) -> float:
    """Backward, clip, AdamW step and EMA update for one scalar loss."""
    if not bool(torch.isfinite(loss)):
        raise DivergenceError(f"non-finite loss at step {state.step}")
    grads = torch.autograd.grad(loss, state.params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(state.params, grads)]
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise DivergenceError(f"non-finite gradient at step {state.step}")
    grads = clip_gradients(grads, state.clip)
    optimizer_step(state, grads)
    ema_update(state)
    state.step += 1
    return float(loss.detach())


def param_checksum(module: nn.Module, include_buffers: bool = True) -> str:
    import hashlib

    h = hashlib.sha256()
    items = list(module.state_dict().items()) if include_buffers else list(module.named_parameters())
    for name, t in items:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
