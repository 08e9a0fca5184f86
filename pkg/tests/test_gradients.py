"""Autograd gradients of every training objective against central finite differences.

Each objective runs on a float64 miniature with at most ~1k parameters, all
randomness frozen, so the loss is a deterministic function of the parameters.
"""

import time

import pytest
import torch

from agridiff import synthdata as sd
from agridiff.diffusion import DiffusionTrainer, TrainingBatch, build_model, denoising_loss, dreambooth_loss
from agridiff.nets import VAE, Denoiser, RewardModel, TextEmbedder, vae_elbo_loss
from agridiff.preference import reward_loss, weighted_sft_loss
from agridiff.schedule import make_linear_schedule

H = 1e-6
TOL = 1e-4
MAX_PARAMS = 1000
_timings = {}


@pytest.fixture(autouse=True, scope="module")
def _budget():
    yield
    assert sum(_timings.values()) < 60.0, _timings


def finite_difference_check(params, loss_fn, name):
    t0 = time.time()
    assert sum(p.numel() for p in params) <= MAX_PARAMS
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = torch.cat([p.grad.flatten() for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + H
                up = float(loss_fn())
                flat[i] = orig - H
                down = float(loss_fn())
                flat[i] = orig
                numeric.append((up - down) / (2 * H))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    assert float(analytic.norm()) > 1e-8, "degenerate check: analytic gradient vanished"
    rel = float((analytic - numeric).norm() / max(analytic.norm(), numeric.norm()))
    _timings[name] = time.time() - t0
    assert rel < TOL, f"{name}: relative error {rel:.2e}"
    return rel


def tiny_denoiser(text_dim=4):
    torch.manual_seed(0)
    d = Denoiser(ch=2, ch_mult=1, tdim=4, text_dim=text_dim).double()
    # zero-initialized output head would block gradients to everything upstream
    torch.nn.init.normal_(d.conv_out.weight, std=0.5)
    torch.nn.init.normal_(d.conv_out.bias, std=0.5)
    return d


def test_elbo_gradient():
    torch.manual_seed(0)
    vae = VAE(base=2, levels=1).double()
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    zn = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
    params = [p for p in vae.parameters() if p.requires_grad]
    finite_difference_check(params, lambda: vae_elbo_loss(vae, x, zn, kl_weight=0.5)["loss"], "elbo")


def test_ddpm_gradient():
    d = tiny_denoiser()
    s = make_linear_schedule(10, 1e-3, 0.2)
    g = torch.Generator().manual_seed(2)
    z0 = torch.randn(3, 4, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 4, 4, 4, generator=g, dtype=torch.float64)
    cond = torch.randn(3, 5, 4, generator=g, dtype=torch.float64)
    mask = torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1], [1, 0, 0, 0, 0]], dtype=torch.bool)
    t = torch.tensor([1, 5, 10])
    finite_difference_check(list(d.parameters()), lambda: denoising_loss(d, z0, t, eps, cond, mask, s).mean(),
                            "ddpm")


def test_dreambooth_gradient_includes_identifier_row():
    caps = ["a sks canola plant", "a canola plant"]
    model = build_model(caps, make_linear_schedule(10, 1e-3, 0.2), vae_cfg={"base": 2, "levels": 1},
                        text_cfg={"dim": 4, "max_len": 8}, unet_cfg={"ch": 2, "ch_mult": 1, "tdim": 4}, seed=0)
    model.denoiser = tiny_denoiser()
    model.embedder.double()
    trainer = DiffusionTrainer(model, lr=1e-3, ema_decay=None, train_sks=True)
    g = torch.Generator().manual_seed(3)
    subj = TrainingBatch(None, ["a sks canola plant"] * 2, "subject",
                         latents=torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64))
    prior = TrainingBatch(None, ["a canola plant"] * 2, "prior",
                          latents=torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64))

    def loss():
        trainer.generator.manual_seed(7)
        return dreambooth_loss(trainer, subj, prior, lam=0.7)

    params = list(model.denoiser.parameters()) + [model.embedder.sks_row]
    finite_difference_check(params, loss, "dreambooth")
    assert float(model.embedder.sks_row.grad.norm()) > 0


def test_reward_mse_gradient():
    torch.manual_seed(0)
    r = RewardModel(widths=(2, 2, 2, 2), hidden=4, dropout=0.0).double().train()
    g = torch.Generator().manual_seed(4)
    z = torch.randn(6, 4, 8, 8, generator=g, dtype=torch.float64)
    y = torch.rand(6, generator=g, dtype=torch.float64) * 10
    finite_difference_check(list(r.parameters()), lambda: reward_loss(r(z), y), "reward")


def test_weighted_sft_gradient():
    d = tiny_denoiser()
    s = make_linear_schedule(10, 1e-3, 0.2)
    g = torch.Generator().manual_seed(5)
    z0 = torch.randn(4, 4, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 4, 4, 4, generator=g, dtype=torch.float64)
    emb = TextEmbedder.from_corpus(["a canola plant"], extra=sd.CAPTION_VOCAB, dim=4, max_len=6).double()
    cond, mask = emb(["a canola plant"] * 4)
    t = torch.tensor([2, 4, 6, 8])
    w = torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=torch.float64)
    finite_difference_check(list(d.parameters()),
                            lambda: weighted_sft_loss(d, z0, t, eps, cond, mask, w, s), "weighted_sft")
