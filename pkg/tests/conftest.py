import pytest
import torch
from hypothesis import HealthCheck, settings

from agridiff import synthdata as sd
from agridiff.diffusion import build_model, train_diffusion, train_vae
from agridiff.schedule import default_schedule, make_linear_schedule

torch.set_num_threads(1)

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


BASE_RECIPE = dict(n_single=512, n_rows=256, vae_steps=800, vae_lr=4e-3, diffusion_steps=4000)


@pytest.fixture(scope="session")
def corpus():
    images, captions = sd.training_corpus(BASE_RECIPE["n_single"], BASE_RECIPE["n_rows"])
    return torch.from_numpy(images), captions


@pytest.fixture(scope="session")
def base_checkpoint(tmp_path_factory, corpus):
    """Desk-scale base model: VAE then denoiser on single plants plus row scenes, saved once per session."""
    images, captions = corpus
    model = build_model(captions, default_schedule(50), seed=0, extra_vocab=sd.CAPTION_VOCAB)
    train_vae(model.vae, images, steps=BASE_RECIPE["vae_steps"], batch_size=32, lr=BASE_RECIPE["vae_lr"], seed=0)
    model.freeze_frozen()
    trainer = train_diffusion(model, images, captions, steps=BASE_RECIPE["diffusion_steps"], batch_size=32, lr=1e-3,
                              seed=0)
    path = tmp_path_factory.mktemp("base") / "base.ckpt"
    model.save(path, trainer.state, stage="base")
    return path


@pytest.fixture
def tiny_model():
    """Untrained miniature bundle for fast structural tests."""
    captions = ["a healthy canola plant at mature stage in an indoor lab"]
    return build_model(captions, make_linear_schedule(10, 1e-3, 0.2), vae_cfg={"base": 4, "levels": 3},
                       text_cfg={"dim": 8, "max_len": 16}, unet_cfg={"ch": 8, "ch_mult": 1, "tdim": 8},
                       seed=0, extra_vocab=sd.CAPTION_VOCAB)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
