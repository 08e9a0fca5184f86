"""Augmentation-ratio classification experiment."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import synthdata as sd
from .nets import Classifier, make_train_state, train_step


@dataclass
class ExperimentConfig:
    ratios: list = field(default_factory=lambda: [0, 100, 200, 300, 400])
    epochs: int = 15
    steps_per_epoch: int | None = 20  # fixed update budget per epoch; None means one pass over the data
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip: float = 5.0
    seed: int = 0
    input_size: int = 32
    train_fraction: float = 0.7  # remainder is held out
    gen_fraction: float = 0.6  # of the held-out part; only these captions reach the generator
    real_per_class: int | None = None  # subsample the real training split (scarce-data scenario)
    domain: str = "outdoor"  # real-data generation settings used by the CLI
    label_by: str = "species"
    n_real: int = 1000
    train_manifest: str | None = None
    test_manifest: str | None = None

    def __post_init__(self):
        self.ratios = [float(r) if not float(r).is_integer() else int(r) for r in self.ratios]
        if self.ratios != sorted(self.ratios):
            raise ValueError("ratios must be sorted ascending")
        if any(r < 0 for r in self.ratios):
            raise ValueError("ratios must be non-negative")
        if not (0 < self.train_fraction < 1 and 0 < self.gen_fraction < 1):
            raise ValueError("split fractions must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


class LeakageError(RuntimeError):
    pass


# ----------------------------------------------------------------- classifier


_IMAGE_CACHE: dict[Path, np.ndarray] = {}


def load_images(manifest: sd.DatasetManifest) -> torch.Tensor:
    imgs = []
    for e in manifest.entries:
        p = manifest.image_path(e)
        if p not in _IMAGE_CACHE:
            _IMAGE_CACHE[p] = sd.load_png(p)
        imgs.append(_IMAGE_CACHE[p])
    return torch.from_numpy(np.stack(imgs))


@torch.no_grad()
def evaluate(model: Classifier, x: torch.Tensor, y: torch.Tensor, batch_size: int = 256) -> float:
    model.eval()
    pred = torch.cat([model(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)])
    return float((pred == y).double().mean())


def _minibatches(n: int, batch_size: int, g: torch.Generator):
    """Endless stream of minibatches over reshuffled passes; trailing singletons are dropped for BatchNorm."""
    while True:
        perm = torch.randperm(n, generator=g)
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            if len(idx) >= 2:
                yield idx


def train_classifier(cfg: ExperimentConfig, train: sd.DatasetManifest, test: sd.DatasetManifest | None = None,
                     num_classes: int | None = None, log_fn=None):
    """Fresh classifier trained by cross-entropy; returns ``(model, test_accuracy, history)``."""
    labels = train.labels()
    if len(set(labels)) < 2:
        raise ValueError("training manifest must contain at least two classes")
    num_classes = num_classes or max(labels + (test.labels() if test else [])) + 1
    x = load_images(train)
    y = torch.tensor(labels)
    xt = load_images(test) if test is not None else None
    yt = torch.tensor(test.labels()) if test is not None else None

    torch.manual_seed(cfg.seed)
    model = Classifier(num_classes, input_size=cfg.input_size)
    state = make_train_state(model, lr=cfg.lr, weight_decay=cfg.weight_decay, ema_decay=None, clip=cfg.clip)
    g = torch.Generator().manual_seed(cfg.seed)
    history = []
    batches = _minibatches(len(x), cfg.batch_size, g)
    n_batches = cfg.steps_per_epoch or math.ceil(len(x) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        model.train()
        losses = []
        for _ in range(n_batches):
            idx = next(batches)
            losses.append(train_step(state, F.cross_entropy(model(x[idx]), y[idx])))
        rec = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
        if xt is not None:
            rec["test_accuracy"] = evaluate(model, xt, yt)
        history.append(rec)
        if log_fn:
            log_fn({"stage": "classifier", **rec})
    acc = history[-1].get("test_accuracy") if history else None
    model.eval()
    return model, acc, history


# ----------------------------------------------------------------- generators


class RenderGenerator:
    """Faithful generator: renders a fresh procedural scene matching each caption."""

    name = "render"

    def __call__(self, captions, seeds, canvas: int = 64) -> np.ndarray:
        out = []
        for c, s in zip(captions, seeds):
            img, _, _ = sd.render_scene(sd.spec_from_caption(c, np.random.default_rng(s), canvas))
            out.append(img)
        return np.stack(out)


class NoiseGenerator:
    """Negative control: uniform noise that ignores the caption."""

    name = "noise"

    def __call__(self, captions, seeds, canvas: int = 64) -> np.ndarray:
        return np.stack([np.random.default_rng(s).random((3, canvas, canvas), dtype=np.float32) for s in seeds])


class DiffusionGenerator:
    """Samples a trained latent-diffusion checkpoint with one seed per caption."""

    name = "diffusion"

    def __init__(self, model, batch_size: int = 64):
        self.model = model
        self.batch_size = batch_size

    def __call__(self, captions, seeds, canvas: int = 64) -> np.ndarray:
        from .diffusion import GenerationRequest, sample

        reqs = [GenerationRequest(c, int(s)) for c, s in zip(captions, seeds)]
        return sample(self.model, reqs, canvas, batch_size=self.batch_size).numpy()


# ----------------------------------------------------------------- experiment


def split_real(manifest: sd.DatasetManifest, cfg: ExperimentConfig):
    """Stratified ``(train, generation, test)`` split of a real manifest."""
    rng = np.random.default_rng(cfg.seed)
    train, gen, test = [], [], []
    by_label: dict[int, list] = {}
    for e in manifest.entries:
        by_label.setdefault(e.label, []).append(e)
    for label in sorted(by_label):
        items = by_label[label]
        order = rng.permutation(len(items))
        n_tr = int(round(cfg.train_fraction * len(items)))
        n_gen = int(round(cfg.gen_fraction * (len(items) - n_tr)))
        tr = [items[i] for i in order[:n_tr]]
        if cfg.real_per_class is not None:
            tr = tr[:cfg.real_per_class]
        train += tr
        gen += [items[i] for i in order[n_tr:n_tr + n_gen]]
        test += [items[i] for i in order[n_tr + n_gen:]]
    return (manifest.subset(train, "train"), manifest.subset(gen, "generation"),
            manifest.subset(test, "test"))


def build_synthetic_pool(generator, source: sd.DatasetManifest, n: int, out_dir, seed: int = 0,
                         text: dict | None = None) -> sd.DatasetManifest:
    """``n`` synthetic images from the source captions (cycled), labelled like their caption source."""
    out_dir = Path(out_dir)
    if n and not source.entries:
        raise ValueError("no captions to generate from")
    srcs = [source.entries[i % len(source.entries)] for i in range(n)]
    seeds = [seed * 1_000_003 + i for i in range(n)]
    entries = []
    chunk = 64
    for s in range(0, n, chunk):
        imgs = generator([e.caption for e in srcs[s:s + chunk]], seeds[s:s + chunk])
        for j, img in enumerate(imgs):
            i = s + j
            rel = f"images/syn_{i:05d}.png"
            sd.save_png(out_dir / rel, img, text)
            e = srcs[i]
            entries.append(sd.Entry(f"syn_{i:05d}", rel, e.caption, e.label, "synthetic", [],
                                    img.shape[-1], img.shape[-2]))
    return sd.DatasetManifest(entries, "synthetic", out_dir, {"generator": getattr(generator, "name", "custom"),
                                                              "seed": seed})


def check_leakage(test: sd.DatasetManifest, train_sets) -> None:
    test_ids = set(test.ids())
    for m in train_sets:
        overlap = test_ids & set(m.ids())
        if overlap:
            raise LeakageError(f"test ids in training manifest {m.split}: {sorted(overlap)[:5]}")
    if any(e.provenance != "real" for e in test.entries):
        raise LeakageError("test manifest must contain only real images")


def run_ratio_experiment(cfg: ExperimentConfig, real: sd.DatasetManifest, generator, out_dir,
                         text: dict | None = None, log_fn=None) -> dict:
    """Train one classifier per augmentation ratio; writes ``report.json`` and ``curve.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, gen_src, test = split_real(real, cfg)
    n_syn = max((int(math.floor(r * len(train) / 100)) for r in cfg.ratios), default=0)
    pool = build_synthetic_pool(generator, gen_src, n_syn, out_dir / "synthetic", cfg.seed, text)
    sets = sd.build_ratio_datasets(train, pool, cfg.ratios, cfg.seed)
    check_leakage(test, sets)
    test.save(out_dir / "test_manifest.json")
    num_classes = max(real.labels()) + 1
    cells, curve = [], []
    for r, m in zip(cfg.ratios, sets):
        m.save(out_dir / f"train_ratio_{r:g}.json")
        t0 = time.time()
        try:
            _, acc, hist = train_classifier(cfg, m, test, num_classes, log_fn)
            cell = {"ratio": r, "accuracy": acc, "status": "ok", "n_real": m.meta["n_real"],
                    "n_synthetic": m.meta["n_synthetic"], "epochs": len(hist)}
        except (ValueError, RuntimeError) as e:
            cell = {"ratio": r, "accuracy": None, "status": "failed", "error": str(e),
                    "n_real": m.meta["n_real"], "n_synthetic": m.meta["n_synthetic"]}
        cells.append(cell)
        curve.append((r, cell["accuracy"], cfg.seed, time.time() - t0))
    report = {"config": asdict(cfg), "generator": getattr(generator, "name", "custom"),
              "n_test": len(test), "n_train_real": len(train), "n_generation_captions": len(gen_src),
              "cells": cells, **({"meta": text} if text else {})}
    (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    with open(out_dir / "curve.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["ratio", "accuracy", "seed", "wall_time"])
        for r, acc, s, wt in curve:
            w.writerow([f"{r:g}", "" if acc is None else f"{acc:.6f}", s, f"{wt:.3f}"])
    return report
