"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numerics error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import __version__
from . import synthdata as sd
from .checkpoint import CheckpointError, load_network, save_network
from .config import ConfigError, RunConfig, load_config
from .diffusion import (GenerationRequest, LatentDiffusion, build_model, dreambooth_finetune, img2img,
                        sample, train_diffusion, train_vae)
from .downstream import (DiffusionGenerator, ExperimentConfig, NoiseGenerator, RenderGenerator, load_images,
                         run_ratio_experiment, train_classifier)
from .metrics import FeatureStats, NumericsError, class_probabilities, extract_features, fid, inception_score
from .nets import Classifier, DivergenceError, RewardModel
from .preference import (AnnotationRecord, append_annotation, compare_models, heuristic_score, preference_tune,
                         read_annotations, train_reward)
from .schedule import default_schedule, make_linear_schedule
from .stats import DegenerateDataError

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------- run context


class Run:
    """Config, output directory, provenance stamp and JSON-lines logging for one command."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = cfg.out
        self.stamp = {"config_hash": cfg.hash, "tool_version": __version__}

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def log(self, record: dict) -> None:
        p = self.path("logs", f"{self.command}.jsonl")
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "a") as f:
            f.write(json.dumps({**record, **self.stamp}, sort_keys=True) + "\n")

    def write_json(self, rel, payload: dict) -> Path:
        p = self.path(rel) if not Path(rel).is_absolute() else Path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps({**payload, **self.stamp}, indent=1, sort_keys=True) + "\n")
        return p

    def save_manifest(self, m: sd.DatasetManifest, path) -> Path:
        m.meta.update(self.stamp)
        m.save(path)
        return Path(path)

    def rel(self, p) -> str:
        p = Path(p).resolve()
        try:
            return str(p.relative_to(self.out.resolve()))
        except ValueError:
            return str(p)


@contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RuntimeError(f"run directory {out} is locked by another process") from None
    try:
        yield
    finally:
        lock.release()


def _schedule(cfg: RunConfig):
    s = cfg.schedule
    if s.beta_start is None and s.beta_end is None:
        return default_schedule(s.T)
    base = default_schedule(s.T)
    return make_linear_schedule(s.T, s.beta_start if s.beta_start is not None else base.beta_start,
                                s.beta_end if s.beta_end is not None else base.beta_end)


def _load_model(path) -> LatentDiffusion:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return LatentDiffusion.load(path)


def _prompts(n: int, seed: int, canvas: int = 64) -> list[str]:
    rng = np.random.default_rng(seed)
    return [sd.caption_for(sd.random_scene("indoor" if i % 2 == 0 else "outdoor", rng, canvas)) for i in range(n)]


def _phenotype_label(caption: str) -> int:
    try:
        return sd.caption_label(caption, "phenotype")
    except StopIteration:
        return -1


def _save_images(run: Run, out_dir: Path, imgs, captions, prefix: str, provenance: str, labels=None,
                 boxes=None, meta=None) -> sd.DatasetManifest:
    entries = []
    for i, (img, cap) in enumerate(zip(imgs, captions)):
        rel = f"images/{prefix}_{i:05d}.png"
        sd.save_png(out_dir / rel, np.asarray(img), {**run.stamp, "caption": cap})
        entries.append(sd.Entry(f"{prefix}_{i:05d}", rel, cap,
                                _phenotype_label(cap) if labels is None else labels[i], provenance,
                                [] if boxes is None else boxes[i], img.shape[-1], img.shape[-2]))
    m = sd.DatasetManifest(entries, provenance, out_dir, dict(meta or {}))
    run.save_manifest(m, out_dir / "manifest.json")
    return m


# ----------------------------------------------------------------------- commands


def cmd_gen_data(run: Run, args) -> dict:
    cfg = run.cfg
    domains = ["indoor", "outdoor", "detection", "experiment"] if args.domain == "all" else [args.domain]
    out = {}
    for i, dom in enumerate(domains):
        d = run.path("data", dom)
        if dom in ("indoor", "outdoor"):
            n = args.n or (cfg.data.n_indoor if dom == "indoor" else cfg.data.n_outdoor)
            m = sd.generate_dataset(d, dom, n, seed=cfg.seed * 1000 + i, canvas=cfg.data.canvas, text=run.stamp)
        elif dom == "experiment":
            e = cfg.experiment
            m = sd.generate_dataset(d, e.domain, args.n or e.n_real, seed=cfg.seed * 1000 + 7,
                                    canvas=cfg.data.canvas, text=run.stamp, label_by=e.label_by, prefix="real")
        else:
            m = _detection_dataset(run, d, args.n or cfg.data.n_detection, cfg.seed * 1000 + 3)
        run.save_manifest(m, d / "manifest.json")
        out[dom] = len(m)
        run.log({"event": "gen-data", "domain": dom, "n": len(m)})
    return out


def _detection_dataset(run: Run, out_dir: Path, n: int, seed: int) -> sd.DatasetManifest:
    rng = np.random.default_rng(seed)
    entries = []
    canvas = run.cfg.data.canvas
    for i in range(n):
        bg = str(rng.choice(sd.BACKGROUNDS[1:]))
        img, boxes = sd.detection_scene(rng, canvas, background=bg)
        rel = f"images/det_{i:05d}.png"
        cap = sd.row_caption(bg)
        sd.save_png(out_dir / rel, img, run.stamp)
        entries.append(sd.Entry(f"det_{i:05d}", rel, cap, 0, "real", [list(map(int, b[:4])) + [int(b[4])]
                                                                          for b in boxes], canvas, canvas))
    return sd.DatasetManifest(entries, "detection", out_dir, {"classes": list(sd.DETECTION_CLASSES)})


def cmd_build_ratios(run: Run, args) -> dict:
    real = sd.DatasetManifest.load(args.real)
    pool = sd.DatasetManifest.load(args.pool)
    ratios = [float(r) for r in args.ratios.split(",")] if args.ratios else run.cfg.experiment.ratios
    out = Path(args.out) if args.out else run.path("ratios")
    sets = sd.build_ratio_datasets(real, pool, ratios, seed=run.cfg.seed)
    for r, m in zip(ratios, sets):
        run.save_manifest(m, out / f"ratio_{r:g}.json")
    return {"ratios": [f"{r:g}" for r in ratios], "sizes": [len(m) for m in sets]}


def cmd_export_labels(run: Run, args) -> dict:
    m = sd.DatasetManifest.load(args.manifest)
    out = Path(args.out) if args.out else run.path("labels", Path(args.manifest).parent.name)
    sd.export_detection_labels(m, out, text=run.stamp)
    return {"n": len(m), "out": run.rel(out)}


def cmd_train_diffusion(run: Run, args) -> dict:
    cfg = run.cfg
    paths = args.data
    if not paths:
        paths = [run.path("data", d, "manifest.json") for d in ("indoor", "outdoor")]
        # row scenes are optional but keep img2img faithful to composited layouts
        det = run.path("data", "detection", "manifest.json")
        paths += [det] if det.exists() else []
    ms = [sd.DatasetManifest.load(p) for p in paths]
    images = torch.cat([load_images(m) for m in ms])
    captions = [e.caption for m in ms for e in m.entries]
    n = cfg.nets
    model = build_model(captions, _schedule(cfg), {"base": n.vae_base, "levels": n.vae_levels},
                        {"dim": n.text_dim, "max_len": n.max_len},
                        {"ch": n.unet_ch, "ch_mult": n.unet_ch_mult, "tdim": n.tdim}, seed=cfg.seed,
                        extra_vocab=sd.CAPTION_VOCAB)
    tr = cfg.training
    t0 = time.time()
    vae_hist = train_vae(model.vae, images, tr.vae_steps, tr.batch_size, tr.vae_lr, tr.kl_weight, cfg.seed,
                         log_fn=lambda r: run.log({**r, "wall_time": time.time() - t0}))
    model.freeze_frozen()
    trainer = train_diffusion(model, images, captions, tr.diffusion_steps, tr.batch_size, tr.lr, cfg.seed,
                              tr.ema_decay, clip=tr.clip, log_fn=run.log)
    out = Path(args.out) if args.out else run.path("checkpoints", "base.ckpt")
    model.save(out, trainer.state, stage="base", **run.stamp)
    return {"checkpoint": run.rel(out), "vae_recon": vae_hist[-1]["recon"] if vae_hist else None,
            "n_images": len(images)}


def cmd_generate(run: Run, args) -> dict:
    model = _load_model(args.checkpoint or run.path("checkpoints", "base.ckpt"))
    reqs = [GenerationRequest(args.prompt, args.seed + i) for i in range(args.n)]
    imgs = sample(model, reqs, run.cfg.data.canvas).numpy()
    out = Path(args.out) if args.out else run.path("generated")
    m = _save_images(run, out, imgs, [args.prompt] * args.n, f"gen_s{args.seed}", "synthetic",
                     meta={"seeds": [r.seed for r in reqs]})
    return {"n": len(m), "manifest": run.rel(out / "manifest.json")}


def _subject_images(run: Run) -> tuple[np.ndarray, sd.DatasetManifest]:
    db = run.cfg.dreambooth
    rng = np.random.default_rng(run.cfg.seed + 101)
    plant = sd.PlantSpec.random(rng, species=db.subject_species, phenotype=db.subject_phenotype, growth_stage=0.9)
    imgs = []
    for i in range(db.n_subject):
        jitter = tuple(rng.uniform(-3, 3, 2))
        img, _, _ = sd.render_scene(sd.single_plant_scene(plant, "indoor_blue", run.cfg.data.canvas, seed=i,
                                                          offset=jitter))
        imgs.append(sd.quantize(img))
    out = run.path("data", "subject")
    m = _save_images(run, out, imgs, [db.subject_caption] * len(imgs), "subject", "real")
    return np.stack(imgs), m


def cmd_dreambooth(run: Run, args) -> dict:
    db = run.cfg.dreambooth
    model = _load_model(args.checkpoint or run.path("checkpoints", "base.ckpt"))
    if args.subject:
        m = sd.DatasetManifest.load(args.subject)
        imgs = load_images(m)
    else:
        imgs, m = _subject_images(run)
    dreambooth_finetune(model, torch.as_tensor(imgs), db.subject_caption, db.class_prompt, db.steps, db.lr,
                        db.lam, db.num_prior, run.cfg.seed, run.cfg.data.canvas, log_fn=run.log)
    out = run.path("checkpoints", "dreambooth.ckpt")
    model.save(out, stage="dreambooth", **run.stamp)
    reqs = [GenerationRequest(db.outdoor_prompt, run.cfg.seed * 1000 + i) for i in range(db.n_samples)]
    samples = sample(model, reqs, run.cfg.data.canvas).numpy()
    _save_images(run, run.path("dreambooth_samples"), samples, [db.outdoor_prompt] * len(samples), "sks",
                 "synthetic")
    return {"checkpoint": run.rel(out), "n_subject": len(m), "n_samples": len(samples)}


def cmd_translate(run: Run, args) -> dict:
    tcfg = run.cfg.translation
    model = _load_model(args.checkpoint or run.path("checkpoints", "dreambooth.ckpt"))
    src = sd.DatasetManifest.load(args.input or run.path("data", "detection", "manifest.json"))
    entries = src.entries[:tcfg.n_scenes] if not args.input else src.entries
    prompt = args.prompt or tcfg.prompt
    strength = tcfg.strength if args.strength is None else args.strength
    x = load_images(src.subset(entries))
    outs = [img2img(model, x[i], prompt, strength, run.cfg.seed * 1000 + i).numpy() for i in range(len(x))]
    out = Path(args.out) if args.out else run.path("translated")
    m = _save_images(run, out, outs, [prompt] * len(outs), "tr", "translated", labels=[e.label for e in entries],
                     boxes=[e.boxes for e in entries], meta={"strength": strength, "source": [e.id for e in entries]})
    sd.export_detection_labels(m, out / "labels", text=run.stamp)
    return {"n": len(m), "strength": strength}


def _candidates(run: Run, model: LatentDiffusion, n: int) -> sd.DatasetManifest:
    prompts = _prompts(n, run.cfg.seed + 211, run.cfg.data.canvas)
    reqs = [GenerationRequest(p, 5_000_000 + run.cfg.seed * 10_000 + i) for i, p in enumerate(prompts)]
    imgs = sample(model, reqs, run.cfg.data.canvas).numpy()
    return _save_images(run, run.path("annotations", "candidates"), imgs, prompts, "cand", "synthetic")


def cmd_score(run: Run, args) -> dict:
    ann = Path(args.annotations) if args.annotations else run.path("annotations", "annotations.csv")
    mpath = Path(args.images) if args.images else run.path("annotations", "candidates", "manifest.json")
    if mpath.exists():
        m = sd.DatasetManifest.load(mpath)
    else:
        m = _candidates(run, _load_model(args.checkpoint or run.path("checkpoints", "base.ckpt")),
                        run.cfg.preference.n_annotations)
    done = read_annotations(ann) if ann.exists() else {}
    todo = [e for e in m.entries if e.id not in done]
    n = 0
    for e in todo:
        if args.auto:
            s = round(heuristic_score(m.load_image(e)), 3)
        else:
            print(f"{e.id}\t{m.image_path(e)}\t{e.caption}", file=sys.stderr)
            line = sys.stdin.readline()
            if not line:
                break
            try:
                s = float(line.strip())
            except ValueError:
                raise UsageError(f"not a score: {line.strip()!r}") from None
        append_annotation(ann, e.id, s)
        n += 1
    return {"scored": n, "remaining": len(todo) - n}


def _records(run: Run, model: LatentDiffusion, ann: Path, mpath: Path) -> list[AnnotationRecord]:
    scores = read_annotations(ann)
    m = sd.DatasetManifest.load(mpath)
    entries = [e for e in m.entries if e.id in scores]
    z = model.encode(load_images(m.subset(entries)))
    return [AnnotationRecord(e.id, z[i], scores[e.id]) for i, e in enumerate(entries)]


def cmd_train_reward(run: Run, args) -> dict:
    p = run.cfg.preference
    model = _load_model(args.checkpoint or run.path("checkpoints", "base.ckpt"))
    ann = Path(args.annotations) if args.annotations else run.path("annotations", "annotations.csv")
    mpath = Path(args.images) if args.images else run.path("annotations", "candidates", "manifest.json")
    recs = _records(run, model, ann, mpath)
    net, r, info = train_reward(recs, p.split, run.cfg.seed, p.reward_epochs, lr=p.reward_lr, log_fn=run.log)
    out = run.path("checkpoints", "reward.ckpt")
    save_network(out, "reward_model", net, {**run.stamp, "test_pearson": r, "n_records": len(recs)})
    run.write_json("reports/reward.json", {"test_pearson": r, "test_mse": info["test_mse"],
                                           "n_train": info["n_train"], "n_test": info["n_test"]})
    return {"checkpoint": run.rel(out), "test_pearson": r}


def _reward(run: Run, path=None) -> RewardModel:
    path = Path(path) if path else run.path("checkpoints", "reward.ckpt")
    if not path.exists():
        raise FileNotFoundError(f"reward model checkpoint not found: {path}")
    return load_network(path, "reward_model", RewardModel)[0]


def cmd_preference_tune(run: Run, args) -> dict:
    p = run.cfg.preference
    model = _load_model(args.checkpoint or run.path("checkpoints", "base.ckpt"))
    reward = _reward(run, args.reward)
    train_prompts = _prompts(max(p.prompts_per_epoch, 8), run.cfg.seed + 307, run.cfg.data.canvas)
    val_prompts = _prompts(p.n_val, run.cfg.seed + 401, run.cfg.data.canvas)
    best = run.path("checkpoints", "preference_best.ckpt")
    res = preference_tune(model, reward, train_prompts, val_prompts, p.epochs, p.prompts_per_epoch, p.N, p.k,
                          p.tau, p.lr, p.ema_decay, p.clip, run.cfg.seed, best_path=best,
                          image_size=run.cfg.data.canvas, log_fn=run.log)
    run.write_json("reports/preference.json", res)
    with open(run.path("reports", "preference_curve.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "val_mean_reward"])
        for h in res["history"]:
            w.writerow([h["epoch"], f"{h['val_mean_reward']:.6f}"])
    return {"checkpoint": run.rel(best), "best_epoch": res["best_epoch"],
            "best_val_mean_reward": res["best_val_mean_reward"]}


def cmd_compare(run: Run, args) -> dict:
    reward = _reward(run, args.reward)
    prompts = _prompts(run.cfg.preference.n_compare, run.cfg.seed + 503, run.cfg.data.canvas)
    res = compare_models(_load_model(args.base), _load_model(args.tuned), reward, prompts,
                         image_size=run.cfg.data.canvas)
    run.write_json(Path(args.out).resolve() if args.out else "reports/compare.json", res)
    return res


def cmd_train_extractor(run: Run, args) -> dict:
    paths = args.data or [run.path("data", d, "manifest.json") for d in ("indoor", "outdoor")]
    ms = [sd.DatasetManifest.load(p) for p in paths]
    allm = sd.merge_manifests(ms)
    rng = np.random.default_rng(run.cfg.seed + 17)
    order = rng.permutation(len(allm))
    cut = int(0.8 * len(order))
    train = allm.subset([allm.entries[i] for i in order[:cut]])
    test = allm.subset([allm.entries[i] for i in order[cut:]])
    mc = run.cfg.metrics
    ecfg = ExperimentConfig(ratios=[0], epochs=mc.extractor_epochs, steps_per_epoch=mc.extractor_steps_per_epoch,
                            seed=run.cfg.seed)
    net, acc, _ = train_classifier(ecfg, train, test, len(sd.PHENOTYPES), log_fn=run.log)
    out = run.path("checkpoints", "extractor.ckpt")
    save_network(out, "classifier", net, {**run.stamp, "accuracy": acc, "task": "phenotype"})
    return {"checkpoint": run.rel(out), "accuracy": acc}


def _extractor(run: Run, path=None):
    path = Path(path) if path else run.path("checkpoints", "extractor.ckpt")
    if not path.exists():
        raise FileNotFoundError(f"extractor checkpoint not found: {path}")
    net, meta = load_network(path, "classifier", Classifier)
    return net, meta, _sha256(path)


def _sha256(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_eval_fid(run: Run, args) -> dict:
    net, meta, digest = _extractor(run, args.extractor)
    real = sd.DatasetManifest.load(args.real)
    gen = sd.DatasetManifest.load(args.gen)
    fr = FeatureStats.from_features(extract_features(net, load_images(real), meta))
    fg = FeatureStats.from_features(extract_features(net, load_images(gen), meta))
    res = {"fid": fid(fr, fg), "real": fr.to_dict(), "gen": fg.to_dict(), "extractor_sha256": digest}
    run.write_json(Path(args.out).resolve() if args.out else "reports/fid.json", res)
    return {"fid": res["fid"]}


def cmd_eval_is(run: Run, args) -> dict:
    net, meta, digest = _extractor(run, args.extractor)
    gen = sd.DatasetManifest.load(args.gen)
    splits = args.splits or run.cfg.metrics.is_splits
    probs = class_probabilities(net, load_images(gen), meta)
    mean, std = inception_score(probs, min(splits, len(probs)))
    res = {"is_mean": mean, "is_std": std, "splits": min(splits, len(probs)), "n": len(probs),
           "extractor_sha256": digest}
    run.write_json(Path(args.out).resolve() if args.out else "reports/is.json", res)
    return {"is_mean": mean, "is_std": std}


def cmd_run_ratio_experiment(run: Run, args) -> dict:
    ecfg = run.cfg.experiment
    real_path = args.real or ecfg.train_manifest or run.path("data", "experiment", "manifest.json")
    real = sd.DatasetManifest.load(real_path)
    kind = args.generator
    if kind == "render":
        gen = RenderGenerator()
    elif kind == "noise":
        gen = NoiseGenerator()
    else:
        gen = DiffusionGenerator(_load_model(args.checkpoint or run.path("checkpoints", "base.ckpt")))
    out = Path(args.out) if args.out else run.path("reports", "ratio")
    report = run_ratio_experiment(ecfg, real, gen, out, text=run.stamp, log_fn=run.log)
    return {"cells": [(c["ratio"], c["accuracy"]) for c in report["cells"]]}


def cmd_pipeline(run: Run, args) -> dict:
    ns = argparse.Namespace
    c = lambda **kw: ns(**{"checkpoint": None, "out": None, **kw})  # noqa: E731
    steps = [
        ("gen-data", cmd_gen_data, c(domain="all", n=None)),
        ("export-labels", cmd_export_labels, c(manifest=run.path("data", "detection", "manifest.json"))),
        ("train-diffusion", cmd_train_diffusion, c(data=None)),
        ("generate-eval-set", _generate_eval_set, c()),
        ("train-extractor", cmd_train_extractor, c(data=None)),
        ("eval-fid", cmd_eval_fid, c(extractor=None, real=run.path("data", "outdoor", "manifest.json"),
                                     gen=run.path("generated_eval", "manifest.json"))),
        ("eval-is", cmd_eval_is, c(extractor=None, gen=run.path("generated_eval", "manifest.json"), splits=None)),
        ("dreambooth", cmd_dreambooth, c(subject=None)),
        ("translate", cmd_translate, c(input=None, prompt=None, strength=None)),
        ("score", cmd_score, c(images=None, annotations=None, auto=True)),
        ("train-reward", cmd_train_reward, c(annotations=None, images=None)),
        ("preference-tune", cmd_preference_tune, c(reward=None)),
        ("compare", cmd_compare, c(base=run.path("checkpoints", "base.ckpt"), reward=None,
                                   tuned=run.path("checkpoints", "preference_best.ckpt"))),
        ("run-ratio-experiment", cmd_run_ratio_experiment, c(real=None, generator="diffusion")),
    ]
    summary = {}
    for name, fn, a in steps:
        run.command = name
        t0 = time.time()
        summary[name] = fn(run, a)
        run.command = "pipeline"
        run.log({"event": "stage-complete", "stage": name, "wall_time": time.time() - t0})
    run.write_json("reports/pipeline.json", {"stages": list(summary), "summary": _jsonable(summary)})
    return {"stages": len(summary)}


def _generate_eval_set(run: Run, args) -> dict:
    """Generated counterpart of the outdoor data for FID/IS, prompted with its captions."""
    real = sd.DatasetManifest.load(run.path("data", "outdoor", "manifest.json"))
    model = _load_model(run.path("checkpoints", "base.ckpt"))
    entries = real.entries[:run.cfg.data.n_generate]
    reqs = [GenerationRequest(e.caption, 3_000_000 + i) for i, e in enumerate(entries)]
    imgs = sample(model, reqs, run.cfg.data.canvas).numpy()
    _save_images(run, run.path("generated_eval"), imgs, [e.caption for e in entries], "eval", "synthetic",
                 labels=[e.label for e in entries])
    return {"n": len(entries)}


def _jsonable(x):
    return json.loads(json.dumps(x, default=str))


# ----------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="agridiff", description="Desk-scale text-to-image pipeline for agricultural imagery.")
    p.add_argument("--version", action="version", version=f"agridiff {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="TOML run configuration (defaults used when omitted)")
        sp.add_argument("--output-dir", help="run directory (overrides config and environment)")
        return sp

    sp = add("gen-data", "render procedural datasets")
    sp.add_argument("--domain", default="all", choices=["all", "indoor", "outdoor", "detection", "experiment"])
    sp.add_argument("--n", type=int)

    sp = add("build-ratios", "build nested real+synthetic manifests")
    sp.add_argument("--real", required=True)
    sp.add_argument("--pool", required=True)
    sp.add_argument("--ratios", help="comma-separated percents")
    sp.add_argument("--out")

    sp = add("export-labels", "write detection labels (class cx cy w h, normalized)")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out")

    sp = add("train-diffusion", "train the VAE and the text-conditioned denoiser")
    sp.add_argument("--data", nargs="+")
    sp.add_argument("--out")

    sp = add("generate", "sample images from a checkpoint")
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")

    sp = add("dreambooth", "bind the sks token to a subject with prior preservation")
    sp.add_argument("--checkpoint")
    sp.add_argument("--subject", help="manifest of subject images (rendered when omitted)")

    sp = add("translate", "image-guided translation by partial noising")
    sp.add_argument("--checkpoint")
    sp.add_argument("--input")
    sp.add_argument("--prompt")
    sp.add_argument("--strength", type=float)
    sp.add_argument("--out")

    sp = add("score", "annotate candidate images with 0-10 scores from standard input")
    sp.add_argument("--images")
    sp.add_argument("--annotations")
    sp.add_argument("--checkpoint")
    sp.add_argument("--auto", action="store_true", help="use the heuristic scorer instead of standard input")

    sp = add("train-reward", "fit the latent reward model on annotations")
    sp.add_argument("--annotations")
    sp.add_argument("--images")
    sp.add_argument("--checkpoint")

    sp = add("preference-tune", "reward-weighted fine-tuning with validation checkpointing")
    sp.add_argument("--checkpoint")
    sp.add_argument("--reward")

    sp = add("compare", "mean rewards and paired t-test of two checkpoints")
    sp.add_argument("--base", required=True)
    sp.add_argument("--tuned", required=True)
    sp.add_argument("--reward")
    sp.add_argument("--out")

    sp = add("train-extractor", "train the feature-extractor classifier used by FID and IS")
    sp.add_argument("--data", nargs="+")

    sp = add("eval-fid", "FID between two manifests")
    sp.add_argument("--real", required=True)
    sp.add_argument("--gen", required=True)
    sp.add_argument("--extractor")
    sp.add_argument("--out")

    sp = add("eval-is", "Inception Score of a manifest")
    sp.add_argument("--gen", required=True)
    sp.add_argument("--splits", type=int)
    sp.add_argument("--extractor")
    sp.add_argument("--out")

    sp = add("run-ratio-experiment", "classification accuracy versus augmentation ratio")
    sp.add_argument("--real")
    sp.add_argument("--generator", default="diffusion", choices=["diffusion", "render", "noise"])
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")

    add("pipeline", "run every stage end to end")
    return p


HANDLERS = {
    "gen-data": cmd_gen_data, "build-ratios": cmd_build_ratios, "export-labels": cmd_export_labels,
    "train-diffusion": cmd_train_diffusion, "generate": cmd_generate, "dreambooth": cmd_dreambooth,
    "translate": cmd_translate, "train-reward": cmd_train_reward, "score": cmd_score,
    "preference-tune": cmd_preference_tune, "compare": cmd_compare, "train-extractor": cmd_train_extractor,
    "eval-fid": cmd_eval_fid, "eval-is": cmd_eval_is, "run-ratio-experiment": cmd_run_ratio_experiment,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = load_config(args.config, args.output_dir)
    except (ConfigError, FileNotFoundError) as e:
        print(f"agridiff: config error: {e}", file=sys.stderr)
        return 1
    torch.set_num_threads(1)  # bit-reproducible reductions
    try:
        with run_lock(cfg.out):
            result = HANDLERS[args.command](Run(cfg, args.command), args)
    except UsageError as e:
        print(f"agridiff: {e}", file=sys.stderr)
        return 1
    except (DivergenceError, NumericsError, DegenerateDataError, CheckpointError, FileNotFoundError,
            ValueError, RuntimeError, ArithmeticError) as e:
        print(f"agridiff {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(json.dumps(_jsonable(result), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
