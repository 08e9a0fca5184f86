"""Procedural plant scenes, segmentation, compositing and dataset manifests.

Images are float32 arrays shaped ``(3, H, W)`` in [0, 1]; patches carry an
extra alpha channel, ``(4, h, w)``. Boxes are ``(x0, y0, x1, y1)`` pixel
coordinates with exclusive upper bounds.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin
from scipy import ndimage


PHENOTYPES = ("healthy", "spotted", "yellowing", "flowering")
CROPS = ("canola", "soybean")
WEEDS = ("foxtail", "pigweed", "kochia")
SPECIES = CROPS + WEEDS
BACKGROUNDS = ("indoor_blue", "outdoor_soil_light", "outdoor_soil_dark")
DETECTION_CLASSES = ("crop", "weed_a", "weed_b", "weed_c")
PROVENANCES = ("real", "synthetic", "translated")

ENVIRONMENT_WORDS = {
    "indoor_blue": "an indoor lab",
    "outdoor_soil_light": "a field with dry light soil",
    "outdoor_soil_dark": "a field with dark moist soil",
}
STAGE_WORDS = ("seedling", "vegetative", "mature")
# Every word the caption templates can emit, plus common prompt words.
CAPTION_VOCAB = sorted(set(
    "a an at in of stage plant plants row growing photo single field outdoor indoor lab with "
    "dry light dark moist soil".split()
    + list(PHENOTYPES) + list(SPECIES) + list(STAGE_WORDS)
))

MANIFEST_SCHEMA = "agridiff.manifest/1"


class EmptyMaskError(ValueError):
    """No plant pixels were found."""


class PoolExhaustedError(ValueError):
    pass


# ------------------------------------------------------------------------ specs


@dataclass(frozen=True)
class PlantSpec:
    species: str = "canola"
    growth_stage: float = 0.5
    phenotype: str = "healthy"
    seed: int = 0
    # geometry multipliers; 1.0 is the species default
    leaf_length: float = 1.0
    leaf_width: float = 1.0
    lean: float = 0.0

    def __post_init__(self):
        if self.species not in SPECIES:
            raise ValueError(f"unknown species {self.species!r}")
        if self.phenotype not in PHENOTYPES:
            raise ValueError(f"unknown phenotype {self.phenotype!r}")
        if not 0.0 <= self.growth_stage <= 1.0:
            raise ValueError("growth_stage must lie in [0, 1]")

    @classmethod
    def random(cls, rng: np.random.Generator, species=None, phenotype=None, growth_stage=None) -> "PlantSpec":
        return cls(
            species=species or str(rng.choice(CROPS)),
            growth_stage=float(rng.uniform(0.0, 1.0)) if growth_stage is None else growth_stage,
            phenotype=phenotype or str(rng.choice(PHENOTYPES)),
            seed=int(rng.integers(0, 2**31 - 1)),
            leaf_length=float(rng.uniform(0.85, 1.15)),
            leaf_width=float(rng.uniform(0.85, 1.15)),
            lean=float(rng.uniform(-0.15, 0.15)),
        )


@dataclass(frozen=True)
class PlacedPlant:
    plant: PlantSpec
    position: tuple[float, float]  # patch centre (x, y) in canvas pixels
    scale: int = 32  # patch side length in pixels


@dataclass(frozen=True)
class SceneSpec:
    background: str = "indoor_blue"
    plants: tuple = ()
    canvas: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        for p in self.plants:
            x, y = p.position
            if not (0 <= x < self.canvas and 0 <= y < self.canvas):
                raise ValueError(f"plant position {p.position} outside canvas")


# -------------------------------------------------------------------- rendering

_LEAF = {  # species -> (base leaf length, width ratio, leaf count range, stem colour)
    "canola": (0.30, 0.42, (2, 6), (0.25, 0.50, 0.15)),
    "soybean": (0.22, 0.80, (3, 8), (0.30, 0.45, 0.18)),
    "foxtail": (0.42, 0.14, (3, 6), (0.35, 0.55, 0.20)),
    "pigweed": (0.26, 0.70, (2, 5), (0.55, 0.22, 0.25)),
    "kochia": (0.12, 0.45, (8, 16), (0.30, 0.45, 0.20)),
}
_COLORS = {
    "healthy": (0.16, 0.56, 0.14),
    "spotted": (0.18, 0.52, 0.14),
    "yellowing": (0.78, 0.74, 0.16),
    "flowering": (0.15, 0.50, 0.13),
}
_SPOT = (0.34, 0.18, 0.07)
_FLOWER = (0.98, 0.88, 0.08)


def _ellipse(xx, yy, cx, cy, a, b, theta):
    c, s = math.cos(theta), math.sin(theta)
    dx, dy = xx - cx, yy - cy
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _segment(xx, yy, p0, p1, width):
    (x0, y0), (x1, y1) = p0, p1
    vx, vy = x1 - x0, y1 - y0
    L2 = vx * vx + vy * vy + 1e-12
    t = np.clip(((xx - x0) * vx + (yy - y0) * vy) / L2, 0.0, 1.0)
    return (xx - (x0 + t * vx)) ** 2 + (yy - (y0 + t * vy)) ** 2 <= width * width


def render_plant(spec: PlantSpec, size: int = 32) -> np.ndarray:
    """Rasterize one plant into an RGBA patch ``(4, size, size)`` with binary alpha."""
    rng = np.random.default_rng(spec.seed)
    S = int(size)
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    base_len, ratio, (nmin, nmax), stem_rgb = _LEAF[spec.species]
    stage = spec.growth_stage
    height = S * (0.40 + 0.48 * stage)
    bottom = (S * 0.5, S * 0.96)
    top = (bottom[0] + spec.lean * height, bottom[1] - height)
    rgb = np.zeros((3, S, S))
    alpha = np.zeros((S, S), dtype=bool)

    def paint(mask, colour, jitter=0.04):
        nonlocal alpha
        col = np.asarray(colour)[:, None] + rng.normal(0.0, jitter, size=(3, 1))
        rgb[:, mask] = np.clip(col, 0, 1)
        alpha |= mask

    stem_w = max(0.6, S * 0.025)
    paint(_segment(xx, yy, bottom, top, stem_w), stem_rgb, 0.02)

    n_leaves = int(round(nmin + (nmax - nmin) * stage))
    leaf_rgb = _COLORS[spec.phenotype]
    leaf_masks = []
    for i in range(n_leaves):
        frac = 0.25 + 0.75 * (i + 1) / (n_leaves + 1)
        sx = bottom[0] + (top[0] - bottom[0]) * frac
        sy = bottom[1] + (top[1] - bottom[1]) * frac
        side = 1 if i % 2 == 0 else -1
        ang = -math.pi / 2 + side * (math.pi / 3 + rng.uniform(-0.3, 0.3))
        a = S * base_len * spec.leaf_length * (0.6 + 0.5 * stage) * (1.1 - 0.4 * frac) / 2
        b = max(0.8, a * ratio * spec.leaf_width)
        cx, cy = sx + a * math.cos(ang), sy + a * math.sin(ang)
        m = _ellipse(xx, yy, cx, cy, a, b, ang)
        leaf_masks.append(m)
        paint(m, leaf_rgb)

    if spec.phenotype == "spotted" and leaf_masks:
        leaves = np.logical_or.reduce(leaf_masks)
        ys, xs = np.nonzero(leaves)
        n_spots = max(3, len(ys) // 12)
        picks = rng.choice(len(ys), size=min(n_spots, len(ys)), replace=False)
        r = max(0.7, S * 0.03)
        spot = np.zeros_like(alpha)
        for k in picks:
            spot |= _ellipse(xx, yy, xs[k] + 0.5, ys[k] + 0.5, r, r, 0.0)
        spot &= leaves
        rgb[:, spot] = np.asarray(_SPOT)[:, None]
    elif spec.phenotype == "flowering":
        r = max(1.0, S * 0.05)
        for _ in range(3 + int(3 * stage)):
            fx = top[0] + rng.uniform(-1.5, 1.5) * r
            fy = top[1] + rng.uniform(-0.5, 2.0) * r
            paint(_ellipse(xx, yy, fx, fy, r, r, 0.0) | _segment(xx, yy, top, (fx, fy), stem_w),
                  _FLOWER, 0.02)

    texture = rng.normal(0.0, 0.025, size=(1, S, S))
    rgb = np.clip(rgb + texture, 0.0, 1.0) * alpha
    return np.concatenate([rgb, alpha[None].astype(np.float64)]).astype(np.float32)


def render_background(tag: str, size: int = 64, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if tag == "indoor_blue":
        base = np.array([0.20, 0.33, 0.74]) + rng.normal(0, 0.02, 3)
        img = base[:, None, None] + rng.normal(0, 0.015, (3, size, size))
    elif tag in ("outdoor_soil_light", "outdoor_soil_dark"):
        base = np.array([0.62, 0.50, 0.37]) if tag.endswith("light") else np.array([0.28, 0.20, 0.13])
        coarse = rng.uniform(-1, 1, (size // 8 + 1, size // 8 + 1))
        value = ndimage.zoom(coarse, size / coarse.shape[0], order=1)[:size, :size]
        img = base[:, None, None] * (1.0 + 0.22 * value[None]) + rng.normal(0, 0.02, (3, size, size))
    else:
        raise ValueError(f"unknown background {tag!r}")
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _paste(canvas: np.ndarray, patch: np.ndarray, x0: int, y0: int) -> np.ndarray:
    """Alpha-blend ``patch`` into ``canvas`` in place; returns the patch's canvas-space alpha."""
    H, W = canvas.shape[1:]
    h, w = patch.shape[1:]
    cx0, cy0 = max(0, x0), max(0, y0)
    cx1, cy1 = min(W, x0 + w), min(H, y0 + h)
    full = np.zeros((H, W), dtype=np.float32)
    if cx1 <= cx0 or cy1 <= cy0:
        return full
    sub = patch[:, cy0 - y0: cy1 - y0, cx0 - x0: cx1 - x0]
    a = sub[3]
    canvas[:, cy0:cy1, cx0:cx1] = a * sub[:3] + (1.0 - a) * canvas[:, cy0:cy1, cx0:cx1]
    full[cy0:cy1, cx0:cx1] = a
    return full


def mask_box(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def render_scene(spec: SceneSpec):
    """Render a scene -> ``(image, masks, boxes)``; one mask and tight box per plant."""
    img = render_background(spec.background, spec.canvas, spec.seed)
    masks, boxes = [], []
    for p in spec.plants:
        patch = render_plant(p.plant, p.scale)
        x0 = int(round(p.position[0] - p.scale / 2))
        y0 = int(round(p.position[1] - p.scale / 2))
        m = _paste(img, patch, x0, y0) > 0.5
        masks.append(m)
        boxes.append(mask_box(m))
    return img, masks, boxes


def single_plant_scene(plant: PlantSpec, background: str = "indoor_blue", canvas: int = 64,
                       scale: int | None = None, seed: int = 0, offset=(0.0, 0.0)) -> SceneSpec:
    scale = scale or int(canvas * 0.8)
    pos = (canvas / 2 + offset[0], canvas / 2 + offset[1])
    return SceneSpec(background, (PlacedPlant(plant, pos, scale),), canvas, seed)


# --------------------------------------------------------------------- captions


def stage_word(stage: float) -> str:
    return STAGE_WORDS[min(2, int(stage * 3))]


def row_caption(background: str, phenotype: str = "healthy", species: str = "soybean",
                stage: str = "vegetative") -> str:
    return f"a row of {phenotype} {species} plants at {stage} stage in {ENVIRONMENT_WORDS[background]}"


def caption_for(spec: SceneSpec) -> str:
    env = ENVIRONMENT_WORDS[spec.background]
    if not spec.plants:
        return f"a photo of {env}"
    p = spec.plants[0].plant
    if len(spec.plants) == 1:
        return f"a {p.phenotype} {p.species} plant at {stage_word(p.growth_stage)} stage in {env}"
    return f"a row of {p.phenotype} {p.species} plants at {stage_word(p.growth_stage)} stage in {env}"


def spec_from_caption(caption: str, rng: np.random.Generator, canvas: int = 64) -> SceneSpec:
    """Render-side inverse of :func:`caption_for`: sample a fresh scene matching the caption."""
    words = caption.lower().split()
    phen = next((w for w in words if w in PHENOTYPES), str(rng.choice(PHENOTYPES)))
    species = next((w for w in words if w in SPECIES), str(rng.choice(CROPS)))
    stage_idx = next((STAGE_WORDS.index(w) for w in words if w in STAGE_WORDS), int(rng.integers(0, 3)))
    bg = next((k for k, v in ENVIRONMENT_WORDS.items() if v in caption.lower()), "indoor_blue")
    stage = float(rng.uniform(stage_idx / 3, (stage_idx + 1) / 3 - 1e-6))
    plant = PlantSpec.random(rng, species=species, phenotype=phen, growth_stage=stage)
    jitter = tuple(rng.uniform(-3, 3, 2))
    return single_plant_scene(plant, bg, canvas, seed=int(rng.integers(0, 2**31 - 1)), offset=jitter)


# ------------------------------------------------------------------ segmentation


def excess_green(img: np.ndarray) -> np.ndarray:
    r, g, b = img[0], img[1], img[2]
    return 2.0 * g - r - b


def plant_mask(img: np.ndarray, threshold: float = 0.15) -> np.ndarray:
    """Raw colour-threshold plant mask (all components)."""
    return excess_green(img) > threshold


def segment_plant(img: np.ndarray, background: str = "indoor_blue", threshold: float = 0.15):
    """Colour-threshold segmentation -> ``(mask, rgba_patch)``.

    Keeps the largest 8-connected component and fills its holes (disease
    spots), then crops to the mask bounds with a transparent background.
    """
    if background not in BACKGROUNDS:
        raise ValueError(f"unknown background {background!r}")
    raw = plant_mask(img, threshold)
    labels, n = ndimage.label(raw, structure=np.ones((3, 3)))
    if n == 0:
        raise EmptyMaskError("no plant pixels found")
    sizes = ndimage.sum(raw, labels, index=np.arange(1, n + 1))
    mask = labels == (1 + int(np.argmax(sizes)))
    mask = ndimage.binary_fill_holes(mask)
    mask = ndimage.binary_closing(mask, structure=np.ones((3, 3)), border_value=0) | mask
    if background == "indoor_blue":
        # hole filling must not re-admit enclosed backdrop
        mask &= ~(img[2] > np.maximum(img[0], img[1]) + 0.1)
    if mask.sum() < 4:
        raise EmptyMaskError("plant component too small")
    x0, y0, x1, y1 = mask_box(mask)
    patch = np.concatenate([img[:, y0:y1, x0:x1] * mask[y0:y1, x0:x1], mask[None, y0:y1, x0:x1]])
    return mask, patch.astype(np.float32)


def component_centroids(img: np.ndarray, threshold: float = 0.15, min_size: int = 4) -> list[tuple[float, float]]:
    labels, n = ndimage.label(plant_mask(img, threshold), structure=np.ones((3, 3)))
    out = []
    for k in range(1, n + 1):
        ys, xs = np.nonzero(labels == k)
        if len(ys) >= min_size:
            out.append((float(xs.mean()) + 0.5, float(ys.mean()) + 0.5))
    return out


def iou_masks(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def iou_boxes(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])  # noqa: E731
    union = area(a) + area(b) - inter
    return inter / union if union > 0 else 0.0


# -------------------------------------------------------------------- composite


@dataclass(frozen=True)
class RowLayout:
    y: float = 0.5  # row centre as a fraction of canvas height
    jitter: float = 2.0  # max pixel jitter applied to each patch centre


def row_positions(patches, canvas: int, layout: RowLayout, seed: int) -> list[tuple[int, int]]:
    """Top-left corners for ``patches`` spread evenly along one row."""
    rng = np.random.default_rng(seed)
    n = len(patches)
    out = []
    for i, p in enumerate(patches):
        h, w = p.shape[1:]
        cx = (i + 0.5) * canvas / n + rng.uniform(-layout.jitter, layout.jitter)
        cy = layout.y * canvas + rng.uniform(-layout.jitter, layout.jitter)
        out.append((int(round(cx - w / 2)), int(round(cy - h / 2))))
    return out


def composite(patches, background: np.ndarray, layout=None, seed: int = 0, labels=None):
    """Alpha-blend RGBA patches onto ``background`` -> ``(image, boxes)``.

    ``layout`` is a :class:`RowLayout` or an explicit list of top-left
    ``(x, y)`` corners. Boxes are ``(x0, y0, x1, y1, label)`` tight around each
    patch's visible opaque pixels; patches clipped out of the canvas entirely
    yield no box.
    """
    canvas = background.copy()
    H, W = canvas.shape[1:]
    for p in patches:
        if p.shape[1] > H or p.shape[2] > W:
            raise ValueError(f"patch {p.shape[1:]} larger than canvas {(H, W)}")
    if not patches:
        return canvas, []
    if layout is None:
        layout = RowLayout()
    positions = row_positions(patches, W, layout, seed) if isinstance(layout, RowLayout) else list(layout)
    if len(positions) != len(patches):
        raise ValueError("layout must give one position per patch")
    labels = labels if labels is not None else [0] * len(patches)
    boxes = []
    for p, (x0, y0), lab in zip(patches, positions, labels):
        a = _paste(canvas, p, int(x0), int(y0))
        b = mask_box(a > 0.5)
        if b is not None:
            boxes.append((*b, int(lab)))
    return canvas, boxes


# -------------------------------------------------------------------- manifests


@dataclass
class Entry:
    id: str
    path: str
    caption: str
    label: int
    provenance: str = "real"
    boxes: list = field(default_factory=list)  # [x0, y0, x1, y1, class_id]
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass
class DatasetManifest:
    entries: list
    split: str = "train"
    root: Path = field(default=Path("."), compare=False)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def image_path(self, e: Entry) -> Path:
        return (self.root / e.path).resolve()

    def load_image(self, e: Entry) -> np.ndarray:
        return load_png(self.image_path(e))

    def labels(self) -> list[int]:
        return [e.label for e in self.entries]

    def subset(self, entries, split=None) -> "DatasetManifest":
        return DatasetManifest(list(entries), split or self.split, self.root, dict(self.meta))

    def to_dict(self) -> dict:
        return {"schema": MANIFEST_SCHEMA, "split": self.split, "meta": self.meta,
                "entries": [asdict(e) for e in self.entries]}

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        for e in d["entries"]:
            # relative paths keep a run directory relocatable
            e["path"] = os.path.relpath((self.root / e["path"]).resolve(), path.parent.resolve())
        path.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"{path}: unsupported manifest schema {d.get('schema')!r}")
        return cls([Entry(**e) for e in d["entries"]], d.get("split", "train"), path.parent, d.get("meta", {}))

    def validate(self, check_paths: bool = True) -> None:
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ValueError(f"duplicate id {e.id}")
            seen.add(e.id)
            if check_paths and not self.image_path(e).exists():
                raise FileNotFoundError(self.image_path(e))
            for b in e.boxes:
                x0, y0, x1, y1 = b[:4]
                if not (0 <= x0 < x1 <= e.width and 0 <= y0 < y1 <= e.height):
                    raise ValueError(f"{e.id}: box {b} outside image")


def save_png(path, img: np.ndarray, text: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.round(np.asarray(img)[:3].transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    info = PngImagePlugin.PngInfo()
    for k, v in sorted((text or {}).items()):
        info.add_text(k, str(v))
    Image.fromarray(arr, "RGB").save(path, format="PNG", pnginfo=info)


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit storage."""
    return (np.clip(np.round(img * 255.0), 0, 255) / 255.0).astype(np.float32)


# ------------------------------------------------------------- dataset builders


def random_scene(domain: str, rng: np.random.Generator, canvas: int = 64, phenotype=None,
                 species=None, growth_stage=None) -> SceneSpec:
    plant = PlantSpec.random(rng, species=species, phenotype=phenotype, growth_stage=growth_stage)
    if domain == "indoor":
        bg = "indoor_blue"
    elif domain == "outdoor":
        bg = str(rng.choice(BACKGROUNDS[1:]))
    else:
        raise ValueError(f"unknown domain {domain!r}")
    jitter = tuple(rng.uniform(-3, 3, 2))
    return single_plant_scene(plant, bg, canvas, seed=int(rng.integers(0, 2**31 - 1)), offset=jitter)


LABEL_SETS = {"phenotype": PHENOTYPES, "species": SPECIES, "stage": STAGE_WORDS}


def scene_label(spec: SceneSpec, label_by: str = "phenotype") -> int:
    p = spec.plants[0].plant
    value = {"phenotype": p.phenotype, "species": p.species, "stage": stage_word(p.growth_stage)}[label_by]
    return LABEL_SETS[label_by].index(value)


def caption_label(caption: str, label_by: str = "phenotype") -> int:
    words = caption.lower().split()
    return next(i for i, v in enumerate(LABEL_SETS[label_by]) if v in words)


def generate_dataset(out_dir, domain: str, n: int, seed: int = 0, canvas: int = 64,
                     provenance: str = "real", prefix: str | None = None, text: dict | None = None,
                     balanced: bool = True, label_by: str = "phenotype") -> DatasetManifest:
    """Render ``n`` single-plant captioned images labelled by phenotype, species or growth stage."""
    if label_by not in LABEL_SETS:
        raise ValueError(f"unknown label set {label_by!r}")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    prefix = prefix or domain
    classes = LABEL_SETS[label_by]
    entries = []
    for i in range(n):
        kw = {}
        if balanced:
            c = classes[i % len(classes)]
            if label_by == "stage":
                j = STAGE_WORDS.index(c)
                kw["growth_stage"] = float(rng.uniform(j / 3, (j + 1) / 3 - 1e-6))
            else:
                kw[label_by] = c
        spec = random_scene(domain, rng, canvas, **kw)
        img, _, boxes = render_scene(spec)
        rel = f"images/{prefix}_{i:05d}.png"
        save_png(out_dir / rel, img, text)
        entries.append(Entry(f"{prefix}_{i:05d}", rel, caption_for(spec), scene_label(spec, label_by), provenance,
                             [[*b, 0] for b in boxes if b], canvas, canvas))
    return DatasetManifest(entries, "all", out_dir, {"domain": domain, "seed": seed, "label_by": label_by,
                                                     "classes": list(classes)})


def detection_scene(rng: np.random.Generator, canvas: int = 64, n_crops=None, n_weeds=None, crop_size=(14, 20),
                    background: str | None = None):
    """Soybean row composited from segmented indoor renders, with weeds overlaid at random.

    ``crop_size`` is the half-open range of crop patch sides in pixels; the
    soil ``background`` is drawn at random when omitted.
    """
    n_crops = n_crops or int(rng.integers(3, 7))
    patches, labels = [], []
    for _ in range(n_crops):
        plant = PlantSpec.random(rng, species="soybean", phenotype="healthy")
        size = int(rng.integers(*crop_size))
        img, _, _ = render_scene(single_plant_scene(plant, "indoor_blue", size + 4, scale=size,
                                                    seed=int(rng.integers(1 << 30))))
        _, patch = segment_plant(img, "indoor_blue")
        patches.append(patch)
        labels.append(0)
    bg = render_background(background or str(rng.choice(BACKGROUNDS[1:])), canvas, int(rng.integers(1 << 30)))
    img, boxes = composite(patches, bg, RowLayout(y=float(rng.uniform(0.35, 0.65))), int(rng.integers(1 << 30)), labels)
    weeds = []
    n_weeds = int(rng.integers(1, 4)) if n_weeds is None else n_weeds
    for _ in range(n_weeds):
        cls = int(rng.integers(1, 4))
        size = int(rng.integers(10, 16))
        weed = render_plant(PlantSpec.random(rng, species=WEEDS[cls - 1], phenotype="healthy"), size)
        pos = (int(rng.integers(0, canvas - size)), int(rng.integers(0, canvas - size)))
        weeds.append((weed, pos, cls))
    if weeds:
        img, wboxes = composite([w[0] for w in weeds], img, [w[1] for w in weeds], 0, [w[2] for w in weeds])
        boxes = boxes + wboxes
    return img, boxes


def row_scene(rng: np.random.Generator, background: str, canvas: int = 64):
    """Weed-free row of 2-4 large soybean plants; the toy layout used to probe img2img structure."""
    img, boxes = detection_scene(rng, canvas, n_crops=int(rng.integers(2, 5)), n_weeds=0, crop_size=(22, 30),
                                 background=background)
    return img, boxes, row_caption(background)


def training_corpus(n_single: int, n_rows: int = 0, seed: int = 0, canvas: int = 64):
    """Quantized images and captions: single plants alternating indoor/outdoor, then row scenes."""
    rng = np.random.default_rng(seed)
    imgs, caps = [], []
    for i in range(n_single):
        spec = random_scene("indoor" if i % 2 == 0 else "outdoor", rng, canvas, phenotype=PHENOTYPES[(i // 2) % 4])
        img, _, _ = render_scene(spec)
        imgs.append(quantize(img))
        caps.append(caption_for(spec))
    for i in range(n_rows):
        img, _, cap = row_scene(rng, BACKGROUNDS[1 + i % 2], canvas)
        imgs.append(quantize(img))
        caps.append(cap)
    return np.stack(imgs), caps


def build_ratio_datasets(real: DatasetManifest, synthetic_pool: DatasetManifest, ratios, seed: int = 0):
    """Nested real+synthetic manifests, one per ratio (percent of the real count)."""
    ratios = list(ratios)
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative")
    n_real = len(real)
    need = max((int(math.floor(r * n_real / 100)) for r in ratios), default=0)
    if need > len(synthetic_pool):
        raise PoolExhaustedError(f"ratio needs {need} synthetic entries, pool has {len(synthetic_pool)}")
    order = np.random.default_rng(seed).permutation(len(synthetic_pool))
    real_entries = list(real.entries)
    pool_entries = [synthetic_pool.entries[i] for i in order]
    if Path(synthetic_pool.root).resolve() != Path(real.root).resolve():
        real_entries = [_absolute(real, e) for e in real_entries]
        pool_entries = [_absolute(synthetic_pool, e) for e in pool_entries]
    out = []
    for r in ratios:
        k = int(math.floor(r * n_real / 100))
        out.append(DatasetManifest(real_entries + pool_entries[:k], f"ratio_{r:g}", real.root,
                                   {**real.meta, "ratio": r, "n_real": n_real, "n_synthetic": k}))
    return out


def _absolute(m: DatasetManifest, e: Entry) -> Entry:
    return Entry(**{**asdict(e), "path": str(m.image_path(e))})


def merge_manifests(manifests, split: str = "merged") -> DatasetManifest:
    """Concatenate manifests with differing roots; paths become absolute until saved."""
    manifests = list(manifests)
    entries = [_absolute(m, e) for m in manifests for e in m.entries]
    return DatasetManifest(entries, split, manifests[0].root if manifests else Path("."), {})


def export_detection_labels(manifest: DatasetManifest, out_dir, class_names=DETECTION_CLASSES,
                            text: dict | None = None) -> list[Path]:
    """One ``<id>.txt`` per image with ``class cx cy w h`` lines normalised to [0, 1]."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for e in manifest.entries:
        lines = []
        for b in e.boxes:
            x0, y0, x1, y1 = b[:4]
            cls = int(b[4]) if len(b) > 4 else 0
            cx, cy = (x0 + x1) / 2 / e.width, (y0 + y1) / 2 / e.height
            w, h = (x1 - x0) / e.width, (y1 - y0) / e.height
            lines.append(f"{cls} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}")
        p = out_dir / f"{e.id}.txt"
        p.write_text("".join(line + "\n" for line in lines))
        files.append(p)
    class_map = {"classes": list(class_names), **(text or {})}
    (out_dir / "classes.json").write_text(json.dumps(class_map, indent=1, sort_keys=True) + "\n")
    return files


def parse_detection_labels(path, width: int, height: int) -> list[tuple]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        c, cx, cy, w, h = line.split()
        cx, cy, w, h = float(cx) * width, float(cy) * height, float(w) * width, float(h) * height
        out.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, int(c)))
    return out
