"""Deterministic synthetic bi-temporal scenes for all four tasks.

A scene is a value-noise background rendered identically into both frames
(plus a mild global illumination difference), with parametric objects (rect,
ellipse, L-shaped block) applied per event: ``appear`` draws only into the
second frame, ``disappear`` only into the first, ``persist`` into both, and
``damage-k`` draws the object into both frames but perturbs the second with
severity k (1 = intact .. 4 = destroyed).  Labels are exact by construction.

All randomness flows through counter-based Philox generators keyed by the
scene seed, so generation is bit-reproducible and parallelizable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from change3d.captioner import Vocabulary

VALID_SIZES = (64, 128, 256)
SHAPES = ("rect", "ellipse", "lpoly")
EVENTS = ("appear", "disappear", "persist", "damage-1", "damage-2", "damage-3",
          "damage-4")

# semantic classes (scd): 0 reserved for no-change in the label maps
SEM_CLASSES = {1: "ground", 2: "vegetation", 3: "building", 4: "water"}
SEM_COLORS = {
    1: (0.60, 0.50, 0.35),
    2: (0.15, 0.50, 0.20),
    3: (0.55, 0.55, 0.60),
    4: (0.15, 0.35, 0.65),
}
DAMAGE_CLASSES = {1: "non-damage", 2: "minor", 3: "major", 4: "destroyed"}

CC_COLORS = ("red", "green", "blue", "yellow", "gray", "orange", "purple", "white")
CC_COLOR_RGB = {
    "red": (0.75, 0.15, 0.15), "green": (0.15, 0.60, 0.20),
    "blue": (0.20, 0.30, 0.70), "yellow": (0.80, 0.75, 0.20),
    "gray": (0.50, 0.50, 0.50), "orange": (0.85, 0.50, 0.15),
    "purple": (0.55, 0.20, 0.60), "white": (0.90, 0.90, 0.88),
}
CC_SHAPE_WORDS = {"rect": "rectangle", "ellipse": "ellipse", "lpoly": "block"}
REGION_WORDS = [["top", "left"], ["top"], ["top", "right"],
                ["left"], ["center"], ["right"],
                ["bottom", "left"], ["bottom"], ["bottom", "right"]]
NO_CHANGE_CAPTIONS = ("there is no change",
                      "the scene remains the same",
                      "nothing has changed")


@dataclass
class ObjectSpec:
    shape: str                      # rect | ellipse | lpoly
    position: tuple[float, float]   # (cy, cx) center, pixels
    scale: tuple[float, float]      # (hy, hx) half extents, pixels
    cls: int                        # semantic class (scd/bda) or CC color index
    event: str

    def validate(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.event not in EVENTS:
            raise ValueError(f"unknown event {self.event!r}")


@dataclass
class SceneSpec:
    seed: int
    size: int = 128
    background: dict = field(default_factory=lambda: {
        "octaves": 4, "contrast": 0.25, "illum_delta": 0.03})
    objects: list[ObjectSpec] = field(default_factory=list)

    def validate(self):
        if self.size not in VALID_SIZES:
            raise ValueError(f"size must be one of {VALID_SIZES}")
        masks = []
        for obj in self.objects:
            obj.validate()
            masks.append((obj.cls, raster_mask(obj, self.size)))
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                if masks[i][0] != masks[j][0] and (masks[i][1] & masks[j][1]).any():
                    raise ValueError(
                        f"objects {i} and {j} overlap with conflicting classes")
        return self


@dataclass
class TaskSample:
    sample_id: str
    i1: np.ndarray                  # (3, H, W) float32 in [0, 1]
    i2: np.ndarray
    labels: dict[str, np.ndarray]   # task-dependent uint8 maps
    captions: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# rendering

def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    res = grid.shape[0] - 1
    coords = np.linspace(0.0, res, size)
    i0 = np.floor(coords).astype(int)
    i0 = np.minimum(i0, res - 1)
    frac = coords - i0
    rows = grid[i0][:, i0]
    r10 = grid[i0 + 1][:, i0]
    r01 = grid[i0][:, i0 + 1]
    r11 = grid[i0 + 1][:, i0 + 1]
    fy = frac[:, None]
    fx = frac[None, :]
    return (rows * (1 - fy) * (1 - fx) + r10 * fy * (1 - fx)
            + r01 * (1 - fy) * fx + r11 * fy * fx)


def value_noise(size: int, rng, octaves: int = 4, base_res: int = 4) -> np.ndarray:
    acc = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        res = min(base_res * (2 ** o), size)
        grid = rng.random((res + 1, res + 1))
        acc += amp * _bilinear_upsample(grid, size)
        total += amp
        amp *= 0.5
    return acc / total


def raster_mask(obj: ObjectSpec, size: int) -> np.ndarray:
    cy, cx = obj.position
    hy, hx = obj.scale
    yy, xx = np.mgrid[0:size, 0:size]
    if obj.shape == "rect":
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    if obj.shape == "ellipse":
        return ((yy - cy) / max(hy, 1e-9)) ** 2 + ((xx - cx) / max(hx, 1e-9)) ** 2 <= 1.0
    # L-shaped block: full rectangle minus its upper-right quadrant
    full = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    cut = (yy < cy) & (xx > cx)
    return full & ~cut


def _texture(color_rgb, mask, size, rng, noise_amp=0.05):
    tex = np.empty((3, size, size))
    noise = rng.normal(0.0, noise_amp, size=(size, size))
    for ch in range(3):
        tex[ch] = color_rgb[ch] + noise
    return np.clip(tex, 0.0, 1.0) * mask


def _paint(img, mask, tex):
    img[:, mask] = tex[:, mask]


def _damage_render(tex, mask, severity, size, rng):
    """Second-frame appearance of a damaged object."""
    out = tex.copy()
    if severity == 1:
        return out
    if severity == 2:
        out = out * 0.92 + rng.normal(0.0, 0.06, size=(3, size, size))
    elif severity == 3:
        out = out * 0.75 + rng.normal(0.0, 0.12, size=(3, size, size))
        holes = rng.random((size, size)) < 0.15
        out[:, holes] *= 0.4
    else:  # destroyed: rubble
        rubble = rng.normal(0.38, 0.14, size=(size, size))
        out = np.stack([rubble * 1.05, rubble, rubble * 0.9])
    return np.clip(out, 0.0, 1.0) * mask


def render_scene(spec: SceneSpec, task: str):
    """Render both frames and per-object masks; returns (i1, i2, masks)."""
    spec.validate()
    size = spec.size
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(
        [spec.seed & 0xFFFFFFFFFFFFFFFF, 0xB6])))
    bg = value_noise(size, rng, spec.background.get("octaves", 4))
    contrast = spec.background.get("contrast", 0.25)
    base = SEM_COLORS[1]
    i1 = np.stack([base[ch] + contrast * (bg - 0.5) for ch in range(3)])
    i1 = np.clip(i1, 0.0, 1.0)
    delta = spec.background.get("illum_delta", 0.03)
    i2 = np.clip(i1 * (1.0 + delta), 0.0, 1.0)

    masks = []
    for idx, obj in enumerate(spec.objects):
        orng = np.random.Generator(np.random.Philox(np.random.SeedSequence(
            [spec.seed & 0xFFFFFFFFFFFFFFFF, 0x0B, idx])))
        mask = raster_mask(obj, size)
        masks.append(mask)
        if task == "cc":
            color = CC_COLOR_RGB[CC_COLORS[obj.cls - 1]]
        else:
            color = SEM_COLORS.get(obj.cls, SEM_COLORS[1])
        tex = _texture(color, mask, size, orng)
        if obj.event == "appear":
            _paint(i2, mask, tex)
        elif obj.event == "disappear":
            _paint(i1, mask, tex)
        elif obj.event == "persist":
            _paint(i1, mask, tex)
            _paint(i2, mask, np.clip(tex * (1.0 + delta), 0.0, 1.0) * mask)
        else:
            severity = int(obj.event.split("-")[1])
            _paint(i1, mask, tex)
            _paint(i2, mask, _damage_render(tex, mask, severity, size, orng))
    return i1.astype(np.float32), i2.astype(np.float32), masks


def _region_words(obj: ObjectSpec, size: int) -> list[str]:
    cy, cx = obj.position
    r = min(int(cy * 3 / size), 2)
    c = min(int(cx * 3 / size), 2)
    return REGION_WORDS[r * 3 + c]


def captions_for(spec: SceneSpec) -> list[str]:
    """Three template references describing the (single) change event."""
    changing = [o for o in spec.objects if o.event in ("appear", "disappear")]
    if not changing:
        return list(NO_CHANGE_CAPTIONS)
    obj = changing[0]
    color = CC_COLORS[obj.cls - 1]
    shape = CC_SHAPE_WORDS[obj.shape]
    region = " ".join(_region_words(obj, spec.size))
    verb = "appears" if obj.event == "appear" else "disappears"
    past = "appeared" if obj.event == "appear" else "disappeared"
    return [
        f"a {color} {shape} {verb} in the {region} region",
        f"in the {region} region a {color} {shape} {verb}",
        f"one {color} {shape} has {past} at the {region} of the scene",
    ]


def generate(spec: SceneSpec, task: str) -> TaskSample:
    """Render a scene and derive exact labels for one task."""
    if task not in ("bcd", "scd", "bda", "cc"):
        raise ValueError(f"unknown task {task!r}")
    i1, i2, masks = render_scene(spec, task)
    size = spec.size
    labels: dict[str, np.ndarray] = {}
    captions: list[str] = []

    if task in ("bcd", "cc"):
        binary = np.zeros((size, size), dtype=np.uint8)
        for obj, mask in zip(spec.objects, masks):
            if obj.event in ("appear", "disappear"):
                binary[mask] = 1
        labels["binary"] = binary
        if task == "cc":
            captions = captions_for(spec)
    elif task == "scd":
        binary = np.zeros((size, size), dtype=np.uint8)
        sem1 = np.zeros((size, size), dtype=np.uint8)
        sem2 = np.zeros((size, size), dtype=np.uint8)
        for obj, mask in zip(spec.objects, masks):
            if obj.event == "appear":
                binary[mask] = 1
                sem1[mask] = 1  # bare ground before the object existed
                sem2[mask] = obj.cls
            elif obj.event == "disappear":
                binary[mask] = 1
                sem1[mask] = obj.cls
                sem2[mask] = 1
        labels["binary"] = binary
        labels["sem1"] = sem1
        labels["sem2"] = sem2
    elif task == "bda":
        loc = np.zeros((size, size), dtype=np.uint8)
        damage = np.zeros((size, size), dtype=np.uint8)
        for obj, mask in zip(spec.objects, masks):
            if obj.event.startswith("damage-"):
                loc[mask] = 1
                damage[mask] = int(obj.event.split("-")[1])
        labels["loc"] = loc
        labels["damage"] = damage
    return TaskSample(sample_id=f"s{spec.seed:016x}", i1=i1, i2=i2,
                      labels=labels, captions=captions)


# ---------------------------------------------------------------------------
# random scene specs

def _sample_objects(rng, task: str, size: int, class_counts=None):
    objects = []
    margin = size // 8

    def place(shape=None):
        shape = shape or SHAPES[rng.integers(0, len(SHAPES))]
        hy = float(rng.uniform(size / 12, size / 5))
        hx = float(rng.uniform(size / 12, size / 5))
        cy = float(rng.uniform(margin, size - margin))
        cx = float(rng.uniform(margin, size - margin))
        return shape, (cy, cx), (hy, hx)

    def no_overlap(candidate, others):
        m = raster_mask(candidate, size)
        return not any((m & raster_mask(o, size)).any() for o in others)

    def add(cls, event, tries=40):
        for _ in range(tries):
            shape, pos, scale = place()
            cand = ObjectSpec(shape, pos, scale, cls, event)
            if no_overlap(cand, objects):
                objects.append(cand)
                return True
        return False

    if task in ("bcd", "scd"):
        if class_counts is None:
            n = int(rng.integers(1, 5))
            classes = [int(rng.integers(2, 5)) for _ in range(n)]
        else:
            classes = [cls for cls, cnt in sorted(class_counts.items())
                       for _ in range(cnt)]
        for cls in classes:
            add(cls, "appear" if rng.random() < 0.5 else "disappear")
        for _ in range(int(rng.integers(0, 3))):
            add(int(rng.integers(2, 5)), "persist")
    elif task == "bda":
        n = int(rng.integers(2, 6))
        for i in range(n):
            # cycle severities so every damage class stays represented
            severity = (i % 4) + 1 if class_counts is None else None
            if class_counts is not None:
                remaining = [cls for cls, cnt in sorted(class_counts.items())
                             for _ in range(cnt)]
                if i < len(remaining):
                    severity = remaining[i]
                else:
                    break
            add(3, f"damage-{severity}")
        for _ in range(int(rng.integers(0, 3))):
            add(int(rng.choice([2, 4])), "persist")
    else:  # cc: zero or one event
        if rng.random() < 0.9:
            cls = int(rng.integers(1, len(CC_COLORS) + 1))
            add(cls, "appear" if rng.random() < 0.5 else "disappear")
    return objects


def random_scene_spec(task: str, seed: int, size: int = 128,
                      class_counts: dict | None = None) -> SceneSpec:
    """Deterministic random scene: same (task, seed, size) -> same spec."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(
        [seed & 0xFFFFFFFFFFFFFFFF, 0x5C])))
    background = {"octaves": 4,
                  "contrast": float(rng.uniform(0.15, 0.3)),
                  "illum_delta": float(rng.uniform(-0.04, 0.04))}
    objects = _sample_objects(rng, task, size, class_counts)
    return SceneSpec(seed=seed, size=size, background=background, objects=objects)


# ---------------------------------------------------------------------------
# captions vocabulary

def build_vocabulary() -> Vocabulary:
    words = set()
    for caption in NO_CHANGE_CAPTIONS:
        words.update(caption.split())
    words.update(["a", "in", "the", "region", "of", "scene", "one", "has", "at",
                  "appears", "disappears", "appeared", "disappeared"])
    words.update(CC_COLORS)
    words.update(CC_SHAPE_WORDS.values())
    for rw in REGION_WORDS:
        words.update(rw)
    return Vocabulary.from_words(sorted(words))


# ---------------------------------------------------------------------------
# dataset I/O

MANIFEST_VERSION = 1
LABEL_KEYS = {"bcd": ("binary",), "scd": ("binary", "sem1", "sem2"),
              "bda": ("loc", "damage"), "cc": ("binary",)}


def _save_image(path: str, img: np.ndarray):
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def _load_image(path: str) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _save_label(path: str, labels: np.ndarray):
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def _load_label(path: str) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint8)


def class_palette(task: str) -> dict:
    if task == "scd":
        return {"0": "no-change", **{str(k): v for k, v in SEM_CLASSES.items()}}
    if task == "bda":
        return {"0": "background", **{str(k): v for k, v in DAMAGE_CLASSES.items()}}
    return {"0": "no-change", "1": "change"}


def write_dataset(samples, out_dir: str, task: str) -> str:
    """Write PNGs plus manifest.json; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    entries = []
    for s in samples:
        rel_t1 = f"images/{s.sample_id}_t1.png"
        rel_t2 = f"images/{s.sample_id}_t2.png"
        _save_image(os.path.join(out_dir, rel_t1), s.i1)
        _save_image(os.path.join(out_dir, rel_t2), s.i2)
        entry = {"id": s.sample_id, "t1": rel_t1, "t2": rel_t2, "labels": {}}
        for key in LABEL_KEYS[task]:
            rel = f"labels/{s.sample_id}_{key}.png"
            _save_label(os.path.join(out_dir, rel), s.labels[key])
            entry["labels"][key] = rel
        if task == "cc":
            entry["captions"] = list(s.captions)
        entries.append(entry)
    manifest = {"version": MANIFEST_VERSION, "task": task,
                "class_palette": class_palette(task), "entries": entries}
    if task == "cc":
        manifest["vocabulary"] = build_vocabulary().tokens
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return path


class SynthDataset:
    """Random access over a written dataset; images come back in [0, 1]."""

    def __init__(self, manifest_path: str):
        self.root = os.path.dirname(os.path.abspath(manifest_path))
        with open(manifest_path, encoding="utf-8") as fh:
            self.manifest = json.load(fh)
        if self.manifest.get("version") != MANIFEST_VERSION:
            raise ValueError(
                f"manifest version {self.manifest.get('version')} != {MANIFEST_VERSION}")
        self.task = self.manifest["task"]
        self.entries = self.manifest["entries"]
        for e in self.entries:
            for rel in [e["t1"], e["t2"], *e["labels"].values()]:
                if not os.path.exists(os.path.join(self.root, rel)):
                    raise FileNotFoundError(
                        f"manifest entry {e['id']} references missing file {rel}")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i: int) -> TaskSample:
        e = self.entries[i]
        labels = {k: _load_label(os.path.join(self.root, rel))
                  for k, rel in e["labels"].items()}
        return TaskSample(sample_id=e["id"],
                          i1=_load_image(os.path.join(self.root, e["t1"])),
                          i2=_load_image(os.path.join(self.root, e["t2"])),
                          labels=labels, captions=list(e.get("captions", [])))

    def vocabulary(self) -> Vocabulary | None:
        tokens = self.manifest.get("vocabulary")
        return Vocabulary(tokens) if tokens else None


def read_dataset(manifest_path: str):
    """Iterate TaskSamples in manifest order."""
    ds = SynthDataset(manifest_path)
    for i in range(len(ds)):
        yield ds[i]


def split_manifest(manifest: dict, ratios, seed: int) -> dict[str, dict]:
    """Disjoint, exhaustive, seed-deterministic train/val/test partition."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be 3 values summing to 1, got {ratios}")
    entries = list(manifest["entries"])
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(
        [seed & 0xFFFFFFFFFFFFFFFF, 0x59])))
    order = rng.permutation(len(entries))
    n = len(entries)
    cut1 = round(ratios[0] * n)
    cut2 = round((ratios[0] + ratios[1]) * n)
    parts = {"train": order[:cut1], "val": order[cut1:cut2], "test": order[cut2:]}
    out = {}
    for name, idxs in parts.items():
        m = {k: v for k, v in manifest.items() if k != "entries"}
        m["entries"] = [entries[i] for i in sorted(idxs)]
        out[name] = m
    return out


# ---------------------------------------------------------------------------
# resize helpers (shared with training augmentation)

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """(C, H, W) float -> (C, out_h, out_w), align-corners-false convention."""
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    p00 = img[:, y0][:, :, x0]
    p10 = img[:, y1][:, :, x0]
    p01 = img[:, y0][:, :, x1]
    p11 = img[:, y1][:, :, x1]
    out = (p00 * (1 - fy) * (1 - fx) + p10 * fy * (1 - fx)
           + p01 * (1 - fy) * fx + p11 * fy * fx)
    return out.astype(img.dtype)


def resize_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = labels.shape
    ys = np.clip(((np.arange(out_h) + 0.5) * h / out_h).astype(int), 0, h - 1)
    xs = np.clip(((np.arange(out_w) + 0.5) * w / out_w).astype(int), 0, w - 1)
    return labels[ys][:, xs]
