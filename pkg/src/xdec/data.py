"""Synthetic shapes corpus: generation, rasterization, disk format, batching.

Scenes hold 1..max_objects colored shapes on a gray canvas, rasterized with
hard integer predicates so every pixel has an exact owner. The canvas itself
is a real segment with category "canvas"; object categories are
"{color} {shape}" composites. Everything is a pure function of the seed.

Disk layout of one split directory:
    manifest.json          version, counts, seed, categories, vocabulary,
                           grammar id, per-file sha256 checksums
    images/000000.png      8-bit RGB
    panoptic/000000.png    16-bit single channel segment ids
    annotations.jsonl      one JSON object per sample
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .config import DataConfig, TrainConfig
from .errors import FormatError, InputError
from .vocab import Vocabulary

SHAPES = ("circle", "cross", "ring", "square", "triangle")
COLORS = ("blue", "green", "purple", "red", "yellow")

COLOR_RGB = {
    "blue": (40, 70, 220),
    "green": (40, 170, 60),
    "purple": (140, 60, 180),
    "red": (215, 45, 45),
    "yellow": (230, 200, 40),
}
CANVAS_RGB = (190, 190, 190)

CANVAS_CATEGORY = "canvas"
CANVAS_SEGMENT_ID = 1  # object segments start at 2
GRAMMAR_ID = "shapes-v1"
MANIFEST_VERSION = 1

_GRAMMAR_WORDS = (
    "a",
    "an",
    "and",
    "background",
    "canvas",
    "color",
    "image",
    "is",
    "left",
    "of",
    "right",
    "the",
    "what",
)


def category_names() -> tuple[str, ...]:
    """All real categories: 25 color-shape composites plus the canvas."""
    names = [f"{c} {s}" for c in COLORS for s in SHAPES]
    names.append(CANVAS_CATEGORY)
    return tuple(names)


def build_vocabulary() -> Vocabulary:
    return Vocabulary.from_words(_GRAMMAR_WORDS + COLORS + SHAPES)


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    cy: int
    cx: int
    radius: int

    @property
    def category(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class SceneSpec:
    canvas: int
    objects: tuple[ObjectSpec, ...]


def rasterize_shape(shape: str, cy: int, cx: int, radius: int, size: int) -> np.ndarray:
    """Boolean mask of one shape on a size x size grid. Integer predicates
    only, so the result is reproducible bit for bit."""
    if shape not in SHAPES:
        raise InputError(f"unknown shape {shape!r}")
    if radius < 2:
        raise InputError("radius must be >= 2")
    ys, xs = np.mgrid[0:size, 0:size]
    dy = ys - cy
    dx = xs - cx
    if shape == "circle":
        return dx * dx + dy * dy <= radius * radius
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= radius
    if shape == "triangle":
        # upward triangle: apex one pixel wide, base 2*radius+1 wide
        return (np.abs(dy) <= radius) & (2 * np.abs(dx) <= dy + radius)
    if shape == "cross":
        arm = max(1, radius // 3)
        upright = (np.abs(dx) <= arm) & (np.abs(dy) <= radius)
        across = (np.abs(dy) <= arm) & (np.abs(dx) <= radius)
        return upright | across
    # ring: annulus with an open center that stays canvas-colored
    inner = max(1, radius // 2)
    rr = dx * dx + dy * dy
    return (rr <= radius * radius) & (rr > inner * inner)


def generate_scene(seed: int, cfg: DataConfig) -> SceneSpec:
    """Rejection-sample a scene. Objects never share a (color, shape) pair
    and keep Chebyshev separation >= r_i + r_j + 2, so masks are disjoint."""
    rng = np.random.default_rng(seed)
    want = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: list[ObjectSpec] = []
    used = set()
    attempts = 0
    while len(objects) < want and attempts < 500:
        attempts += 1
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        if (color, shape) in used:
            continue
        radius = int(rng.integers(cfg.radius_min, cfg.radius_max + 1))
        lo = radius + 1
        hi = cfg.canvas - radius - 2
        if hi < lo:
            continue
        cy = int(rng.integers(lo, hi + 1))
        cx = int(rng.integers(lo, hi + 1))
        clear = all(
            max(abs(cy - o.cy), abs(cx - o.cx)) >= radius + o.radius + 2
            for o in objects
        )
        if clear:
            objects.append(ObjectSpec(shape, color, cy, cx, radius))
            used.add((color, shape))
    if not objects:
        raise InputError(f"could not place any object for seed {seed}")
    return SceneSpec(canvas=cfg.canvas, objects=tuple(objects))


def render_scene(scene: SceneSpec):
    """Returns (image, segment_map, segments).

    image: float32 (H, W, 3) in [0, 1], exactly uint8/255 values
    segment_map: int32 (H, W), canvas id 1, objects 2.. in scene order
    segments: tuple of (segment_id, category_name)
    """
    size = scene.canvas
    rgb = np.empty((size, size, 3), dtype=np.uint8)
    rgb[:] = np.array(CANVAS_RGB, dtype=np.uint8)
    seg = np.full((size, size), CANVAS_SEGMENT_ID, dtype=np.int32)
    segments = [(CANVAS_SEGMENT_ID, CANVAS_CATEGORY)]
    for k, obj in enumerate(scene.objects):
        mask = rasterize_shape(obj.shape, obj.cy, obj.cx, obj.radius, size)
        seg_id = CANVAS_SEGMENT_ID + 1 + k
        rgb[mask] = np.array(COLOR_RGB[obj.color], dtype=np.uint8)
        seg[mask] = seg_id
        segments.append((seg_id, obj.category))
    image = rgb.astype(np.float32) / 255.0
    return image, seg, tuple(segments)


def caption_for(scene: SceneSpec) -> str:
    """Left-to-right reading of the scene, e.g. "a red circle and a blue ring"."""
    ordered = sorted(scene.objects, key=lambda o: (o.cx, o.cy))
    return " and ".join(f"a {o.color} {o.shape}" for o in ordered)


def referring_for(scene: SceneSpec) -> tuple[tuple[str, int], ...]:
    """One phrase per referable object. Unique (color, shape) pairs get
    "the {color} {shape}"; if a hand-built scene duplicates a pair, the
    outermost two fall back to "the left/right {shape}" and any middle
    duplicates are skipped."""
    groups: dict[tuple[str, str], list[int]] = {}
    for k, obj in enumerate(scene.objects):
        groups.setdefault((obj.color, obj.shape), []).append(k)
    phrases: list[tuple[str, int]] = []
    for (color, shape), members in groups.items():
        if len(members) == 1:
            k = members[0]
            phrases.append((f"the {color} {shape}", CANVAS_SEGMENT_ID + 1 + k))
        else:
            members = sorted(members, key=lambda k: scene.objects[k].cx)
            phrases.append((f"the left {shape}", CANVAS_SEGMENT_ID + 1 + members[0]))
            phrases.append((f"the right {shape}", CANVAS_SEGMENT_ID + 1 + members[-1]))
    phrases.sort(key=lambda pair: pair[1])
    return tuple(phrases)


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    segment_map: np.ndarray
    segments: tuple[tuple[int, str], ...]
    caption: str
    referring: tuple[tuple[str, int], ...]
    scene: SceneSpec | None = None


def generate_sample(seed: int, cfg: DataConfig) -> Sample:
    scene = generate_scene(seed, cfg)
    image, seg_map, segments = render_scene(scene)
    return Sample(
        image=image,
        segment_map=seg_map,
        segments=segments,
        caption=caption_for(scene),
        referring=referring_for(scene),
        scene=scene,
    )


def generate_corpus(seed: int, count: int, cfg: DataConfig, skip_captions=()):
    """Generate `count` samples with mutually distinct captions, skipping any
    caption in `skip_captions`. Returns (samples, next_seed)."""
    seen = set(skip_captions)
    samples = []
    cursor = seed
    limit = seed + 200 * max(count, 1) + 10000
    while len(samples) < count:
        if cursor >= limit:
            raise InputError(
                f"could not draw {count} caption-distinct samples from seed {seed}"
            )
        sample = generate_sample(cursor, cfg)
        cursor += 1
        if sample.caption in seen:
            continue
        seen.add(sample.caption)
        samples.append(sample)
    return samples, cursor


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_image_png(path: str, image: np.ndarray) -> None:
    arr = np.round(image * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _write_panoptic_png(path: str, seg_map: np.ndarray) -> None:
    if seg_map.min() < 0 or seg_map.max() > 0xFFFF:
        raise InputError("segment ids must fit in 16 bits")
    Image.fromarray(seg_map.astype(np.uint16)).save(path, format="PNG")


def write_dataset(out_dir: str, samples, seed: int, cfg: DataConfig) -> None:
    """Write one split directory. Deterministic for fixed inputs."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "panoptic"), exist_ok=True)
    vocab = build_vocabulary()
    files = {}
    ann_path = os.path.join(out_dir, "annotations.jsonl")
    with open(ann_path, "w", encoding="utf-8") as fh:
        for i, sample in enumerate(samples):
            img_rel = f"images/{i:06d}.png"
            pan_rel = f"panoptic/{i:06d}.png"
            _write_image_png(os.path.join(out_dir, img_rel), sample.image)
            _write_panoptic_png(os.path.join(out_dir, pan_rel), sample.segment_map)
            files[img_rel] = _sha256(os.path.join(out_dir, img_rel))
            files[pan_rel] = _sha256(os.path.join(out_dir, pan_rel))
            record = {
                "index": i,
                "segments": [
                    {"id": sid, "category": cat} for sid, cat in sample.segments
                ],
                "caption": sample.caption,
                "referring": [
                    {"phrase": phrase, "segment_id": sid}
                    for phrase, sid in sample.referring
                ],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    files["annotations.jsonl"] = _sha256(ann_path)
    manifest = {
        "version": MANIFEST_VERSION,
        "grammar": GRAMMAR_ID,
        "count": len(samples),
        "seed": seed,
        "canvas": cfg.canvas,
        "categories": list(category_names()),
        "vocabulary": vocab.to_dict(),
        "files": files,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Dataset:
    """Read-only view over one split directory with checksum verification."""

    def __init__(self, root: str):
        self.root = root
        manifest_path = os.path.join(root, "manifest.json")
        try:
            with open(manifest_path, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read dataset {root}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest_path} is not valid JSON: {exc}") from exc
        for key in ("version", "count", "seed", "categories", "vocabulary", "files", "grammar", "canvas"):
            if key not in manifest:
                raise FormatError(f"{manifest_path} missing key {key!r}")
        if manifest["version"] != MANIFEST_VERSION:
            raise FormatError(
                f"{manifest_path}: unsupported version {manifest['version']}"
            )
        self.manifest = manifest
        self.count = int(manifest["count"])
        self.categories = tuple(manifest["categories"])
        self.vocab = Vocabulary(manifest["vocabulary"])
        self._annotations = self._load_annotations()

    def _verified_path(self, rel: str) -> str:
        path = os.path.join(self.root, rel)
        expect = self.manifest["files"].get(rel)
        if expect is None:
            raise FormatError(f"dataset file {rel} missing from manifest")
        if not os.path.exists(path):
            raise FormatError(f"dataset file {rel} missing on disk")
        actual = _sha256(path)
        if actual != expect:
            raise FormatError(f"checksum mismatch for {rel}")
        return path

    def _load_annotations(self):
        path = self._verified_path("annotations.jsonl")
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(
                        f"annotations.jsonl line {line_no}: {exc}"
                    ) from exc
        if len(records) != self.count:
            raise FormatError(
                f"annotations.jsonl has {len(records)} records, manifest says {self.count}"
            )
        return records

    def __len__(self) -> int:
        return self.count

    def sample(self, index: int) -> Sample:
        if not (0 <= index < self.count):
            raise InputError(f"sample index {index} out of range 0..{self.count - 1}")
        record = self._annotations[index]
        img_rel = f"images/{index:06d}.png"
        pan_rel = f"panoptic/{index:06d}.png"
        with Image.open(self._verified_path(img_rel)) as im:
            if im.mode != "RGB":
                raise FormatError(f"{img_rel}: expected RGB, got {im.mode}")
            image = np.asarray(im, dtype=np.uint8).astype(np.float32) / 255.0
        with Image.open(self._verified_path(pan_rel)) as im:
            if im.mode not in ("I;16", "I"):
                raise FormatError(f"{pan_rel}: expected 16-bit single channel, got {im.mode}")
            seg_map = np.asarray(im).astype(np.int32)
        if seg_map.ndim != 2:
            raise FormatError(f"{pan_rel}: expected a single channel")
        segments = tuple((s["id"], s["category"]) for s in record["segments"])
        present = set(np.unique(seg_map).tolist())
        declared = {sid for sid, _ in segments}
        if not present <= declared:
            raise FormatError(
                f"{pan_rel}: segment ids {sorted(present - declared)} not in annotations"
            )
        referring = tuple((r["phrase"], r["segment_id"]) for r in record["referring"])
        return Sample(
            image=image,
            segment_map=seg_map,
            segments=segments,
            caption=record["caption"],
            referring=referring,
        )


@dataclass(frozen=True)
class PlanStep:
    tag: str  # "seg" | "itp" | "ref"
    samples: tuple[int, ...]
    epoch: int


@dataclass(frozen=True)
class BatchPlan:
    steps: tuple[PlanStep, ...]
    epochs: int
    steps_per_epoch: int


class _Sampler:
    """Cycles through seeded permutations, never repeating an index inside
    one batch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.pool: list[int] = []

    def draw(self, k: int) -> tuple[int, ...]:
        if len(self.pool) < k:
            self.pool = [int(i) for i in self.rng.permutation(self.n)]
        out = tuple(self.pool[:k])
        self.pool = self.pool[k:]
        return out


def plan_batches(n_samples: int, cfg: TrainConfig, seed: int) -> BatchPlan:
    """Lay out the whole run up front: which samples feed which step.

    Per epoch every sample appears in exactly one segmentation batch; the
    number of image-text and referring steps follows the configured ratios,
    spread evenly between the segmentation steps. Truncated to cfg.steps.
    """
    if n_samples < 1:
        raise InputError("dataset is empty")
    if max(cfg.seg_batch, cfg.itp_batch, cfg.ref_batch) > n_samples:
        raise InputError(
            f"batch size exceeds dataset size {n_samples}"
        )
    rng = np.random.default_rng(seed)
    seg_steps = math.ceil(n_samples / cfg.seg_batch)
    itp_steps = round(seg_steps * cfg.itp_ratio)
    ref_steps = round(seg_steps * cfg.ref_ratio)
    per_epoch = seg_steps + itp_steps + ref_steps
    if per_epoch == 0:
        raise InputError("plan has zero steps per epoch")
    epochs = math.ceil(cfg.steps / per_epoch) if cfg.steps > 0 else 0
    itp_sampler = _Sampler(n_samples, rng)
    ref_sampler = _Sampler(n_samples, rng)
    steps: list[PlanStep] = []
    for epoch in range(epochs):
        perm = [int(i) for i in rng.permutation(n_samples)]
        seg_batches = [
            tuple(perm[i : i + cfg.seg_batch])
            for i in range(0, n_samples, cfg.seg_batch)
        ]
        tagged: list[tuple[float, int, PlanStep]] = []
        for k, batch in enumerate(seg_batches):
            tagged.append(((k + 0.5) / seg_steps, 0, PlanStep("seg", batch, epoch)))
        for k in range(itp_steps):
            batch = itp_sampler.draw(cfg.itp_batch)
            tagged.append(((k + 0.5) / itp_steps, 1, PlanStep("itp", batch, epoch)))
        for k in range(ref_steps):
            batch = ref_sampler.draw(cfg.ref_batch)
            tagged.append(((k + 0.5) / ref_steps, 2, PlanStep("ref", batch, epoch)))
        tagged.sort(key=lambda item: (item[0], item[1]))
        steps.extend(step for _, _, step in tagged)
    if cfg.steps > 0:
        steps = steps[: cfg.steps]
    return BatchPlan(steps=tuple(steps), epochs=epochs, steps_per_epoch=per_epoch)
