"""Procedural occluded-face scenes with box and occlusion ground truth.

Faces are schematic (bright ellipse, two eye dots, a mouth bar) on a
textured background.  Occluders realize three situations: landmark
occlusion (a bar over eyes or mouth), face-over-face (an overlapping
front face occludes the back face), and object occlusion (a rectangle,
ellipse, or strip covering part of the face).  Everything is grayscale
uint8 and deterministic under a seed.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .geometry import Annotation, BoundingBox, iou

CATEGORIES = ("landmark_occlusion", "face_over_face", "object_occlusion", "none")

# A face counts as masked once occluders cover more than this fraction of
# its ellipse; near-total coverage or tiny size makes it ignored.
MASKED_COVERAGE = 0.20
IGNORED_COVERAGE = 0.85
IGNORED_MIN_SIZE = 20.0


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one rendered scene family."""

    image_size: tuple[int, int] = (128, 128)
    face_count: tuple[int, int] = (1, 3)
    face_size: tuple[float, float] = (28.0, 72.0)
    category_probs: dict = field(default_factory=lambda: {
        "landmark_occlusion": 0.06,
        "face_over_face": 0.04,
        "object_occlusion": 0.10,
        "none": 0.80,
    })
    occluder_value: tuple[float, float] = (0.30, 0.55)    # gray level
    occluder_coverage: tuple[float, float] = (0.30, 0.60)  # of the face box
    tiny_face_prob: float = 0.04   # deliberately ignored-size faces
    noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        total = sum(self.category_probs.get(c, 0.0) for c in CATEGORIES)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"category probabilities sum to {total}, expected 1")
        if self.face_size[0] < 16.0:
            raise ValueError("face sizes must be >= 16 px")


@dataclass
class SceneRecord:
    """One rendered scene plus its ground truth, pre-serialization."""

    image: np.ndarray              # (H, W) uint8
    annotations: list[Annotation]
    mask: np.ndarray               # (H, W) uint8 in {0, 1}
    split: str = "train"

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.image.tobytes())
        h.update(self.mask.tobytes())
        for a in self.annotations:
            h.update(repr((a.box, a.occlusion_state)).encode())
        return h.hexdigest()


def _ellipse_mask(h, w, cx, cy, rx, ry):
    ys, xs = np.mgrid[0:h, 0:w]
    return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


def _rect_mask(h, w, x1, y1, x2, y2):
    ys, xs = np.mgrid[0:h, 0:w]
    return (xs >= x1) & (xs < x2) & (ys >= y1) & (ys < y2)


def _background(h, w, rng, noise):
    # near-black: keeps background features close to zero so both the
    # background and dark occluders sit in the same low-response regime
    coarse = rng.uniform(0.0, 0.06, size=(8, 8))
    img = np.array(Image.fromarray((coarse * 255).astype(np.uint8)).resize((w, h), Image.BILINEAR),
                   dtype=np.float64) / 255.0
    img += rng.normal(0.0, noise, size=(h, w))
    return img


def _draw_face(img, cx, cy, rx, ry, rng):
    """Paint one schematic face; returns its ellipse pixel mask."""
    h, w = img.shape
    ell = _ellipse_mask(h, w, cx, cy, rx, ry)
    img[ell] = 0.80 + rng.normal(0.0, 0.02)
    eye_r = max(1.5, 0.14 * rx)
    for sx in (-0.40, 0.40):
        eye = _ellipse_mask(h, w, cx + sx * rx, cy - 0.30 * ry, eye_r, eye_r)
        img[eye & ell] = 0.10
    mouth = _rect_mask(h, w, cx - 0.45 * rx, cy + 0.35 * ry - 0.08 * ry,
                       cx + 0.45 * rx, cy + 0.35 * ry + 0.08 * ry)
    img[mouth & ell] = 0.15
    return ell


def _occluder_value(rng, spec: SceneSpec):
    return rng.uniform(*spec.occluder_value)


def render_scene(spec: SceneSpec, rng: np.random.Generator):
    """Render one scene; returns (image uint8, annotations, mask uint8)."""
    h, w = spec.image_size
    img = _background(h, w, rng, spec.noise)
    occupied: list[BoundingBox] = []
    faces = []  # (box, ellipse_mask, occluder_mask)

    def place_face(size_range, overlap_with: Optional[BoundingBox] = None):
        for _ in range(60):
            s = rng.uniform(*size_range)
            rx, ry = s * 0.42, s * 0.5
            if overlap_with is None:
                cx = rng.uniform(rx + 1, w - rx - 1)
                cy = rng.uniform(ry + 1, h - ry - 1)
            else:
                bcx, bcy = overlap_with.center
                cx = bcx + rng.uniform(0.4, 0.8) * overlap_with.width * rng.choice([-1, 1])
                cy = bcy + rng.uniform(-0.3, 0.3) * overlap_with.height
                cx = min(max(cx, rx + 1), w - rx - 1)
                cy = min(max(cy, ry + 1), h - ry - 1)
            box = BoundingBox(cx - rx, cy - ry, cx + rx, cy + ry)
            others = [b for b in occupied if b is not overlap_with]
            if all(iou(box, b) < 0.1 for b in others):
                if overlap_with is None or iou(box, overlap_with) > 0.02:
                    return cx, cy, rx, ry, box
        raise RuntimeError("could not place face within overlap limits")

    n_faces = int(rng.integers(spec.face_count[0], spec.face_count[1] + 1))
    cat_p = np.array([spec.category_probs.get(c, 0.0) for c in CATEGORIES])
    for _ in range(n_faces):
        tiny = rng.random() < spec.tiny_face_prob
        size_range = (16.0, IGNORED_MIN_SIZE - 1.0) if tiny else spec.face_size
        try:
            cx, cy, rx, ry, box = place_face(size_range)
        except RuntimeError:
            if occupied:
                continue  # crowded scene, settle for fewer faces
            raise
        occupied.append(box)
        ell = _draw_face(img, cx, cy, rx, ry, rng)
        occ = np.zeros_like(ell)
        category = CATEGORIES[rng.choice(len(CATEGORIES), p=cat_p)]
        if category == "landmark_occlusion":
            part = rng.choice(["eyes", "mouth"])
            yc = cy - 0.30 * ry if part == "eyes" else cy + 0.35 * ry
            bar = _rect_mask(h, w, box.x1 - 2, yc - 0.28 * ry, box.x2 + 2, yc + 0.28 * ry)
            img[bar] = _occluder_value(rng, spec)
            occ = bar & ell
        elif category == "object_occlusion":
            kind = rng.choice(["rect", "ellipse", "strip"])
            frac = rng.uniform(*spec.occluder_coverage)
            if kind == "rect":
                side = rng.choice(["bottom", "top", "left", "right"])
                if side == "bottom":
                    shape = _rect_mask(h, w, box.x1 - 2, box.y2 - frac * box.height, box.x2 + 2, box.y2 + 2)
                elif side == "top":
                    shape = _rect_mask(h, w, box.x1 - 2, box.y1 - 2, box.x2 + 2, box.y1 + frac * box.height)
                elif side == "left":
                    shape = _rect_mask(h, w, box.x1 - 2, box.y1 - 2, box.x1 + frac * box.width, box.y2 + 2)
                else:
                    shape = _rect_mask(h, w, box.x2 - frac * box.width, box.y1 - 2, box.x2 + 2, box.y2 + 2)
            elif kind == "ellipse":
                ox = rng.uniform(box.x1 + 0.25 * box.width, box.x2 - 0.25 * box.width)
                oy = rng.uniform(box.y1 + 0.25 * box.height, box.y2 - 0.25 * box.height)
                r = np.sqrt(frac) * max(rx, ry)
                shape = _ellipse_mask(h, w, ox, oy, r, r)
            else:
                yc = rng.uniform(box.y1 + 0.2 * box.height, box.y2 - 0.2 * box.height)
                shape = _rect_mask(h, w, box.x1 - 3, yc - 0.5 * frac * box.height,
                                   box.x2 + 3, yc + 0.5 * frac * box.height)
            img[shape] = _occluder_value(rng, spec)
            occ = shape & ell
        faces.append({"box": box, "ell": ell, "occ": occ, "front": None})
        if category == "face_over_face":
            try:
                fcx, fcy, frx, fry, fbox = place_face(spec.face_size, overlap_with=box)
            except RuntimeError:
                continue
            occupied.append(fbox)
            fell = _draw_face(img, fcx, fcy, frx, fry, rng)
            # the front face hides whatever it covers of the back face
            faces[-1]["occ"] = faces[-1]["occ"] | (fell & ell)
            faces[-1]["occ"][fell & ~ell] = False
            faces[-1]["front"] = fell
            faces.append({"box": fbox, "ell": fell, "occ": np.zeros_like(fell), "front": None})

    # front faces repaint over earlier occluders; recompute visibility
    annotations = []
    mask = np.zeros((h, w), dtype=np.uint8)
    for f in faces:
        box, ell, occ = f["box"], f["ell"], f["occ"]
        n_ell = max(int(ell.sum()), 1)
        coverage = float((occ & ell).sum()) / n_ell
        side = min(box.width, box.height)
        if side < IGNORED_MIN_SIZE or coverage >= IGNORED_COVERAGE:
            state = "ignored"
        elif coverage > MASKED_COVERAGE:
            state = "masked"
        else:
            state = "unmasked"
        region = box if state == "masked" else None
        annotations.append(Annotation(box=box, occlusion_state=state,
                                      occlusion_region=region))
        if state == "masked":
            bx = _rect_mask(h, w, box.x1, box.y1, box.x2, box.y2)
            mask[occ & bx] = 1

    image = (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)
    return image, annotations, mask


# ---------------------------------------------------------------------------
# On-disk dataset format: images/, masks/, annotations.jsonl
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetRecord:
    """One dataset entry: file references plus annotations."""

    image: str                     # path relative to dataset root
    mask: Optional[str]            # present iff any annotation is masked
    split: str
    annotations: tuple


def _annotation_to_json(a: Annotation) -> dict:
    d = {
        "box": [a.box.x1, a.box.y1, a.box.x2, a.box.y2],
        "occlusion_state": a.occlusion_state,
        "category": a.category,
    }
    if a.occlusion_region is not None:
        r = a.occlusion_region
        d["occlusion_region"] = [r.x1, r.y1, r.x2, r.y2]
    return d


def _annotation_from_json(d: dict) -> Annotation:
    region = None
    if d.get("occlusion_region") is not None:
        region = BoundingBox(*d["occlusion_region"])
    return Annotation(box=BoundingBox(*d["box"]),
                      occlusion_state=d["occlusion_state"],
                      category=d.get("category", "face"),
                      occlusion_region=region)


def write_dataset(scenes: list[SceneRecord], root) -> list[DatasetRecord]:
    """Write scenes to ``root`` (images/, masks/, annotations.jsonl)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    with open(root / "annotations.jsonl", "w") as fh:
        for i, scene in enumerate(scenes):
            img_name = f"images/img_{i:05d}.png"
            Image.fromarray(scene.image).save(root / img_name)
            mask_name = None
            if any(a.occlusion_state == "masked" for a in scene.annotations):
                mask_name = f"masks/img_{i:05d}.png"
                Image.fromarray(scene.mask * 255).save(root / mask_name)
            rec = DatasetRecord(image=img_name, mask=mask_name, split=scene.split,
                                annotations=tuple(scene.annotations))
            records.append(rec)
            fh.write(json.dumps({
                "image": rec.image, "mask": rec.mask, "split": rec.split,
                "annotations": [_annotation_to_json(a) for a in rec.annotations],
            }) + "\n")
    return records


def read_dataset(root) -> list[DatasetRecord]:
    """Read a dataset directory; empty directory yields an empty list."""
    root = Path(root)
    index = root / "annotations.jsonl"
    if not index.exists():
        return []
    records = []
    with open(index) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                anns = tuple(_annotation_from_json(a) for a in d["annotations"])
                rec = DatasetRecord(image=d["image"], mask=d.get("mask"),
                                    split=d["split"], annotations=anns)
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{index}:{lineno}: malformed record: {exc}") from exc
            if any(a.occlusion_state == "masked" for a in rec.annotations):
                if rec.mask is None or not (root / rec.mask).exists():
                    raise FileNotFoundError(
                        f"{index}:{lineno}: missing mask file {rec.mask!r} "
                        f"for masked annotation in {rec.image}")
            records.append(rec)
    return records


def load_image(root, record: DatasetRecord) -> np.ndarray:
    return np.asarray(Image.open(Path(root) / record.image), dtype=np.uint8)


def load_mask(root, record: DatasetRecord) -> np.ndarray:
    if record.mask is None:
        img = load_image(root, record)
        return np.zeros_like(img)
    m = np.asarray(Image.open(Path(root) / record.mask), dtype=np.uint8)
    return (m > 0).astype(np.uint8)


def export_coco_like(records: list[DatasetRecord], path) -> None:
    """Best-effort single-file index for external viewers."""
    images, annotations = [], []
    for i, rec in enumerate(records):
        images.append({"id": i, "file_name": rec.image, "split": rec.split})
        for a in rec.annotations:
            b = a.box
            annotations.append({
                "image_id": i, "category": a.category,
                "bbox": [b.x1, b.y1, b.width, b.height],
                "occlusion_state": a.occlusion_state,
            })
    with open(path, "w") as fh:
        json.dump({"images": images, "annotations": annotations}, fh, indent=2)


# ---------------------------------------------------------------------------
# Benchmark assembly
# ---------------------------------------------------------------------------

OCCLUSION_HEAVY_MIX = {
    "landmark_occlusion": 0.30,
    "face_over_face": 0.15,
    "object_occlusion": 0.40,
    "none": 0.15,
}

# Heavily-masked-face splits use near-black occluders, so the occlusion
# genuinely removes face evidence instead of merely recoloring it.  Coverage
# stays moderate: enough face must remain visible that detecting it is
# possible at all, and a one-third occluded face is the typical case.
OCCLUSION_HEAVY_VALUE = (0.0, 0.05)
OCCLUSION_HEAVY_COVERAGE = (0.30, 0.55)


def make_benchmark(spec: SceneSpec, sizes: tuple[int, int, int] = (500, 100, 100),
                   seg_size: int = 300) -> dict[str, list[SceneRecord]]:
    """Render disjoint train/val/test splits plus a small segmentation set.

    The test split is occlusion-heavy and stratified so at least half of
    its non-ignored faces are masked; the segmentation split is the small
    occlusion-annotated set and every image in it contains at least one
    masked face.
    """
    if any(s <= 0 for s in sizes):
        raise ValueError("split sizes must be positive")
    counter = iter(range(10 ** 9))
    test_spec = SceneSpec(image_size=spec.image_size, face_count=spec.face_count,
                          face_size=spec.face_size, category_probs=OCCLUSION_HEAVY_MIX,
                          occluder_value=OCCLUSION_HEAVY_VALUE,
                          occluder_coverage=OCCLUSION_HEAVY_COVERAGE,
                          tiny_face_prob=spec.tiny_face_prob, noise=spec.noise,
                          seed=spec.seed)
    out: dict[str, list[SceneRecord]] = {}
    for split, size, sp in (("train", sizes[0], spec), ("val", sizes[1], spec),
                            ("test", sizes[2], test_spec)):
        scenes = []
        while len(scenes) < size:
            rng = np.random.default_rng([spec.seed, next(counter)])
            image, anns, mask = render_scene(sp, rng)
            if split == "test":
                # keep the split masked-heavy: demand at least one masked
                # face unless the running fraction already exceeds 1/2
                masked = sum(a.occlusion_state == "masked" for s in scenes
                             for a in s.annotations)
                live = sum(a.occlusion_state != "ignored" for s in scenes
                           for a in s.annotations)
                needs_masked = live == 0 or masked / max(live, 1) < 0.55
                if needs_masked and not any(a.occlusion_state == "masked" for a in anns):
                    continue
            scenes.append(SceneRecord(image=image, annotations=anns, mask=mask, split=split))
        out[split] = scenes
    seg_scenes = []
    while len(seg_scenes) < seg_size:
        rng = np.random.default_rng([spec.seed, next(counter)])
        image, anns, mask = render_scene(test_spec, rng)
        if not any(a.occlusion_state == "masked" for a in anns):
            continue
        seg_scenes.append(SceneRecord(image=image, annotations=anns, mask=mask, split="seg"))
    out["seg"] = seg_scenes
    return out


def masked_face_fraction(records) -> float:
    """Fraction of non-ignored faces that are masked, over records/scenes."""
    masked = live = 0
    for rec in records:
        for a in rec.annotations:
            if a.occlusion_state == "ignored":
                continue
            live += 1
            masked += a.occlusion_state == "masked"
    return masked / live if live else 0.0
