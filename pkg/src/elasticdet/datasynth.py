"""Deterministic synthetic detection/segmentation data: colored shapes.

Classes are shape kinds (circle, rectangle, triangle) with class-correlated
fill colors, so a small model can learn the task quickly. Masks are exact
rasterizations over pixel centers; boxes are the tight bounds of the masks.
Annotations round-trip through COCO instances JSON: polygons for the convex
shapes, uncompressed column-major RLE for circles.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AnnotationError

CLASS_NAMES = ("circle", "rectangle", "triangle")

# base RGB per class index, jittered per instance
_PALETTE = ((200, 60, 60), (60, 180, 75), (65, 90, 200))

MIN_OBJECT_AREA = 16  # px


@dataclass(frozen=True)
class DatasetSpec:
    num_images: int
    image_size: int
    classes: tuple[str, ...] = CLASS_NAMES
    objects_per_image: tuple[int, int] = (1, 3)
    seed: int = 0


@dataclass
class ShapeAnnotation:
    class_id: int
    box_cxcywh: np.ndarray      # normalized (4,)
    mask: np.ndarray            # bool (H, W)
    polygon: np.ndarray | None  # (n, 2) absolute pixel vertices, convex; None for circles


@dataclass
class Dataset:
    spec: DatasetSpec
    images: list[np.ndarray]                    # uint8 (H, W, 3)
    annotations: list[list[ShapeAnnotation]]
    class_names: tuple[str, ...] = CLASS_NAMES

    def __len__(self) -> int:
        return len(self.images)


def rasterize_convex_polygon(vertices: np.ndarray, size: int) -> np.ndarray:
    """Boolean mask of a convex CCW polygon: pixel centers inside all edges."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.ones((size, size), dtype=bool)
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        inside &= cross >= 0
    return inside


def rasterize_circle(cx: float, cy: float, radius: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    return (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= radius ** 2


def _tight_box(mask: np.ndarray) -> np.ndarray:
    """Normalized cxcywh of the tight pixel bounding box of a mask."""
    ys, xs = np.where(mask)
    size = mask.shape[0]
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return np.array(
        [(x0 + x1) / 2 / size, (y0 + y1) / 2 / size, (x1 - x0) / size, (y1 - y0) / size],
        dtype=np.float64,
    )


def _ccw(vertices: np.ndarray) -> np.ndarray:
    area = 0.0
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    return vertices if area >= 0 else vertices[::-1].copy()


def _sample_shape(class_name: str, size: int, rng: np.random.Generator, max_scale: float = 0.16):
    """Returns (mask, polygon|None, circle params|None)."""
    scale = rng.uniform(0.08, max_scale) * size  # half-extent
    cx = rng.uniform(scale + 1, size - scale - 1)
    cy = rng.uniform(scale + 1, size - scale - 1)
    if class_name == "circle":
        mask = rasterize_circle(cx, cy, scale, size)
        return mask, None, (cx, cy, scale)
    if class_name == "rectangle":
        w = scale * rng.uniform(0.7, 1.25)
        h = scale * rng.uniform(0.7, 1.25)
        verts = np.array([[cx - w, cy - h], [cx + w, cy - h], [cx + w, cy + h], [cx - w, cy + h]])
    else:  # triangle
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=3))
        # reject near-degenerate triangles (all vertices within a half-turn)
        while np.max(np.diff(np.concatenate([angles, [angles[0] + 2 * np.pi]]))) > 0.75 * 2 * np.pi:
            angles = np.sort(rng.uniform(0, 2 * np.pi, size=3))
        verts = np.stack([cx + scale * np.cos(angles), cy + scale * np.sin(angles)], axis=-1)
    verts = np.clip(verts, 1.0, size - 1.0)
    verts = _ccw(verts)
    mask = rasterize_convex_polygon(verts, size)
    return mask, verts, None


def _generate_image(spec: DatasetSpec, index: int) -> tuple[np.ndarray, list[ShapeAnnotation]]:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    background = rng.integers(170, 230, size=3)
    image = np.full((size, size, 3), background, dtype=np.uint8)
    n_objects = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))

    annotations: list[ShapeAnnotation] = []
    occupied = np.zeros((size, size), dtype=bool)
    for _ in range(n_objects):
        class_id = int(rng.integers(len(spec.classes)))
        class_name = spec.classes[class_id]
        for attempt in range(300):
            max_scale = 0.16 if attempt < 100 else 0.10
            mask, polygon, _circle = _sample_shape(class_name, size, rng, max_scale)
            if mask.sum() >= MIN_OBJECT_AREA and not (mask & occupied).any():
                break
        else:
            raise RuntimeError(f"could not place object {len(annotations)} in image {index}")
        occupied |= mask
        base = np.array(_PALETTE[class_id % len(_PALETTE)], dtype=np.int64)
        color = np.clip(base + rng.integers(-30, 31, size=3), 0, 255).astype(np.uint8)
        image[mask] = color
        annotations.append(
            ShapeAnnotation(class_id=class_id, box_cxcywh=_tight_box(mask), mask=mask, polygon=polygon)
        )
    return image, annotations


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic: the same spec and seed give byte-identical data. Images
    are seeded independently by index, so generation order is irrelevant."""
    images, annotations = [], []
    for i in range(spec.num_images):
        img, anns = _generate_image(spec, i)
        images.append(img)
        annotations.append(anns)
    return Dataset(spec=spec, images=images, annotations=annotations, class_names=spec.classes)


# --- COCO instances JSON -----------------------------------------------------

def _rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed COCO RLE: column-major counts, starting with zeros."""
    flat = mask.flatten(order="F").astype(np.uint8)
    changes = np.flatnonzero(np.diff(flat)) + 1
    runs = np.diff(np.concatenate([[0], changes, [flat.size]]))
    counts = runs.tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def _rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for count in rle["counts"]:
        if value:
            flat[pos:pos + count] = True
        pos += count
        value = not value
    return flat.reshape((h, w), order="F")


def write_coco(dataset: Dataset, json_path: str | Path, images_dir: str | Path | None = None) -> None:
    """Write COCO instances JSON; optionally also PNG images."""
    json_path = Path(json_path)
    size = dataset.spec.image_size
    if images_dir is not None:
        images_dir = Path(images_dir)
        images_dir.mkdir(parents=True, exist_ok=True)

    images, annotations = [], []
    ann_id = 1
    for i, (img, anns) in enumerate(zip(dataset.images, dataset.annotations)):
        file_name = f"{i:06d}.png"
        images.append({"id": i + 1, "file_name": file_name, "width": size, "height": size})
        if images_dir is not None:
            Image.fromarray(img).save(images_dir / file_name)
        for ann in anns:
            cx, cy, w, h = ann.box_cxcywh * size
            record = {
                "id": ann_id,
                "image_id": i + 1,
                "category_id": ann.class_id + 1,
                "bbox": [cx - w / 2, cy - h / 2, w, h],
                "area": float(ann.mask.sum()),
                "iscrowd": 0,
            }
            if ann.polygon is not None:
                record["segmentation"] = [ann.polygon.flatten().tolist()]
            else:
                record["segmentation"] = _rle_encode(ann.mask)
            annotations.append(record)
            ann_id += 1

    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [
            {"id": i + 1, "name": name} for i, name in enumerate(dataset.class_names)
        ],
    }
    with open(json_path, "w") as f:
        json.dump(payload, f)


def read_coco(json_path: str | Path, images_dir: str | Path | None = None) -> Dataset:
    """Load a COCO instances file back into a Dataset.

    Polygon segmentations are rasterized with the same convex rasterizer used
    at generation time, so masks round-trip exactly. Without an images
    directory the pixel buffers are zero-filled placeholders.
    """
    json_path = Path(json_path)
    try:
        with open(json_path) as f:
            payload = json.load(f)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{json_path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from exc

    for key in ("images", "annotations", "categories"):
        if key not in payload:
            raise AnnotationError(f"{json_path}: missing top-level key {key!r}")

    categories = sorted(payload["categories"], key=lambda c: c["id"])
    class_names = tuple(c["name"] for c in categories)
    cat_to_idx = {c["id"]: i for i, c in enumerate(categories)}

    image_records = sorted(payload["images"], key=lambda r: r["id"])
    if not image_records:
        raise AnnotationError(f"{json_path}: no images")
    size = image_records[0]["width"]
    id_to_pos = {r["id"]: pos for pos, r in enumerate(image_records)}

    images: list[np.ndarray] = []
    for record in image_records:
        if images_dir is not None:
            img = np.asarray(Image.open(Path(images_dir) / record["file_name"]).convert("RGB"))
        else:
            img = np.zeros((record["height"], record["width"], 3), dtype=np.uint8)
        images.append(img)

    annotations: list[list[ShapeAnnotation]] = [[] for _ in image_records]
    for record in payload["annotations"]:
        rid = record.get("id", "?")
        for key in ("image_id", "category_id", "bbox", "segmentation"):
            if key not in record:
                raise AnnotationError(f"{json_path}: annotation {rid}: missing {key!r}")
        if record["image_id"] not in id_to_pos:
            raise AnnotationError(f"{json_path}: annotation {rid}: unknown image_id {record['image_id']}")
        if record["category_id"] not in cat_to_idx:
            raise AnnotationError(f"{json_path}: annotation {rid}: unknown category_id {record['category_id']}")
        pos = id_to_pos[record["image_id"]]
        x, y, w, h = record["bbox"]
        seg = record["segmentation"]
        if isinstance(seg, dict):
            mask = _rle_decode(seg)
            polygon = None
        elif isinstance(seg, list) and seg and isinstance(seg[0], list):
            polygon = np.array(seg[0], dtype=np.float64).reshape(-1, 2)
            mask = rasterize_convex_polygon(_ccw(polygon), size)
        else:
            raise AnnotationError(f"{json_path}: annotation {rid}: unsupported segmentation form")
        annotations[pos].append(
            ShapeAnnotation(
                class_id=cat_to_idx[record["category_id"]],
                box_cxcywh=np.array(
                    [(x + w / 2) / size, (y + h / 2) / size, w / size, h / size], dtype=np.float64
                ),
                mask=mask,
                polygon=polygon,
            )
        )

    spec = DatasetSpec(num_images=len(images), image_size=size, classes=class_names)
    return Dataset(spec=spec, images=images, annotations=annotations, class_names=class_names)
