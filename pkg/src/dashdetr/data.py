"""Annotations, the four-class label space and a synthetic dashcam scene generator.

On-disk dataset layout::

    <root>/annotations.json    COCO-style, see ``ANNOTATION_SCHEMA_VERSION``
    <root>/images/<file_name>  8-bit RGB PNG

``annotations.json`` holds ``images`` (``id``, ``file_name``, ``width``,
``height``), ``annotations`` (``id``, ``image_id``, ``category_id``,
``bbox`` as pixel ``[x, y, w, h]``) and ``categories`` (``id``, ``name``).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .boxes import box_convert
from .loss import Target

ANNOTATION_SCHEMA_VERSION = "1.0"

CLASS_NAMES = ("traffic_signal", "stop_sign", "car", "truck")
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}
NUM_CLASSES = len(CLASS_NAMES)


class AnnotationError(ValueError):
    pass


class MalformedAnnotations(AnnotationError):
    pass


class DanglingImageReference(AnnotationError):
    pass


class InvalidBox(AnnotationError):
    pass


class UnknownCategory(AnnotationError):
    pass


class DuplicateId(AnnotationError):
    pass


class SceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassLabel:
    id: int
    name: str

    @classmethod
    def from_id(cls, class_id: int) -> "ClassLabel":
        if not 0 <= class_id < NUM_CLASSES:
            raise UnknownCategory(f"unknown category id {class_id}; valid ids are {list(range(NUM_CLASSES))}")
        return cls(class_id, CLASS_NAMES[class_id])


@dataclass(frozen=True)
class GroundTruthObject:
    box: np.ndarray  # normalised cxcywh
    class_id: int

    @property
    def label(self) -> ClassLabel:
        return ClassLabel.from_id(self.class_id)


@dataclass
class ImageSample:
    image: np.ndarray | None  # [3, H, W] in [0, 1]; None for descriptors not yet loaded
    objects: list[GroundTruthObject]
    source_id: str
    width: int
    height: int
    file_name: str = ""
    image_id: int = 0

    def target(self) -> Target:
        if not self.objects:
            return Target(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))
        return Target([o.class_id for o in self.objects], np.stack([o.box for o in self.objects]))


# -- annotation I/O ---------------------------------------------------------------

def load_annotations(path) -> list[ImageSample]:
    """Parse a COCO-style annotation file into image descriptors (pixels not loaded)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedAnnotations(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list) \
            or not isinstance(doc.get("annotations", []), list):
        raise MalformedAnnotations(f"{path}: expected an object with 'images' and 'annotations' arrays")

    samples: dict[int, ImageSample] = {}
    for img in doc["images"]:
        try:
            iid, w, h = int(img["id"]), int(img["width"]), int(img["height"])
            fname = str(img.get("file_name", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedAnnotations(f"{path}: bad image record {img!r}") from exc
        if iid in samples:
            raise DuplicateId(f"duplicate image id {iid}")
        if w <= 0 or h <= 0:
            raise InvalidBox(f"image {iid} has non-positive size {w}x{h}")
        samples[iid] = ImageSample(None, [], fname or str(iid), w, h, fname, iid)

    seen: set[int] = set()
    for ann in doc.get("annotations", []):
        try:
            aid, iid, cid = int(ann["id"]), int(ann["image_id"]), int(ann["category_id"])
            bbox = [float(v) for v in ann["bbox"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedAnnotations(f"{path}: bad annotation record {ann!r}") from exc
        if aid in seen:
            raise DuplicateId(f"duplicate annotation id {aid}")
        seen.add(aid)
        if iid not in samples:
            raise DanglingImageReference(f"annotation {aid} references missing image id {iid}")
        if not 0 <= cid < NUM_CLASSES:
            raise UnknownCategory(f"annotation {aid}: unknown category id {cid}; valid ids are "
                                  f"{list(range(NUM_CLASSES))} ({', '.join(CLASS_NAMES)})")
        if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
            raise InvalidBox(f"annotation {aid}: bbox {bbox} must be [x, y, w, h] with w, h > 0")
        s = samples[iid]
        box = box_convert(bbox, "xywh", "cxcywh", (s.width, s.height))
        if box[2] <= 0 or box[3] <= 0:
            raise InvalidBox(f"annotation {aid}: bbox {bbox} lies outside its {s.width}x{s.height} image")
        s.objects.append(GroundTruthObject(box, cid))
    return [samples[k] for k in samples]


def _pixel_xywh(obj: GroundTruthObject, width: int, height: int) -> list[float]:
    x, y, w, h = box_convert(obj.box, "cxcywh", "xywh", (width, height))
    return [round(float(v), 6) for v in (x, y, w, h)]


def write_dataset(samples: Sequence[ImageSample], root) -> Path:
    """Write PNG images plus ``annotations.json``; returns the annotation path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 0
    for idx, s in enumerate(samples):
        fname = s.file_name or f"{idx:06d}.png"
        if s.image is not None:
            save_png(s.image, root / "images" / fname)
        images.append({"id": idx, "file_name": fname, "width": s.width, "height": s.height})
        for obj in s.objects:
            annotations.append({"id": ann_id, "image_id": idx, "category_id": int(obj.class_id),
                                "bbox": _pixel_xywh(obj, s.width, s.height)})
            ann_id += 1
    doc = {
        "info": {"schema_version": ANNOTATION_SCHEMA_VERSION},
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i, "name": n} for i, n in enumerate(CLASS_NAMES)],
    }
    out = root / "annotations.json"
    out.write_text(json.dumps(doc, indent=1))
    return out


def save_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


@dataclass(frozen=True)
class Letterbox:
    """Aspect-preserving resize into a fixed canvas, centred with grey padding."""

    scale: float
    pad_x: int
    pad_y: int
    out_width: int
    out_height: int

    @classmethod
    def fit(cls, width: int, height: int, out_width: int, out_height: int) -> "Letterbox":
        scale = min(out_width / width, out_height / height)
        nw, nh = round(width * scale), round(height * scale)
        return cls(scale, (out_width - nw) // 2, (out_height - nh) // 2, out_width, out_height)

    def image(self, image: np.ndarray) -> np.ndarray:
        _, h, w = image.shape
        nw, nh = round(w * self.scale), round(h * self.scale)
        if (nw, nh) == (w, h) and (self.out_width, self.out_height) == (w, h):
            return image
        arr = np.clip(np.rint(image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        resized = np.asarray(Image.fromarray(arr).resize((nw, nh), Image.BILINEAR), dtype=np.float64) / 255.0
        canvas = np.full((self.out_height, self.out_width, 3), 0.5)
        canvas[self.pad_y:self.pad_y + nh, self.pad_x:self.pad_x + nw] = resized
        return canvas.transpose(2, 0, 1)

    def box_to_canvas(self, box: np.ndarray, width: int, height: int) -> np.ndarray:
        x1, y1, x2, y2 = box_convert(box, "cxcywh", "xyxy", (width, height))
        xyxy = [x1 * self.scale + self.pad_x, y1 * self.scale + self.pad_y,
                x2 * self.scale + self.pad_x, y2 * self.scale + self.pad_y]
        return box_convert(xyxy, "xyxy", "cxcywh", (self.out_width, self.out_height))

    def canvas_to_pixels(self, box: np.ndarray, width: int, height: int) -> np.ndarray:
        """Normalised canvas box back to pixel ``xyxy`` in the original image."""
        x1, y1, x2, y2 = box_convert(box, "cxcywh", "xyxy", (self.out_width, self.out_height))
        out = np.array([(x1 - self.pad_x) / self.scale, (y1 - self.pad_y) / self.scale,
                        (x2 - self.pad_x) / self.scale, (y2 - self.pad_y) / self.scale])
        return np.clip(out, 0, [width, height, width, height])


def load_dataset(root, image_height: int, image_width: int) -> list[ImageSample]:
    """Load annotations and pixels, letterboxed to the model input size."""
    root = Path(root)
    out = []
    for desc in load_annotations(root / "annotations.json"):
        img = read_png(root / "images" / desc.file_name)
        if img.shape[1:] != (desc.height, desc.width):
            raise MalformedAnnotations(
                f"{desc.file_name}: pixel size {img.shape[2]}x{img.shape[1]} differs from annotation "
                f"{desc.width}x{desc.height}")
        lb = Letterbox.fit(desc.width, desc.height, image_width, image_height)
        objs = [GroundTruthObject(lb.box_to_canvas(o.box, desc.width, desc.height), o.class_id)
                for o in desc.objects]
        out.append(ImageSample(lb.image(img), objs, desc.source_id, image_width, image_height,
                               desc.file_name, desc.image_id))
    return out


def class_histogram(samples: Iterable[ImageSample]) -> np.ndarray:
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for s in samples:
        for obj in s.objects:
            counts[obj.class_id] += 1
    return counts


# -- synthetic scenes ---------------------------------------------------------------

def _rgb(r: int, g: int, b: int) -> np.ndarray:
    return np.array([r, g, b], dtype=np.float64) / 255.0


PALETTE = {
    "sky": _rgb(135, 180, 220),
    "verge": _rgb(70, 120, 60),
    "road": _rgb(100, 100, 100),
    "lane": _rgb(225, 225, 205),
    "signal_housing": _rgb(35, 35, 40),
    "signal_red": _rgb(255, 50, 50),
    "signal_amber": _rgb(255, 200, 0),
    "signal_green": _rgb(40, 220, 90),
    "stop_red": _rgb(200, 20, 30),
    "stop_text": _rgb(250, 250, 250),
    "car_body": _rgb(30, 80, 220),
    "car_window": _rgb(160, 210, 255),
    "truck_body": _rgb(240, 150, 20),
    "truck_cab": _rgb(170, 90, 10),
    "occluder": _rgb(110, 75, 45),
}

GLYPH_COLOURS = {
    0: ("signal_housing", "signal_red", "signal_amber", "signal_green"),
    1: ("stop_red", "stop_text"),
    2: ("car_body", "car_window"),
    3: ("truck_body", "truck_cab"),
}


@dataclass(frozen=True)
class SceneRecipe:
    seed: int = 0
    min_objects: int = 1
    max_objects: int = 4
    illumination_min: float = 0.5
    illumination_max: float = 1.0
    noise_sigma: float = 0.03
    occlusion_prob: float = 0.2
    scale_min: float = 0.15
    scale_max: float = 0.35
    image_height: int = 128
    image_width: int = 128

    def __post_init__(self):
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not 0.1 <= self.illumination_min <= self.illumination_max <= 1.0:
            raise ValueError("illumination range must lie within [0.1, 1.0]")
        if self.noise_sigma < 0 or not 0 <= self.occlusion_prob <= 1:
            raise ValueError("noise_sigma must be >= 0 and occlusion_prob in [0, 1]")
        if not 0 < self.scale_min <= self.scale_max <= 1:
            raise ValueError("scale range must lie in (0, 1]")

    @classmethod
    def from_file(cls, path) -> "SceneRecipe":
        values = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown recipe keys: {', '.join(unknown)}")
        return cls(**values)


def _background(h: int, w: int) -> np.ndarray:
    img = np.empty((h, w, 3))
    horizon = int(h * 0.4)
    img[:horizon] = PALETTE["sky"]
    img[horizon:] = PALETTE["road"]
    img[horizon:, : w // 8] = PALETTE["verge"]
    img[horizon:, w - w // 8:] = PALETTE["verge"]
    cx = w // 2
    for y in range(horizon + 2, h, 12):
        img[y:y + 6, cx - 1:cx + 1] = PALETTE["lane"]
    return img


def _glyph_extent(class_id: int, size: float, rng: np.random.Generator) -> tuple[int, int]:
    """Pixel (width, height) of a glyph whose characteristic size is ``size``."""
    if class_id == 0:
        w = size * 0.4
        return max(int(w), 4), max(int(w * 2.5), 10)
    if class_id == 1:
        s = max(int(size * 0.7), 7)
        return s, s
    if class_id == 2:
        w = size
        return max(int(w), 8), max(int(w * rng.uniform(0.45, 0.6)), 4)
    h = size * 1.1
    return max(int(h * rng.uniform(0.65, 0.8)), 6), max(int(h), 8)


def _draw_glyph(img: np.ndarray, class_id: int, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Paint one glyph into ``img`` (H, W, 3) and return its boolean mask."""
    H, W, _ = img.shape
    yy, xx = np.mgrid[0:H, 0:W]
    px, py = xx + 0.5, yy + 0.5
    in_rect = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    if class_id == 0:
        img[in_rect] = PALETTE["signal_housing"]
        r = w * 0.32
        for k, name in enumerate(("signal_red", "signal_amber", "signal_green")):
            cy = y0 + h * (k + 0.5) / 3
            lamp = (px - (x0 + w / 2)) ** 2 + (py - cy) ** 2 <= r * r
            img[lamp & in_rect] = PALETTE[name]
        return in_rect
    if class_id == 1:
        cx, cy, r = x0 + w / 2, y0 + h / 2, w / 2
        u, v = np.abs(px - cx), np.abs(py - cy)
        mask = (u <= r) & (v <= r) & (u + v <= r * np.sqrt(2) * 0.92)
        img[mask] = PALETTE["stop_red"]
        bar = mask & (np.abs(py - cy) <= max(h * 0.12, 0.6)) & (u <= r * 0.6)
        img[bar] = PALETTE["stop_text"]
        return mask
    if class_id == 2:
        img[in_rect] = PALETTE["car_body"]
        win = (xx >= x0 + w // 4) & (xx < x0 + w - w // 4) & (yy >= y0 + max(h // 6, 1)) & (yy < y0 + h // 2)
        img[win] = PALETTE["car_window"]
        return in_rect
    img[in_rect] = PALETTE["truck_body"]
    cab = in_rect & (yy >= y0 + h - max(h // 3, 2))
    img[cab] = PALETTE["truck_cab"]
    return in_rect


def _mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def generate_scene(recipe: SceneRecipe, index: int = 0, max_attempts: int = 20) -> ImageSample:
    """Render one synthetic scene; a pure function of ``(recipe, index)``."""
    rng = np.random.default_rng([recipe.seed, index])
    H, W = recipe.image_height, recipe.image_width
    count = int(rng.integers(recipe.min_objects, recipe.max_objects + 1))
    gap = 4
    for _ in range(max_attempts):
        placed: list[tuple[int, int, int, int, int]] = []
        ok = True
        for _ in range(count):
            cls = int(rng.integers(0, NUM_CLASSES))
            size = rng.uniform(recipe.scale_min, recipe.scale_max) * min(H, W)
            w, h = _glyph_extent(cls, size, rng)
            w, h = min(w, W - 2), min(h, H - 2)
            for _ in range(50):
                x0 = int(rng.integers(1, W - w))
                y0 = int(rng.integers(1, H - h))
                if all(x0 + w + gap <= px or px + pw + gap <= x0 or y0 + h + gap <= py or py + ph + gap <= y0
                       for _, px, py, pw, ph in placed):
                    placed.append((cls, x0, y0, w, h))
                    break
            else:
                ok = False
                break
        if ok:
            break
    else:
        raise SceneError(f"could not pack {count} objects into a {W}x{H} image after {max_attempts} attempts")

    img = _background(H, W)
    objects = []
    for cls, x0, y0, w, h in placed:
        mask = _draw_glyph(img, cls, x0, y0, w, h)
        box = box_convert(_mask_box(mask), "xyxy", "cxcywh", (W, H))
        objects.append(GroundTruthObject(box, cls))

    for cls, x0, y0, w, h in placed:
        if rng.random() < recipe.occlusion_prob:
            bw = max(int(w * rng.uniform(0.15, 0.3)), 1)
            bx = int(rng.integers(x0, x0 + w - bw + 1))
            img[y0:y0 + h, bx:bx + bw] = PALETTE["occluder"]

    illum = rng.uniform(recipe.illumination_min, recipe.illumination_max)
    img = img * illum
    if recipe.noise_sigma > 0:
        img = img + rng.normal(0.0, recipe.noise_sigma, size=img.shape)
    img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return ImageSample(img.transpose(2, 0, 1).copy(), objects, f"synthetic-{recipe.seed}-{index:06d}", W, H,
                       f"{index:06d}.png", index)


def generate_dataset(recipe: SceneRecipe, count: int, start: int = 0) -> list[ImageSample]:
    return [generate_scene(recipe, i) for i in range(start, start + count)]
