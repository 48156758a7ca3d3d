"""Box parameterisations, IoU and generalised IoU.

Three forms are supported:

* ``xyxy``   pixel corners ``(x1, y1, x2, y2)``
* ``xywh``   pixel top-left corner plus extent (the COCO annotation form)
* ``cxcywh`` centre and extent normalised by image width/height, in ``[0, 1]``
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, elementwise

FORMS = ("xyxy", "xywh", "cxcywh")


class BoxError(ValueError):
    pass


def _to_xyxy(box: np.ndarray, form: str, width: float, height: float) -> np.ndarray:
    if form == "xyxy":
        out = box.copy()
    elif form == "xywh":
        x, y, w, h = box
        if w < 0 or h < 0:
            raise BoxError(f"negative extent in xywh box {tuple(box)}")
        out = np.array([x, y, x + w, y + h])
    elif form == "cxcywh":
        cx, cy, w, h = box
        if w < 0 or h < 0:
            raise BoxError(f"negative extent in cxcywh box {tuple(box)}")
        out = np.array([(cx - w / 2) * width, (cy - h / 2) * height, (cx + w / 2) * width, (cy + h / 2) * height])
    else:
        raise BoxError(f"unknown box form {form!r}; expected one of {FORMS}")
    if out[2] < out[0] or out[3] < out[1]:
        raise BoxError(f"box has x2 < x1 or y2 < y1: {tuple(box)}")
    return out


def box_convert(box, from_form: str, to_form: str, image_dims: tuple[float, float] = (1.0, 1.0)) -> np.ndarray:
    """Convert one box between forms. ``image_dims`` is ``(width, height)``.

    Outputs are clamped to the image (or to ``[0, 1]`` for the normalised form).
    """
    width, height = image_dims
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (4,):
        raise BoxError(f"a box has 4 numbers, got shape {box.shape}")
    if from_form == to_form:
        _to_xyxy(box, from_form, width, height)
        return box.copy()
    x1, y1, x2, y2 = _to_xyxy(box, from_form, width, height)
    x1, x2 = np.clip([x1, x2], 0.0, width)
    y1, y2 = np.clip([y1, y2], 0.0, height)
    if to_form == "xyxy":
        return np.array([x1, y1, x2, y2])
    if to_form == "xywh":
        return np.array([x1, y1, x2 - x1, y2 - y1])
    if to_form == "cxcywh":
        return np.array([(x1 + x2) / 2 / width, (y1 + y2) / 2 / height, (x2 - x1) / width, (y2 - y1) / height])
    raise BoxError(f"unknown box form {to_form!r}; expected one of {FORMS}")


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    """Vectorised normalised centre form to normalised corners (no clamping)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def _area(b) -> float:
    return max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)


def iou(a, b) -> float:
    """IoU of two corner-form boxes.

    Zero-area boxes give 0, except two identical degenerate boxes which give 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    area_a, area_b = _area(a), _area(b)
    if area_a == 0.0 or area_b == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    return inter / (area_a + area_b - inter)


def giou(a, b) -> float:
    """Generalised IoU of two corner-form boxes, in ``[-1, 1]``.

    When the enclosing hull has zero area the hull term is dropped.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a[2] < a[0] or a[3] < a[1] or b[2] < b[0] or b[3] < b[1]:
        raise BoxError("giou needs boxes with x2 >= x1 and y2 >= y1")
    area_a, area_b = _area(a), _area(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = area_a + area_b - inter
    value = inter / union if union > 0 else (1.0 if np.array_equal(a, b) else 0.0)
    hull = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    if hull <= 0:
        return value
    return value - (hull - union) / hull


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU matrix between corner-form box arrays ``a[n, 4]`` and ``b[m, 4]``."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * (
        np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        penalty = np.where(hull > 0, (hull - union) / np.where(hull > 0, hull, 1.0), 0.0)
    return value - penalty


def giou_tensor(pred_cxcywh: Tensor, target_cxcywh: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted ``[M, 4]`` centre boxes and fixed targets.

    Built from tape ops so gradients reach the predicted coordinates.
    """
    t = cxcywh_to_xyxy(target_cxcywh)
    cx, cy, w, h = (pred_cxcywh[:, i] for i in range(4))
    px1, py1 = cx - w * 0.5, cy - h * 0.5
    px2, py2 = cx + w * 0.5, cy + h * 0.5
    tx1, ty1, tx2, ty2 = (t[:, i] for i in range(4))

    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    iw = elementwise("relu", elementwise("minimum", px2, tx2) - elementwise("maximum", px1, tx1))
    ih = elementwise("relu", elementwise("minimum", py2, ty2) - elementwise("maximum", py1, ty1))
    inter = iw * ih
    union = area_p + area_t - inter
    hull = (elementwise("maximum", px2, tx2) - elementwise("minimum", px1, tx1)) * (
        elementwise("maximum", py2, ty2) - elementwise("minimum", py1, ty1)
    )
    return inter / union - (hull - union) / hull
