"""COCO-protocol average precision, reimplemented.

The protocol: per class and IoU threshold (0.50:0.05:0.95), predictions are
matched greedily in descending score order to the best still-unmatched
ground truth of that class in the same image; precision is interpolated at
101 recall points and averaged over thresholds and classes with ground
truth. maxDets is 100 per image. Masks use pixelwise IoU instead of boxes.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .datasynth import Dataset
from .errors import AnnotationError
from .model.config import ModelConfig
from .model.network import ElasticWeights, model_forward
from .training import batch_resize, dataset_to_samples

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    per_class: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
                "per_class": {str(k): v for k, v in self.per_class.items()}}


def _box_iou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    ix0 = np.maximum(pred[:, None, 0], gt[None, :, 0])
    iy0 = np.maximum(pred[:, None, 1], gt[None, :, 1])
    ix1 = np.minimum(pred[:, None, 2], gt[None, :, 2])
    iy1 = np.minimum(pred[:, None, 3], gt[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_p = (pred[:, 2] - pred[:, 0]) * (pred[:, 3] - pred[:, 1])
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    union = area_p[:, None] + area_g[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def _mask_iou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    p = pred.reshape(len(pred), -1).astype(np.float64)
    g = gt.reshape(len(gt), -1).astype(np.float64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def _validate_record(record: dict, index: int, kind: str, need_scores: bool, need_masks: bool) -> None:
    required = ["boxes", "labels"] + (["scores"] if need_scores else [])
    if need_masks:
        required.append("masks")
    for key in required:
        if key not in record:
            raise AnnotationError(f"{kind} record {index}: missing field {key!r}")
    n = len(record["boxes"])
    for key in required:
        if len(record[key]) != n:
            raise AnnotationError(
                f"{kind} record {index}: field {key!r} has length {len(record[key])}, expected {n}"
            )
    boxes = np.asarray(record["boxes"], dtype=np.float64)
    if boxes.size and (boxes.ndim != 2 or boxes.shape[1] != 4):
        raise AnnotationError(f"{kind} record {index}: boxes must be (n, 4)")


def evaluate_ap(predictions: list[dict], ground_truth: list[dict], iou_kind: str = "box") -> EvalResult:
    """predictions/ground_truth: one dict per image.

    Predictions carry 'boxes' (xyxy absolute), 'scores', 'labels' and, for
    iou_kind='mask', boolean 'masks'. Ground truth carries 'boxes', 'labels'
    and optionally 'masks'.
    """
    if iou_kind not in ("box", "mask"):
        raise ValueError(f"iou_kind must be 'box' or 'mask', got {iou_kind!r}")
    if len(predictions) != len(ground_truth):
        raise AnnotationError(
            f"got {len(predictions)} prediction records for {len(ground_truth)} images"
        )
    use_masks = iou_kind == "mask"
    for i, (p, g) in enumerate(zip(predictions, ground_truth)):
        _validate_record(p, i, "prediction", need_scores=True, need_masks=use_masks)
        _validate_record(g, i, "ground-truth", need_scores=False, need_masks=use_masks)

    classes = sorted({int(c) for g in ground_truth for c in np.asarray(g["labels"]).reshape(-1)})
    if not classes:
        return EvalResult(ap=0.0, ap50=0.0, ap75=0.0)

    # ap_matrix[t, c]
    ap_matrix = np.zeros((len(IOU_THRESHOLDS), len(classes)))
    for ci, cls in enumerate(classes):
        scores_all, match_iou_all, n_gt = [], [], 0
        for img, (pred, gt) in enumerate(zip(predictions, ground_truth)):
            p_labels = np.asarray(pred["labels"]).reshape(-1)
            g_labels = np.asarray(gt["labels"]).reshape(-1)
            p_sel = np.flatnonzero(p_labels == cls)
            g_sel = np.flatnonzero(g_labels == cls)
            n_gt += len(g_sel)
            if len(p_sel) == 0:
                continue
            scores = np.asarray(pred["scores"], dtype=np.float64)[p_sel]
            order = np.argsort(-scores, kind="stable")[:MAX_DETS]
            p_sel = p_sel[order]
            scores = scores[order]
            if len(g_sel):
                if use_masks:
                    iou = _mask_iou_matrix(np.asarray(pred["masks"])[p_sel],
                                           np.asarray(gt["masks"])[g_sel])
                else:
                    iou = _box_iou_matrix(np.asarray(pred["boxes"], dtype=np.float64)[p_sel],
                                          np.asarray(gt["boxes"], dtype=np.float64)[g_sel])
            else:
                iou = np.zeros((len(p_sel), 0))
            scores_all.append(scores)
            match_iou_all.append((img, iou))

        # classes are drawn from the ground truth, so n_gt >= 1 here
        if not scores_all:
            ap_matrix[:, ci] = 0.0
            continue

        # Merge detections across images in global descending-score order.
        flat_scores = np.concatenate(scores_all)
        owner = np.concatenate([
            np.full(len(s), i) for i, s in enumerate(scores_all)
        ])
        within = np.concatenate([np.arange(len(s)) for s in scores_all])
        global_order = np.argsort(-flat_scores, kind="stable")

        for ti, thr in enumerate(IOU_THRESHOLDS):
            gt_matched = {i: np.zeros(m.shape[1], dtype=bool) for i, (_, m) in enumerate(match_iou_all)}
            tp = np.zeros(len(global_order))
            for rank, det in enumerate(global_order):
                blk = int(owner[det])
                row = int(within[det])
                _, iou = match_iou_all[blk]
                best, best_iou = -1, min(thr, 1 - 1e-10)
                for gi in range(iou.shape[1]):
                    if gt_matched[blk][gi]:
                        continue
                    if iou[row, gi] < best_iou:
                        continue
                    best, best_iou = gi, iou[row, gi]
                if best >= 0:
                    gt_matched[blk][best] = True
                    tp[rank] = 1.0
            cum_tp = np.cumsum(tp)
            cum_fp = np.cumsum(1.0 - tp)
            recall = cum_tp / n_gt
            precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
            precision = np.maximum.accumulate(precision[::-1])[::-1]
            idx = np.searchsorted(recall, RECALL_POINTS, side="left")
            sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
            ap_matrix[ti, ci] = sampled.mean()

    per_threshold = ap_matrix.mean(axis=1)
    per_class = {cls: float(ap_matrix[:, ci].mean()) for ci, cls in enumerate(classes)}
    return EvalResult(
        ap=float(per_threshold.mean()),
        ap50=float(per_threshold[0]),
        ap75=float(per_threshold[5]),
        per_class=per_class,
    )


def dataset_ground_truth(dataset: Dataset, with_masks: bool = False) -> list[dict]:
    """Ground-truth records (xyxy absolute boxes) for evaluate_ap."""
    size = dataset.spec.image_size
    records = []
    for anns in dataset.annotations:
        boxes = []
        for a in anns:
            cx, cy, w, h = a.box_cxcywh * size
            boxes.append([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
        record = {
            "boxes": np.array(boxes, dtype=np.float64).reshape(-1, 4),
            "labels": np.array([a.class_id for a in anns], dtype=np.int64),
        }
        if with_masks:
            record["masks"] = (np.stack([a.mask for a in anns])
                               if anns else np.zeros((0, size, size), dtype=bool))
        records.append(record)
    return records


def extract_predictions(output, image_size: int, with_masks: bool = False) -> list[dict]:
    """Final-stage DetectionOutput -> per-image scored prediction records.

    Each query contributes one prediction: label and score from the maximum
    sigmoid class probability, box scaled to absolute pixels.
    """
    logits = output.per_layer_logits[:, -1]      # [B, k, C]
    boxes = output.per_layer_boxes[:, -1]        # [B, k, 4]
    probs = torch.sigmoid(logits)
    scores, labels = probs.max(dim=-1)
    records = []
    for i in range(logits.shape[0]):
        cx, cy, w, h = (boxes[i] * image_size).unbind(-1)
        xyxy = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)
        record = {
            "boxes": xyxy.numpy().astype(np.float64),
            "scores": scores[i].numpy().astype(np.float64),
            "labels": labels[i].numpy().astype(np.int64),
        }
        if with_masks:
            if output.masks is None:
                raise AnnotationError("mask predictions requested but output has no masks")
            mask_logits = output.masks[i].unsqueeze(0)
            upsampled = torch.nn.functional.interpolate(
                mask_logits, size=(image_size, image_size), mode="bilinear", align_corners=False
            ).squeeze(0)
            record["masks"] = (upsampled > 0).numpy()
        records.append(record)
    return records


def evaluate_config(
    weights: ElasticWeights,
    config: ModelConfig,
    dataset: Dataset,
    iou_kind: str = "box",
    batch_size: int = 16,
) -> EvalResult:
    """Deterministic inference over the dataset followed by evaluate_ap."""
    weights.validate_config(config)
    weights.eval()
    use_masks = iou_kind == "mask"
    samples = dataset_to_samples(dataset, with_masks=False)
    size = dataset.spec.image_size
    predictions = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images, _ = batch_resize(chunk, config.resolution)
            output = model_forward(images, config, weights)
            predictions.extend(extract_predictions(output, size, with_masks=use_masks))
    return evaluate_ap(predictions, dataset_ground_truth(dataset, with_masks=use_masks), iou_kind=iou_kind)
