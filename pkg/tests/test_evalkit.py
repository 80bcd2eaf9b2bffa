import numpy as np
import pytest
import torch

from elasticdet.errors import AnnotationError
from elasticdet.evalkit import (
    EvalResult,
    dataset_ground_truth,
    evaluate_ap,
    evaluate_config,
    extract_predictions,
)
from elasticdet.model import ModelConfig


def _record(boxes, scores=None, labels=None, masks=None):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    record = {"boxes": boxes, "labels": np.asarray(labels if labels is not None
                                                   else np.zeros(len(boxes)), dtype=np.int64)}
    if scores is not None:
        record["scores"] = np.asarray(scores, dtype=np.float64)
    if masks is not None:
        record["masks"] = np.asarray(masks, dtype=bool)
    return record


class TestEvaluateAp:
    def test_perfect_predictions(self):
        gt = [_record([[0, 0, 10, 10], [20, 20, 40, 40]], labels=[0, 1])]
        preds = [_record([[0, 0, 10, 10], [20, 20, 40, 40]], scores=[1.0, 1.0], labels=[0, 1])]
        result = evaluate_ap(preds, gt)
        assert result.ap == result.ap50 == result.ap75 == 1.0
        assert result.per_class == {0: 1.0, 1: 1.0}

    def test_zero_predictions(self):
        gt = [_record([[0, 0, 10, 10]], labels=[0])]
        preds = [_record(np.zeros((0, 4)), scores=[], labels=[])]
        result = evaluate_ap(preds, gt)
        assert result.ap == result.ap50 == result.ap75 == 0.0

    def test_hand_computed_fixture(self):
        # 1 image, 2 GT, 3 predictions; P1 overlaps GT A with IoU 0.62, so it
        # matches at thresholds .50/.55/.60 only. PR curve: [1, 1/2, 1/3] at
        # recall [.5, .5, .5]; 101-point interpolation gives 51/101 per
        # matching threshold. Values frozen from the independent reference
        # below, which mirrors the COCO accumulate algorithm.
        gt = [_record([[0, 0, 10, 10], [20, 20, 30, 30]], labels=[0, 0])]
        preds = [_record([[0, 0, 10, 6.2], [20, 20, 30, 24], [50, 50, 60, 60]],
                         scores=[0.9, 0.8, 0.7], labels=[0, 0, 0])]
        result = evaluate_ap(preds, gt)
        assert result.ap50 == pytest.approx(51 / 101, abs=1e-12)
        assert result.ap75 == 0.0
        assert result.ap == pytest.approx(3 * 51 / 1010, abs=1e-12)
        reference = _reference_coco_ap(preds[0], gt[0])
        assert result.ap == pytest.approx(reference, abs=1e-12)

    def test_ap_le_ap50(self):
        rng = np.random.default_rng(3)
        gt, preds = [], []
        for _ in range(4):
            boxes = rng.uniform(0, 50, (3, 2))
            gt_boxes = np.concatenate([boxes, boxes + rng.uniform(5, 20, (3, 2))], axis=1)
            gt.append(_record(gt_boxes, labels=rng.integers(0, 2, 3)))
            jitter = gt_boxes + rng.normal(0, 2.0, gt_boxes.shape)
            jitter[:, 2:] = np.maximum(jitter[:, 2:], jitter[:, :2] + 1)
            preds.append(_record(jitter, scores=rng.uniform(0.1, 1.0, 3),
                                 labels=rng.integers(0, 2, 3)))
        result = evaluate_ap(preds, gt)
        assert 0.0 <= result.ap <= result.ap50 <= 1.0

    def test_score_monotonic_transform_invariance(self):
        rng = np.random.default_rng(4)
        gt = [_record([[0, 0, 10, 10], [30, 30, 50, 50]], labels=[0, 1])]
        boxes = rng.uniform(0, 40, (5, 2))
        pred_boxes = np.concatenate([boxes, boxes + 12], axis=1)
        scores = rng.uniform(0.05, 0.95, 5)
        labels = rng.integers(0, 2, 5)
        base = evaluate_ap([_record(pred_boxes, scores=scores, labels=labels)], gt)
        squashed = evaluate_ap([_record(pred_boxes, scores=scores ** 3, labels=labels)], gt)
        shifted = evaluate_ap([_record(pred_boxes, scores=scores * 0.5 + 0.01, labels=labels)], gt)
        assert base.ap == squashed.ap == shifted.ap
        assert base.ap50 == squashed.ap50 == shifted.ap50

    def test_duplicate_lower_score_tp_never_raises_ap(self):
        gt = [_record([[0, 0, 10, 10], [20, 20, 30, 30]], labels=[0, 0])]
        preds = [_record([[0, 0, 10, 10]], scores=[0.9], labels=[0])]
        base = evaluate_ap(preds, gt)
        dup = [_record([[0, 0, 10, 10], [0, 0, 10, 10]], scores=[0.9, 0.3], labels=[0, 0])]
        with_dup = evaluate_ap(dup, gt)
        assert with_dup.ap <= base.ap
        assert with_dup.ap50 <= base.ap50

    def test_mask_ap_perfect_on_identical_masks(self):
        masks = np.zeros((2, 32, 32), dtype=bool)
        masks[0, 4:12, 4:12] = True
        masks[1, 20:30, 18:28] = True
        boxes = [[4, 4, 12, 12], [18, 20, 28, 30]]
        gt = [_record(boxes, labels=[0, 1], masks=masks)]
        preds = [_record(boxes, scores=[0.9, 0.8], labels=[0, 1], masks=masks)]
        result = evaluate_ap(preds, gt, iou_kind="mask")
        assert result.ap == 1.0

    def test_mask_iou_separates_shifted_masks(self):
        gt_mask = np.zeros((1, 16, 16), dtype=bool)
        gt_mask[0, 0:8, 0:8] = True
        pred_mask = np.zeros((1, 16, 16), dtype=bool)
        pred_mask[0, 4:12, 0:8] = True  # IoU = 32/96 = 1/3 < 0.5
        gt = [_record([[0, 0, 8, 8]], labels=[0], masks=gt_mask)]
        preds = [_record([[0, 4, 8, 12]], scores=[0.9], labels=[0], masks=pred_mask)]
        assert evaluate_ap(preds, gt, iou_kind="mask").ap50 == 0.0

    def test_malformed_record_identified(self):
        gt = [_record([[0, 0, 10, 10]], labels=[0])]
        with pytest.raises(AnnotationError, match="prediction record 0.*scores"):
            evaluate_ap([{"boxes": np.zeros((1, 4)), "labels": np.zeros(1)}], gt)
        with pytest.raises(AnnotationError, match="ground-truth record 1"):
            evaluate_ap(
                [_record(np.zeros((0, 4)), scores=[], labels=[])] * 2,
                [gt[0], {"boxes": np.zeros((2, 4))}],
            )

    def test_unknown_iou_kind(self):
        with pytest.raises(ValueError):
            evaluate_ap([], [], iou_kind="volume")


def _reference_coco_ap(pred, gt):
    """Independent COCO accumulate: greedy best-IoU matching per threshold,
    precision envelope, 101 recall points; single image, single class."""

    def iou(a, b):
        ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
        ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
        inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
        ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
        return inter / ua

    aps = []
    order = np.argsort(-pred["scores"], kind="stable")
    for thr in np.linspace(0.5, 0.95, 10):
        matched = [False] * len(gt["boxes"])
        tp = []
        for det in order:
            best, best_iou = -1, min(thr, 1 - 1e-10)
            for gi, gbox in enumerate(gt["boxes"]):
                if matched[gi]:
                    continue
                value = iou(pred["boxes"][det], gbox)
                if value < best_iou:
                    continue
                best, best_iou = gi, value
            if best >= 0:
                matched[best] = True
                tp.append(1.0)
            else:
                tp.append(0.0)
        tp = np.array(tp)
        recall = np.cumsum(tp) / len(gt["boxes"])
        precision = np.cumsum(tp) / (np.arange(len(tp)) + 1)
        for i in range(len(precision) - 1, 0, -1):
            precision[i - 1] = max(precision[i - 1], precision[i])
        idx = np.searchsorted(recall, np.linspace(0, 1, 101), side="left")
        sampled = [precision[i] if i < len(precision) else 0.0 for i in idx]
        aps.append(np.mean(sampled))
    return float(np.mean(aps))


class TestEvaluateConfig:
    def test_deterministic(self, tiny_weights, shapes_dataset):
        cfg = ModelConfig(64, 16, 1, 1, 8, False)
        a = evaluate_config(tiny_weights, cfg, shapes_dataset)
        b = evaluate_config(tiny_weights, cfg, shapes_dataset)
        assert a.ap == b.ap and a.ap50 == b.ap50

    def test_ap_in_unit_interval(self, tiny_weights, shapes_dataset):
        cfg = ModelConfig(64, 16, 2, 2, 8, False)
        result = evaluate_config(tiny_weights, cfg, shapes_dataset)
        assert 0.0 <= result.ap <= 1.0
        assert 0.0 <= result.ap50 <= 1.0

    def test_more_queries_never_fewer_candidates(self, tiny_weights, shapes_dataset):
        from elasticdet.model import model_forward
        from elasticdet.training import batch_resize, dataset_to_samples

        samples = dataset_to_samples(shapes_dataset, with_masks=False)[:4]
        images, _ = batch_resize(samples, 64)
        small = ModelConfig(64, 8, 1, 1, 8, False)
        big = ModelConfig(64, 8, 1, 1, 16, False)
        with torch.no_grad():
            n_small = extract_predictions(model_forward(images, small, tiny_weights), 64)
            n_big = extract_predictions(model_forward(images, big, tiny_weights), 64)
        for s_rec, b_rec in zip(n_small, n_big):
            assert len(b_rec["boxes"]) >= len(s_rec["boxes"])

    def test_oracle_predictions_score_one(self, shapes_dataset):
        # ground truth fed back as predictions closes the loop at AP 1.0
        gt = dataset_ground_truth(shapes_dataset, with_masks=True)
        preds = [dict(r, scores=np.ones(len(r["boxes"]))) for r in gt]
        assert evaluate_ap(preds, gt, iou_kind="box").ap == 1.0
        assert evaluate_ap(preds, gt, iou_kind="mask").ap == 1.0

    def test_eval_result_serializes(self):
        result = EvalResult(ap=0.5, ap50=0.75, ap75=0.25, per_class={0: 0.5})
        d = result.to_dict()
        assert d["ap"] == 0.5 and d["per_class"] == {"0": 0.5}
