"""Scheduler-free weight-sharing training.

Every step samples one sub-network uniformly from the search space, resizes
the batch to that config's resolution, and applies the bipartite-matching
detection loss at the encoder stage and at every decoder layer. There is no
learning-rate schedule, no warm-up, and no augmentation schedule: all
hyperparameters are constant for the whole run.
"""

from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .boxes import box_iou, cxcywh_to_xyxy, generalized_box_iou
from .datasynth import Dataset
from .errors import TrainingDivergedError
from .model.config import ModelConfig
from .model.network import DetectionOutput, ElasticWeights, model_forward
from .nas import SearchSpace, sample_config

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass(frozen=True)
class LossWeights:
    class_: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    mask: float = 2.0
    dice: float = 2.0


@dataclass(frozen=True)
class TrainerConfig:
    """Constant hyperparameters for one run; there are no schedule fields.

    The defaults scale the reference recipe (lr 1e-4 at batch 128) linearly
    down to desk-scale batches. Gradients are clipped to a global norm of
    0.1 and backbone layers decay the learning rate by 0.8 per layer from
    the top.
    """

    steps: int = 1000
    batch_size: int = 16
    base_lr: float = 1e-4 * 16 / 128
    weight_decay: float = 1e-4
    grad_clip_norm: float = 0.1
    layer_lr_decay: float = 0.8
    ema_decay: float = 0.999
    loss_weights: LossWeights = LossWeights()
    flip_prob: float = 0.5
    crop_prob: float = 0.5
    crop_min_frac: float = 0.7
    crop_retention: float = 0.3
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = asdict(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        d = dict(d)
        if isinstance(d.get("loss_weights"), dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)


@dataclass
class TrainSample:
    image: np.ndarray            # uint8 (H, W, 3)
    boxes: np.ndarray            # normalized cxcywh (n, 4)
    class_ids: np.ndarray        # (n,)
    masks: np.ndarray | None = None  # bool (n, H, W)


def dataset_to_samples(dataset: Dataset, with_masks: bool = True) -> list[TrainSample]:
    samples = []
    for img, anns in zip(dataset.images, dataset.annotations):
        boxes = np.stack([a.box_cxcywh for a in anns]) if anns else np.zeros((0, 4))
        class_ids = np.array([a.class_id for a in anns], dtype=np.int64)
        masks = np.stack([a.mask for a in anns]) if (anns and with_masks) else None
        samples.append(TrainSample(image=img, boxes=boxes, class_ids=class_ids, masks=masks))
    return samples


# --- batch assembly and augmentation -----------------------------------------

def batch_resize(samples: Sequence[TrainSample], resolution: int) -> tuple[Tensor, list[dict]]:
    """Square-resize every sample to resolution x resolution; zero padding.

    The resize is non-aspect-preserving, so normalized box coordinates are
    unchanged. Returns the image batch in [0, 1] and per-image target dicts.
    """
    images, targets = [], []
    for s in samples:
        img = torch.from_numpy(np.array(s.image, copy=True)).permute(2, 0, 1).float() / 255.0
        if img.shape[-2:] != (resolution, resolution):
            img = F.interpolate(img.unsqueeze(0), size=(resolution, resolution),
                                mode="bilinear", align_corners=False).squeeze(0)
        images.append(img)
        target = {
            "boxes": torch.from_numpy(s.boxes).float(),
            "labels": torch.from_numpy(s.class_ids).long(),
        }
        if s.masks is not None:
            if len(s.masks) == 0:
                target["masks"] = torch.zeros(0, resolution, resolution)
            else:
                masks = torch.from_numpy(np.array(s.masks, copy=True)).float().unsqueeze(0)
                if masks.shape[-2:] != (resolution, resolution):
                    masks = F.interpolate(masks, size=(resolution, resolution), mode="nearest")
                target["masks"] = masks.squeeze(0)
        targets.append(target)
    return torch.stack(images), targets


def augment(sample: TrainSample, rng: np.random.Generator,
            flip_prob: float = 0.5, crop_prob: float = 0.5,
            crop_min_frac: float = 0.7, crop_retention: float = 0.3) -> TrainSample:
    """Horizontal flip and random crop only; nothing else, ever.

    Cropped boxes are clipped to the window and dropped when they retain less
    than ``crop_retention`` of their original area.
    """
    image, boxes, class_ids, masks = sample.image, sample.boxes, sample.class_ids, sample.masks

    if rng.random() < flip_prob:
        image = image[:, ::-1].copy()
        boxes = boxes.copy()
        if len(boxes):
            boxes[:, 0] = 1.0 - boxes[:, 0]
        masks = masks[:, :, ::-1].copy() if masks is not None else None

    if rng.random() < crop_prob:
        h, w = image.shape[:2]
        fw = rng.uniform(crop_min_frac, 1.0)
        fh = rng.uniform(crop_min_frac, 1.0)
        cw, ch = max(1, round(w * fw)), max(1, round(h * fh))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        image = image[y0:y0 + ch, x0:x0 + cw].copy()
        keep, new_boxes, new_masks = [], [], []
        for i in range(len(boxes)):
            cx, cy, bw, bh = boxes[i]
            bx0, by0 = (cx - bw / 2) * w, (cy - bh / 2) * h
            bx1, by1 = (cx + bw / 2) * w, (cy + bh / 2) * h
            ix0, iy0 = max(bx0, x0), max(by0, y0)
            ix1, iy1 = min(bx1, x0 + cw), min(by1, y0 + ch)
            new_area = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
            old_area = (bx1 - bx0) * (by1 - by0)
            if old_area <= 0 or new_area / old_area < crop_retention:
                continue
            keep.append(i)
            new_boxes.append([
                ((ix0 + ix1) / 2 - x0) / cw, ((iy0 + iy1) / 2 - y0) / ch,
                (ix1 - ix0) / cw, (iy1 - iy0) / ch,
            ])
        boxes = np.array(new_boxes, dtype=np.float64).reshape(-1, 4)
        class_ids = class_ids[keep]
        if masks is not None:
            masks = masks[keep][:, y0:y0 + ch, x0:x0 + cw].copy()

    return TrainSample(image=image, boxes=boxes, class_ids=class_ids, masks=masks)


# --- matching and loss --------------------------------------------------------

def solve_assignment(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost one-to-one assignment on a rectangular cost matrix."""
    rows, cols = linear_sum_assignment(cost)
    return rows, cols


def _focal_class_cost(logits: Tensor, gt_classes: Tensor) -> Tensor:
    p = logits.sigmoid()
    pos = FOCAL_ALPHA * ((1 - p) ** FOCAL_GAMMA) * (-(p + 1e-8).log())
    neg = (1 - FOCAL_ALPHA) * (p ** FOCAL_GAMMA) * (-(1 - p + 1e-8).log())
    return pos[:, gt_classes] - neg[:, gt_classes]


def hungarian_match(
    pred_boxes: Tensor,
    pred_logits: Tensor,
    gt_boxes: Tensor,
    gt_classes: Tensor,
    loss_weights: LossWeights = LossWeights(),
) -> tuple[np.ndarray, np.ndarray]:
    """One-to-one matching of predictions to targets.

    Cost is the weighted sum of a focal-style classification term, an L1 box
    term, and a negated generalized-IoU term; either side may be empty.
    Returns (prediction indices, target indices).
    """
    if len(gt_boxes) == 0 or len(pred_boxes) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    with torch.no_grad():
        cost_class = _focal_class_cost(pred_logits, gt_classes)
        cost_l1 = torch.cdist(pred_boxes, gt_boxes, p=1)
        cost_giou = -generalized_box_iou(cxcywh_to_xyxy(pred_boxes), cxcywh_to_xyxy(gt_boxes))
        cost = (loss_weights.class_ * cost_class
                + loss_weights.l1 * cost_l1
                + loss_weights.giou * cost_giou)
        # keep the assignment solvable under non-finite predictions; the loss
        # itself still reports non-finite and the step gets rejected
        cost = torch.nan_to_num(cost, nan=1e6, posinf=1e6, neginf=-1e6)
    return solve_assignment(cost.double().numpy())


def sigmoid_focal_loss(logits: Tensor, targets: Tensor) -> Tensor:
    """Elementwise focal BCE, summed. Targets may be soft (IoU-aware)."""
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = FOCAL_ALPHA * targets + (1 - FOCAL_ALPHA) * (1 - targets)
    return (alpha_t * ((1 - p_t) ** FOCAL_GAMMA) * ce).sum()


def _dice_loss(mask_logits: Tensor, mask_targets: Tensor) -> Tensor:
    """Per-mask dice loss, summed over masks."""
    p = mask_logits.sigmoid().flatten(1)
    t = mask_targets.flatten(1)
    num = 2 * (p * t).sum(-1)
    den = p.sum(-1) + t.sum(-1)
    return (1 - (num + 1) / (den + 1)).sum()


def compute_loss(
    output: DetectionOutput,
    targets: list[dict],
    loss_weights: LossWeights = LossWeights(),
) -> tuple[Tensor, dict[str, float]]:
    """Matching loss summed over the encoder stage and every decoder layer.

    Each stage is matched independently. The encoder stage uses the dense
    per-token proposals when the output carries them (training), otherwise
    the selected stage-0 slice. All sums are normalized by the total number
    of ground-truth boxes in the batch. Mask and dice terms apply only when
    per-stage masks are present in the output.
    """
    boxes_all = output.per_layer_boxes
    logits_all = output.per_layer_logits
    masks_all = output.per_layer_masks
    b, num_stages, k, num_classes = logits_all.shape
    num_boxes = max(1, sum(len(t["boxes"]) for t in targets))
    device = boxes_all.device
    dense_encoder = output.encoder_logits is not None and output.encoder_boxes is not None

    totals = {"class": 0.0, "l1": 0.0, "giou": 0.0, "mask": 0.0, "dice": 0.0}
    zero = torch.zeros((), dtype=boxes_all.dtype, device=device)
    acc = {name: zero.clone() for name in totals}

    for s in range(num_stages):
        for i, target in enumerate(targets):
            gt_boxes = target["boxes"].to(boxes_all.dtype)
            gt_labels = target["labels"]

            if s == 0 and dense_encoder:
                logits = output.encoder_logits[i]
                boxes = output.encoder_boxes[i]
            else:
                logits = logits_all[i, s]
                boxes = boxes_all[i, s]
            pred_idx, gt_idx = hungarian_match(boxes, logits, gt_boxes, gt_labels, loss_weights)

            # IoU-aware class targets: matched predictions are supervised
            # toward their localization quality, so the detection score ranks
            # the best box per object above its near-duplicates
            targets_soft = torch.zeros_like(logits)
            if len(pred_idx):
                pb = boxes[pred_idx]
                gb = gt_boxes[gt_idx]
                iou, _ = box_iou(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(gb))
                quality = iou.diagonal().clamp(min=0.0, max=1.0)
                targets_soft = targets_soft.index_put(
                    (torch.as_tensor(pred_idx), gt_labels[gt_idx]), quality
                )
            acc["class"] = acc["class"] + sigmoid_focal_loss(logits, targets_soft)

            if len(pred_idx):
                acc["l1"] = acc["l1"] + (pb - gb).abs().sum()
                giou = generalized_box_iou(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(gb))
                acc["giou"] = acc["giou"] + (1 - giou.diagonal()).sum()

            if masks_all is not None and "masks" in target:
                # per-stage masks exist only for the selected queries, so the
                # mask terms always match over the stage slice itself
                if s == 0 and dense_encoder:
                    mask_pred_idx, mask_gt_idx = hungarian_match(
                        boxes_all[i, s], logits_all[i, s], gt_boxes, gt_labels, loss_weights)
                else:
                    mask_pred_idx, mask_gt_idx = pred_idx, gt_idx
                if len(mask_pred_idx):
                    pred_masks = masks_all[i, s][mask_pred_idx]
                    side = pred_masks.shape[-1]
                    gt_masks = F.interpolate(
                        target["masks"].unsqueeze(0).to(pred_masks.dtype),
                        size=(side, side), mode="bilinear", align_corners=False,
                    ).squeeze(0)[mask_gt_idx]
                    ce = F.binary_cross_entropy_with_logits(pred_masks, gt_masks, reduction="none")
                    acc["mask"] = acc["mask"] + ce.mean(dim=(-2, -1)).sum()
                    acc["dice"] = acc["dice"] + _dice_loss(pred_masks, gt_masks)

    weights_map = {"class": loss_weights.class_, "l1": loss_weights.l1,
                   "giou": loss_weights.giou, "mask": loss_weights.mask, "dice": loss_weights.dice}
    total = zero.clone()
    breakdown = {}
    for name in totals:
        value = acc[name] / num_boxes * weights_map[name]
        total = total + value
        breakdown[name] = float(value.detach())
    return total, breakdown


# --- optimizer, EMA, steps ----------------------------------------------------

def layer_lr_multipliers(num_layers: int, decay: float) -> list[float]:
    """Bottom-to-top multipliers: decay^(L-1-i) for block i."""
    return [decay ** (num_layers - 1 - i) for i in range(num_layers)]


def build_param_groups(weights: ElasticWeights, config: TrainerConfig) -> list[dict]:
    """Backbone blocks get per-layer decayed lr; embeddings sit below the
    bottom block; heads, projector and decoder train at the base rate."""
    decay = config.layer_lr_decay
    depth = weights.arch.enc_depth
    multipliers = layer_lr_multipliers(depth, decay)
    groups = []
    embed_params = [weights.patch_proj.weight, weights.patch_proj.bias,
                    weights.cls_token, weights.pos_grid, weights.pos_cls]
    groups.append({"params": embed_params, "lr": config.base_lr * decay ** depth,
                   "lr_mult": decay ** depth, "name": "embeddings"})
    for i, block in enumerate(weights.blocks):
        groups.append({"params": list(block.parameters()), "lr": config.base_lr * multipliers[i],
                       "lr_mult": multipliers[i], "name": f"encoder_block_{i}"})
    covered = {id(p) for g in groups for p in g["params"]}
    rest = [p for p in weights.parameters() if id(p) not in covered]
    groups.append({"params": rest, "lr": config.base_lr, "lr_mult": 1.0, "name": "head"})
    return groups


def ema_update(ema_params: dict[str, Tensor], params: dict[str, Tensor], decay: float) -> dict[str, Tensor]:
    """e' = decay * e + (1 - decay) * p, elementwise and in place."""
    for name, p in params.items():
        e = ema_params[name]
        if e.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(e.shape)} vs {tuple(p.shape)}")
        e.mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    return ema_params


@dataclass
class StepRecord:
    step: int
    config: dict
    loss: float
    breakdown: dict[str, float]
    grad_norm: float
    lr_by_group: dict[str, float]
    augment_policy: dict[str, float]


@dataclass
class TrainState:
    weights: ElasticWeights
    optimizer: torch.optim.AdamW
    ema: dict[str, Tensor]
    rng: np.random.Generator
    space: SearchSpace
    config: TrainerConfig
    step: int = 0
    log: list[StepRecord] = field(default_factory=list)


def build_train_state(weights: ElasticWeights, space: SearchSpace, config: TrainerConfig) -> TrainState:
    optimizer = torch.optim.AdamW(build_param_groups(weights, config),
                                  lr=config.base_lr, weight_decay=config.weight_decay)
    ema = {name: p.detach().clone() for name, p in weights.state_dict().items()}
    rng = np.random.default_rng(config.seed)
    return TrainState(weights=weights, optimizer=optimizer, ema=ema, rng=rng,
                      space=space, config=config)


def training_space(space: SearchSpace) -> SearchSpace:
    """Depth 0 stays available at inference but is never sampled during
    training: every decoder layer of the sampled sub-net is supervised."""
    from .errors import InvalidSpaceError

    depths = tuple(d for d in space.decoder_depths if d > 0)
    if not depths:
        raise InvalidSpaceError("training requires a nonzero decoder depth in the space")
    return SearchSpace(resolutions=space.resolutions, patch_sizes=space.patch_sizes,
                       window_counts=space.window_counts, decoder_depths=depths,
                       query_counts=space.query_counts)


def train_step(state: TrainState, batch: Sequence[TrainSample],
               space: SearchSpace | None = None,
               rng: np.random.Generator | None = None) -> TrainState:
    """One gradient update through one uniformly sampled sub-network."""
    space = training_space(space if space is not None else state.space)
    rng = rng if rng is not None else state.rng
    cfg_train = state.config
    weights = state.weights
    mask_head = weights.arch.mask_head

    cfg = sample_config(space, rng, mask_head_enabled=mask_head)
    augmented = [
        augment(s, rng, cfg_train.flip_prob, cfg_train.crop_prob,
                cfg_train.crop_min_frac, cfg_train.crop_retention)
        for s in batch
    ]
    images, targets = batch_resize(augmented, cfg.resolution)

    weights.train()
    output = model_forward(images, cfg, weights, with_all_masks=mask_head)
    loss, breakdown = compute_loss(output, targets, cfg_train.loss_weights)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss at step {state.step}: {breakdown} under config {cfg.to_dict()}"
        )

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(weights.parameters(), cfg_train.grad_clip_norm)
    state.optimizer.step()
    ema_update(state.ema, dict(weights.state_dict()), cfg_train.ema_decay)

    state.step += 1
    state.log.append(StepRecord(
        step=state.step,
        config=cfg.to_dict(),
        loss=float(loss.detach()),
        breakdown=breakdown,
        grad_norm=float(grad_norm),
        lr_by_group={g["name"]: g["lr"] for g in state.optimizer.param_groups},
        augment_policy={"flip_prob": cfg_train.flip_prob, "crop_prob": cfg_train.crop_prob,
                        "crop_min_frac": cfg_train.crop_min_frac,
                        "crop_retention": cfg_train.crop_retention},
    ))
    return state


def train(state: TrainState, samples: Sequence[TrainSample],
          checkpoint_dir: str | Path | None = None) -> TrainState:
    """Run state.config.steps steps of uniform sub-net sampling."""
    cfg = state.config
    n = len(samples)
    while state.step < cfg.steps:
        idx = state.rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = [samples[int(i)] for i in idx]
        train_step(state, batch)
        if (checkpoint_dir is not None and cfg.checkpoint_every > 0
                and state.step % cfg.checkpoint_every == 0):
            save_checkpoint(Path(checkpoint_dir) / f"step{state.step:06d}.ckpt", state)
    return state


def ema_weights(state: TrainState) -> ElasticWeights:
    """A fresh inference model loaded with the EMA parameter copy."""
    model = ElasticWeights(state.weights.arch)
    model.load_state_dict({k: v.clone() for k, v in state.ema.items()})
    model.eval()
    return model


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    torch.save({
        "format": "elasticdet-checkpoint-v1",
        "arch": state.weights.arch.to_dict(),
        "state_dict": state.weights.state_dict(),
        "ema": state.ema,
        "optimizer": state.optimizer.state_dict(),
        "rng_state": state.rng.bit_generator.state,
        "space": state.space.to_dict(),
        "trainer": state.config.to_dict(),
        "step": state.step,
        "log": [asdict(r) for r in state.log],
    }, path)


def load_checkpoint(path: str | Path) -> TrainState:
    """Bit-exact resume: weights, EMA, optimizer moments and rng state."""
    from .model.network import ArchConfig

    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "elasticdet-checkpoint-v1":
        raise ValueError(f"{path} is not a training checkpoint")
    weights = ElasticWeights(ArchConfig.from_dict(payload["arch"]))
    weights.load_state_dict(payload["state_dict"])
    config = TrainerConfig.from_dict(payload["trainer"])
    state = build_train_state(weights, SearchSpace.from_dict(payload["space"]), config)
    state.optimizer.load_state_dict(payload["optimizer"])
    state.ema = payload["ema"]
    state.rng.bit_generator.state = payload["rng_state"]
    state.step = payload["step"]
    state.log = [StepRecord(**r) for r in payload["log"]]
    return state
