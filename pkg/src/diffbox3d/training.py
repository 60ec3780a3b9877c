"""Teacher-student orchestration: diffusion training step, pseudo-label
generation with DDIM sampling plus box renewal and filtering, and the combined
semi-supervised objective.

The student trains on corrupted (pseudo) ground truths; the teacher is an EMA
copy that denoises randomly initialized size/label states to emit pseudo-labels
for unlabeled scenes. Evaluation reuses the same denoising inference path
without the confidence filter.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import detector as det
from .diffusion import (
    DiffusionState,
    NoiseSchedule,
    ScalingConfig,
    corrupt,
    ddim_update,
    scale_signal,
    timestep_pairs,
    unscale_signal,
)
from .geometry import Box3, greedy_nms
from .metrics import Detection, map_at, pseudo_label_quality
from .netcore import OptimState, ParamStore, adamw_step, ema_update
from .synthdata import Scene, apply_inverse_to_boxes, apply_to_boxes, augment


@dataclass
class SslConfig:
    """Hyperparameters of the diffusion SSL loop."""

    lambda_u: float = 2.0  # unlabeled loss weight
    n_b: int = 128
    T: int = 1000
    ddim_steps: int = 2
    size_scale: float = 4.0
    label_scale: float = 4.0
    mu_size: float = 0.25  # mean of the random size sampling, in [0, 1] units
    mu_label: float | None = None  # None -> 1 / n_classes
    thr_obj: float = 0.9
    thr_cls: float = 0.9
    thr_iou: float = 0.25
    tau_renew: float = 0.5
    renewal_use_iou: bool = False
    ema_decay: float = 0.999
    batch_labeled: int = 4
    batch_unlabeled: int = 8
    nms_iou: float = 0.25
    pad_size_lo: float = 0.05
    pad_size_hi: float = 0.6
    # training schedule (desk-scale rescaling of the reference schedules)
    pretrain_epochs: int = 200
    ssl_epochs: int = 300
    lr: float = 0.005
    weight_decay: float = 1e-4
    pretrain_milestones: tuple = (4 / 9, 6 / 9, 8 / 9)
    pretrain_decays: tuple = (0.1, 0.1, 0.1)
    ssl_lr: float | None = None  # None -> fine-tune at lr / 10
    ssl_milestones: tuple = (0.4, 0.6, 0.8, 0.9)
    ssl_decays: tuple = (0.3, 0.3, 0.1, 0.1)
    # ablation toggles
    size_diffusion: bool = True
    label_diffusion: bool = True
    ddim_enabled: bool = True
    renewal_enabled: bool = True
    sampling_strategy: str = "fps"
    # bookkeeping
    plq_interval: int = 10

    def __post_init__(self):
        for name in ("thr_obj", "thr_cls", "thr_iou", "tau_renew"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be >= 0")
        if self.sampling_strategy not in ("fps", "random"):
            raise ValueError(f"unknown sampling_strategy {self.sampling_strategy!r}")

    def label_mean(self, n_classes: int) -> float:
        return self.mu_label if self.mu_label is not None else 1.0 / n_classes

    @property
    def scaling(self) -> ScalingConfig:
        return ScalingConfig(size_scale=self.size_scale, label_scale=self.label_scale)


@dataclass
class PseudoLabel:
    """A surviving teacher prediction used as surrogate ground truth."""

    box: Box3
    class_id: int
    objectness: float
    class_conf: float
    iou_est: float

    @property
    def score(self) -> float:
        return self.objectness * self.class_conf


# ---------------------------------------------------------------------------
# Noisy-state construction
# ---------------------------------------------------------------------------


def init_noisy_state(
    n_b: int, n_classes: int, cfg: SslConfig, rng: np.random.Generator, t: int
) -> DiffusionState:
    """Unit-variance Gaussians centered at the scaled sampling means."""
    size_center = scale_signal(cfg.mu_size, cfg.size_scale)
    label_center = scale_signal(cfg.label_mean(n_classes), cfg.label_scale)
    return DiffusionState(
        sizes_t=size_center + rng.standard_normal((n_b, 3)),
        labels_t=label_center + rng.standard_normal((n_b, n_classes)),
        t=t,
    )


def prepare_targets(
    gt_boxes: list[Box3],
    assign: det.Assignment,
    n_b: int,
    n_classes: int,
    cfg: SslConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Clean per-candidate size/label rows in [0, 1] units.

    Matched candidates carry their gt size and one-hot label; the remaining
    rows are padded with uniform-random sizes and uniform-random class
    one-hots so that N_b rows exist in total.
    """
    if len(gt_boxes) > n_b:
        raise ValueError(f"{len(gt_boxes)} gts exceed n_b = {n_b}")
    sizes = rng.uniform(cfg.pad_size_lo, cfg.pad_size_hi, size=(n_b, 3))
    labels = np.zeros((n_b, n_classes))
    labels[np.arange(n_b), rng.integers(n_classes, size=n_b)] = 1.0
    for cand, g in zip(assign.pos_candidates, assign.pos_gt):
        sizes[cand] = gt_boxes[g].size
        labels[cand] = 0.0
        labels[cand, gt_boxes[g].class_id] = 1.0
    return sizes, labels


# ---------------------------------------------------------------------------
# Shared forward/backward over one scene
# ---------------------------------------------------------------------------


def scene_loss(
    params: ParamStore,
    det_cfg: det.DetectorConfig,
    cfg: SslConfig,
    schedule: NoiseSchedule,
    scene: Scene,
    boxes: list[Box3],
    rng: np.random.Generator,
    grads: ParamStore | None = None,
    grad_weight: float = 1.0,
) -> float:
    """Diffusion training loss for one scene; accumulates grads if given."""
    enc = det.encode(scene.cloud.points, params, det_cfg)
    n_b = min(cfg.n_b, enc.rep_points.shape[0])
    center_idx = det.select_candidate_centers(enc, n_b, cfg.sampling_strategy, rng)
    centers = enc.rep_points[center_idx]
    assign = det.match_targets(centers, boxes, det_cfg.r_neg, det_cfg.r_pos)

    sizes0, labels0 = prepare_targets(boxes, assign, n_b, det_cfg.n_classes, cfg, rng)
    # include t = 0 so the final inference decode (clean state, t -> 0
    # embedding) is on the training distribution
    t = int(rng.integers(0, cfg.T))
    if cfg.size_diffusion:
        sizes_t = corrupt(
            scale_signal(sizes0, cfg.size_scale), t, rng.standard_normal((n_b, 3)), schedule
        )
    else:
        sizes_t = scale_signal(rng.uniform(cfg.pad_size_lo, cfg.pad_size_hi, (n_b, 3)), cfg.size_scale)
    if cfg.label_diffusion:
        labels_t = corrupt(
            scale_signal(labels0, cfg.label_scale),
            t,
            rng.standard_normal((n_b, det_cfg.n_classes)),
            schedule,
        )
    else:
        labels_t = np.full((n_b, det_cfg.n_classes), scale_signal(1.0 / det_cfg.n_classes, cfg.label_scale))

    cands = det.make_candidates(enc, sizes_t, labels_t, n_b, center_idx=center_idx)
    sizes_scene = unscale_signal(sizes_t, cfg.size_scale)
    f_obj, roi_tape = det.extract_roi_features(enc, cands, sizes_scene, params)
    preds, dec_tape = det.decode(f_obj, t, params, det_cfg)
    det.fill_iou_targets(assign, preds, centers, boxes)
    loss, pred_grads = det.detection_loss(preds, assign, det_cfg)

    if grads is not None:
        if grad_weight != 1.0:
            for arr in vars(pred_grads).values():
                arr *= grad_weight
        g_fobj = det.decode_backward(dec_tape, pred_grads, params, grads)
        d_feat = det.roi_backward(roi_tape, g_fobj, enc, params, grads)
        det.encode_backward(enc, d_feat, params, grads)
    return loss


# ---------------------------------------------------------------------------
# Student update
# ---------------------------------------------------------------------------


def student_step(
    labeled: list[tuple[Scene, list[Box3]]],
    unlabeled: list[tuple[Scene, list[Box3]]],
    student: ParamStore,
    teacher: ParamStore | None,
    opt: OptimState,
    det_cfg: det.DetectorConfig,
    cfg: SslConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> float:
    """One combined SSL step: labeled + lambda * unlabeled, AdamW, then EMA."""
    if not labeled:
        raise ValueError("empty labeled batch")
    grads = ParamStore()
    loss_l = 0.0
    for scene, boxes in labeled:
        loss_l += scene_loss(
            student, det_cfg, cfg, schedule, scene, boxes, rng,
            grads=grads, grad_weight=1.0 / len(labeled),
        )
    loss_l /= len(labeled)

    loss_u = 0.0
    if unlabeled:
        for scene, boxes in unlabeled:
            loss_u += scene_loss(
                student, det_cfg, cfg, schedule, scene, boxes, rng,
                grads=grads, grad_weight=cfg.lambda_u / len(unlabeled),
            )
        loss_u /= len(unlabeled)

    total = loss_l + cfg.lambda_u * loss_u
    adamw_step(student, grads, opt)
    if teacher is not None:
        ema_update(teacher, student, cfg.ema_decay)
    return total


# ---------------------------------------------------------------------------
# Diffusion inference (teacher pseudo-labels / evaluation)
# ---------------------------------------------------------------------------


def box_renewal(
    state: DiffusionState,
    preds: det.PredictionBatch,
    n_classes: int,
    cfg: SslConfig,
    rng: np.random.Generator,
) -> DiffusionState:
    """Resample low-confidence rows from the initial sampling distribution.

    Kept rows pass through bitwise unchanged; the row count never changes.
    """
    score = preds.objectness * preds.class_probs.max(axis=1)
    if cfg.renewal_use_iou:
        score = score * preds.iou_est
    renew = score < cfg.tau_renew
    if not renew.any():
        return state
    fresh = init_noisy_state(int(renew.sum()), n_classes, cfg, rng, state.t)
    sizes = state.sizes_t.copy()
    labels = state.labels_t.copy()
    sizes[renew] = fresh.sizes_t
    labels[renew] = fresh.labels_t
    return DiffusionState(sizes_t=sizes, labels_t=labels, t=state.t)


def _decode_state(
    params: ParamStore,
    enc: det.EncodedScene,
    center_idx: np.ndarray,
    state: DiffusionState,
    t: int,
    det_cfg: det.DetectorConfig,
    cfg: SslConfig,
) -> det.PredictionBatch:
    cands = det.make_candidates(enc, state.sizes_t, state.labels_t, len(center_idx), center_idx=center_idx)
    sizes_scene = unscale_signal(state.sizes_t, cfg.size_scale)
    f_obj, _ = det.extract_roi_features(enc, cands, sizes_scene, params)
    preds, _ = det.decode(f_obj, t, params, det_cfg)
    return preds


def diffusion_inference(
    params: ParamStore,
    scene: Scene,
    det_cfg: det.DetectorConfig,
    cfg: SslConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    decode_fn=None,
) -> tuple[det.PredictionBatch, np.ndarray]:
    """Denoise a random size/label state and decode final predictions.

    Returns the final PredictionBatch and the candidate centers. `decode_fn`
    may override the decoder (used by the oracle-decoder test harness); it
    receives (enc, cands, sizes_scene, t).
    """
    enc = det.encode(scene.cloud.points, params, det_cfg)
    n_b = min(cfg.n_b, enc.rep_points.shape[0])
    center_idx = det.select_candidate_centers(enc, n_b, cfg.sampling_strategy, rng)
    centers = enc.rep_points[center_idx]
    state = init_noisy_state(n_b, det_cfg.n_classes, cfg, rng, cfg.T - 1)

    def run_decoder(state: DiffusionState, t: int) -> det.PredictionBatch:
        if decode_fn is not None:
            cands = det.make_candidates(enc, state.sizes_t, state.labels_t, n_b, center_idx=center_idx)
            return decode_fn(enc, cands, unscale_signal(state.sizes_t, cfg.size_scale), t)
        return _decode_state(params, enc, center_idx, state, t, det_cfg, cfg)

    if cfg.ddim_steps == 0:
        return run_decoder(state, cfg.T - 1), centers

    for t_cur, t_next in timestep_pairs(cfg.ddim_steps, cfg.T):
        preds = run_decoder(state, t_cur)
        if cfg.ddim_enabled:
            x0_sizes = scale_signal(preds.size, cfg.size_scale)
            x0_labels = scale_signal(preds.class_probs, cfg.label_scale)
            sizes = (
                ddim_update(state.sizes_t, x0_sizes, t_cur, t_next, schedule, cfg.size_scale)
                if cfg.size_diffusion
                else state.sizes_t
            )
            labels = (
                ddim_update(state.labels_t, x0_labels, t_cur, t_next, schedule, cfg.label_scale)
                if cfg.label_diffusion
                else state.labels_t
            )
            state = DiffusionState(sizes_t=sizes, labels_t=labels, t=t_next)
        else:
            state = DiffusionState(sizes_t=state.sizes_t, labels_t=state.labels_t, t=t_next)
        if cfg.renewal_enabled:
            state = box_renewal(state, preds, det_cfg.n_classes, cfg, rng)

    return run_decoder(state, -1), centers


def filter_pseudo_labels(
    preds: det.PredictionBatch, centers: np.ndarray, cfg: SslConfig
) -> list[PseudoLabel]:
    """Keep predictions passing all three confidence gates (>= semantics)."""
    obj = preds.objectness
    probs = preds.class_probs
    cls_conf = probs.max(axis=1)
    iou_est = preds.iou_est
    keep = (obj >= cfg.thr_obj) & (cls_conf >= cfg.thr_cls) & (iou_est >= cfg.thr_iou)
    out = []
    for i in np.nonzero(keep)[0]:
        out.append(
            PseudoLabel(
                box=Box3(
                    center=centers[i] + preds.center_offset[i],
                    size=preds.size[i],
                    class_id=int(np.argmax(probs[i])),
                ),
                class_id=int(np.argmax(probs[i])),
                objectness=float(obj[i]),
                class_conf=float(cls_conf[i]),
                iou_est=float(iou_est[i]),
            )
        )
    return out


def _nms_pseudo(pls: list[PseudoLabel], iou_thresh: float) -> list[PseudoLabel]:
    if not pls:
        return []
    centers = np.stack([p.box.center for p in pls])
    sizes = np.stack([p.box.size for p in pls])
    scores = np.array([p.score for p in pls])
    kept = greedy_nms(centers, sizes, scores, iou_thresh)
    return [pls[i] for i in kept]


def generate_pseudo_labels(
    teacher: ParamStore,
    scene: Scene,
    det_cfg: det.DetectorConfig,
    cfg: SslConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    decode_fn=None,
) -> list[PseudoLabel]:
    """Full pseudo-label inference: DDIM + renewal, filter, then greedy NMS."""
    preds, centers = diffusion_inference(teacher, scene, det_cfg, cfg, schedule, rng, decode_fn)
    return _nms_pseudo(filter_pseudo_labels(preds, centers, cfg), cfg.nms_iou)


def run_detection(
    params: ParamStore,
    scene: Scene,
    det_cfg: det.DetectorConfig,
    cfg: SslConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> list[Detection]:
    """Evaluation-path detections: denoising inference, NMS, no filter."""
    preds, centers = diffusion_inference(params, scene, det_cfg, cfg, schedule, rng)
    probs = preds.class_probs
    scores = preds.objectness * probs.max(axis=1)
    pred_centers = centers + preds.center_offset
    pred_sizes = preds.size
    kept = greedy_nms(pred_centers, pred_sizes, scores, cfg.nms_iou)
    return [
        Detection(
            box=Box3(center=pred_centers[i], size=pred_sizes[i], class_id=int(np.argmax(probs[i]))),
            class_id=int(np.argmax(probs[i])),
            score=float(scores[i]),
            scene_id=scene.scene_id,
        )
        for i in kept
    ]


def evaluate(
    params: ParamStore,
    scenes: list[Scene],
    det_cfg: det.DetectorConfig,
    cfg: SslConfig,
    schedule: NoiseSchedule,
    seed: int,
    iou_thresholds=(0.25, 0.5),
) -> dict:
    """mAP at the requested thresholds plus the per-class AP tables."""
    rng = np.random.default_rng(seed)
    dets: list[Detection] = []
    gts = {}
    for scene in scenes:
        dets.extend(run_detection(params, scene, det_cfg, cfg, schedule, rng))
        gts[scene.scene_id] = scene.gt_boxes
    out = {}
    for thr in iou_thresholds:
        m, per_class = map_at(dets, gts, thr)
        out[f"map@{thr}"] = m
        out[f"per_class@{thr}"] = per_class
    return out


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _lr_at(base_lr: float, epoch: int, total: int, milestones, decays) -> float:
    lr = base_lr
    for frac, decay in zip(milestones, decays):
        if epoch >= int(frac * total):
            lr *= decay
    return lr


def _batches(items: list, size: int, rng: np.random.Generator):
    order = rng.permutation(len(items))
    for i in range(0, len(items), size):
        yield [items[j] for j in order[i : i + size]]


def pretrain(
    labeled: list[Scene],
    det_cfg: det.DetectorConfig,
    cfg: SslConfig,
    seed: int,
    epochs: int | None = None,
    log=None,
) -> ParamStore:
    """Supervised diffusion training on labeled scenes only."""
    if not labeled:
        raise ValueError("pretraining requires at least one labeled scene")
    rng = np.random.default_rng(seed)
    params = det.init_detector_params(det_cfg, rng)
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    if epochs == 0:
        return params
    schedule = NoiseSchedule(T=cfg.T)
    opt = OptimState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    for epoch in range(epochs):
        opt.lr = _lr_at(cfg.lr, epoch, epochs, cfg.pretrain_milestones, cfg.pretrain_decays)
        losses = []
        for batch in _batches(labeled, cfg.batch_labeled, rng):
            aug_batch = []
            for scene in batch:
                aug, _ = augment(scene, "strong", rng)
                aug_batch.append((aug, aug.gt_boxes))
            losses.append(
                student_step(aug_batch, [], params, None, opt, det_cfg, cfg, schedule, rng)
            )
        if log is not None:
            log(epoch, float(np.mean(losses)))
    return params


@dataclass
class SslRunResult:
    student: ParamStore
    teacher: ParamStore
    epoch_losses: list[float] = field(default_factory=list)
    plq_history: list[dict] = field(default_factory=list)


def teacher_pseudo_label_quality(
    teacher: ParamStore,
    unlabeled: list[Scene],
    det_cfg: det.DetectorConfig,
    cfg: SslConfig,
    schedule: NoiseSchedule,
    seed: int,
    iou_thresh: float = 0.5,
) -> dict[str, float]:
    """mAP/recall of teacher pseudo-labels on the (unaugmented) unlabeled split."""
    rng = np.random.default_rng(seed)
    pls: list[Detection] = []
    gts = {}
    for scene in unlabeled:
        for pl in generate_pseudo_labels(teacher, scene, det_cfg, cfg, schedule, rng):
            pls.append(
                Detection(box=pl.box, class_id=pl.class_id, score=pl.score, scene_id=scene.scene_id)
            )
        gts[scene.scene_id] = scene.gt_boxes
    return pseudo_label_quality(pls, gts, iou_thresh)


def train_ssl(
    labeled: list[Scene],
    unlabeled: list[Scene],
    init_params: ParamStore,
    det_cfg: det.DetectorConfig,
    cfg: SslConfig,
    seed: int,
    epochs: int | None = None,
    epoch_hook=None,
    start_epoch: int = 0,
    opt: OptimState | None = None,
    teacher: ParamStore | None = None,
) -> SslRunResult:
    """Teacher-student SSL training initialized from a pretrained detector.

    Per batch: strong-augmented labeled scenes with their gts plus
    strong-augmented unlabeled scenes with pseudo-labels that the EMA teacher
    generated on the weakly augmented view (mapped into the student's frame).
    """
    rng = np.random.default_rng(seed + 1000 * (start_epoch + 1))
    student = init_params.clone()
    teacher = init_params.clone() if teacher is None else teacher
    schedule = NoiseSchedule(T=cfg.T)
    # the SSL phase fine-tunes an already-trained detector on partly noisy
    # pseudo-labels, so it runs at a reduced learning rate by default
    base_lr = cfg.ssl_lr if cfg.ssl_lr is not None else cfg.lr * 0.1
    if opt is None:
        opt = OptimState.for_params(student, lr=base_lr, weight_decay=cfg.weight_decay)
    epochs = cfg.ssl_epochs if epochs is None else epochs
    result = SslRunResult(student=student, teacher=teacher)

    for epoch in range(start_epoch, epochs):
        opt.lr = _lr_at(base_lr, epoch, epochs, cfg.ssl_milestones, cfg.ssl_decays)
        losses = []
        for batch in _batches(labeled, cfg.batch_labeled, rng):
            lab_batch = []
            for scene in batch:
                aug, _ = augment(scene, "strong", rng)
                lab_batch.append((aug, aug.gt_boxes))

            unlab_batch = []
            if unlabeled and cfg.batch_unlabeled > 0:
                picks = rng.choice(len(unlabeled), size=min(cfg.batch_unlabeled, len(unlabeled)), replace=False)
                for idx in picks:
                    scene = unlabeled[idx]
                    weak, weak_t = augment(scene, "weak", rng)
                    pls = generate_pseudo_labels(teacher, weak, det_cfg, cfg, schedule, rng)
                    if not pls:
                        # an empty pseudo-label set says nothing about the
                        # scene; training on it would push every candidate
                        # toward background
                        continue
                    boxes = apply_inverse_to_boxes([p.box for p in pls], weak_t)
                    strong, strong_t = augment(scene, "strong", rng)
                    unlab_batch.append((strong, apply_to_boxes(boxes, strong_t)))
            losses.append(
                student_step(lab_batch, unlab_batch, student, teacher, opt, det_cfg, cfg, schedule, rng)
            )
        result.epoch_losses.append(float(np.mean(losses)))
        if epoch_hook is not None:
            epoch_hook(epoch, result, opt)
    return result
