"""Toy detector: per-point encoder, RoI pooling over noisy boxes, decoder.

The encoder is a per-point MLP over coordinates plus k-nearest-neighbor local
statistics; representative points are FPS-selected from the input cloud.
Candidates pair FPS centers with noisy size/label rows; RoI features are the
channelwise max over representative points inside each candidate box. The
decoder is a time-conditioned MLP trunk with five heads.

Every stage keeps an explicit tape so the whole pipeline backpropagates
exactly (finite-difference checked in the tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box3, farthest_point_sample, iou_matrix, points_in_box
from .netcore import MlpTape, ParamStore, init_mlp, mlp_backward, mlp_forward

KNN_FEATURE_WIDTH = 9  # xyz + mean neighbor offset + per-axis neighbor std
ROI_GEOM_WIDTH = 17  # center + box/context centroid offsets, spreads, occupancies
ROI_CONTEXT_EXTENT = 0.4  # fixed per-axis extent of the context neighborhood box
MIN_PRED_SIZE = 1e-3
HEAD_NAMES = ("center", "size", "cls", "obj", "iou")


@dataclass
class DetectorConfig:
    n_classes: int = 6
    feature_width: int = 64  # C
    m_rep: int = 256  # representative points per scene
    n_b: int = 128  # candidates per scene
    knn_k: int = 8
    time_embed_width: int = 32
    trunk_width: int = 128
    encoder_hidden: int = 64
    r_pos: float = 0.15  # candidates within this of a gt center are positives
    r_neg: float = 0.3  # candidates farther than this from every gt are negatives
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.n_b > self.m_rep:
            raise ValueError("n_b must not exceed m_rep")
        if self.time_embed_width % 2 != 0:
            raise ValueError("time_embed_width must be even")


def init_detector_params(cfg: DetectorConfig, rng: np.random.Generator) -> ParamStore:
    store = ParamStore()
    c = cfg.feature_width
    init_mlp(store, "enc", [KNN_FEATURE_WIDTH, cfg.encoder_hidden, c], rng)
    init_mlp(store, "roi", [c, c], rng)
    trunk_in = 2 * c + ROI_GEOM_WIDTH + cfg.n_classes + cfg.time_embed_width
    init_mlp(store, "trunk", [trunk_in, cfg.trunk_width, cfg.trunk_width], rng)
    # heads see the trunk output plus a skip connection to the raw geometry
    # and noisy-label blocks, so e.g. the center head can read the context
    # centroid directly and the class head the label state being denoised
    head_in = cfg.trunk_width + ROI_GEOM_WIDTH + cfg.n_classes
    init_mlp(store, "head.center", [head_in, 3], rng)
    init_mlp(store, "head.size", [head_in, 3], rng)
    init_mlp(store, "head.cls", [head_in, cfg.n_classes], rng)
    init_mlp(store, "head.obj", [head_in, 1], rng)
    init_mlp(store, "head.iou", [head_in, 1], rng)
    return store


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


@dataclass
class EncodedScene:
    """Representative points with their features and the encoder tape."""

    rep_points: np.ndarray  # (M, 3)
    features: np.ndarray  # (M, C)
    rep_indices: np.ndarray  # indices into the source cloud
    knn_inputs: np.ndarray  # (M, KNN_FEATURE_WIDTH), data-dependent constants
    tape: MlpTape


def knn_point_features(points: np.ndarray, query_idx: np.ndarray, k: int) -> np.ndarray:
    """Coordinates plus local-neighborhood statistics for the query points.

    Statistics are order-independent, so features attach to coordinates rather
    than input order.
    """
    q = points[query_idx]
    d = np.linalg.norm(points[None, :, :] - q[:, None, :], axis=2)
    d[np.arange(len(query_idx)), query_idx] = np.inf  # exclude self
    k_eff = min(k, points.shape[0] - 1)
    if k_eff < 1:
        return np.concatenate([q, np.zeros((len(query_idx), 6))], axis=1)
    nb_idx = np.argpartition(d, k_eff - 1, axis=1)[:, :k_eff]
    nb = points[nb_idx]  # (Q, k, 3)
    mean_off = nb.mean(axis=1) - q
    std = nb.std(axis=1)
    return np.concatenate([q, mean_off, std], axis=1)


def encode(points: np.ndarray, params: ParamStore, cfg: DetectorConfig) -> EncodedScene:
    """Per-point features at FPS-selected representative points.

    Runs once per scene pass regardless of candidate count.
    """
    points = np.asarray(points, dtype=np.float64)
    m = min(cfg.m_rep, points.shape[0])
    rep_indices = farthest_point_sample(points, m, start=0)
    inputs = knn_point_features(points, rep_indices, cfg.knn_k)
    features, tape = mlp_forward(params, "enc", inputs)
    return EncodedScene(
        rep_points=points[rep_indices],
        features=features,
        rep_indices=rep_indices,
        knn_inputs=inputs,
        tape=tape,
    )


def encode_backward(
    enc: EncodedScene, d_features: np.ndarray, params: ParamStore, grads: ParamStore
) -> None:
    mlp_backward(params, enc.tape, d_features, grads)


# ---------------------------------------------------------------------------
# Candidates and RoI features
# ---------------------------------------------------------------------------


@dataclass
class CandidateSet:
    """FPS-selected centers paired with noisy size/label rows (scaled space)."""

    centers: np.ndarray  # (N_b, 3)
    center_rep_idx: np.ndarray  # index of each center into enc rep arrays
    noisy_sizes: np.ndarray  # (N_b, 3), scaled space
    noisy_labels: np.ndarray  # (N_b, n_classes), scaled space


def select_candidate_centers(
    enc: EncodedScene,
    n_b: int,
    strategy: str = "fps",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Indices (into enc rep arrays) of the n_b candidate box centers."""
    m = enc.rep_points.shape[0]
    if n_b > m:
        raise ValueError(f"n_b ({n_b}) exceeds representative point count ({m})")
    if strategy == "fps":
        return farthest_point_sample(enc.rep_points, n_b, start=0)
    if strategy == "random":
        if rng is None:
            raise ValueError("random sampling strategy requires an rng")
        return np.sort(rng.choice(m, size=n_b, replace=False))
    raise ValueError(f"unknown sampling strategy {strategy!r}")


def make_candidates(
    enc: EncodedScene,
    noisy_sizes: np.ndarray,
    noisy_labels: np.ndarray,
    n_b: int,
    strategy: str = "fps",
    rng: np.random.Generator | None = None,
    center_idx: np.ndarray | None = None,
) -> CandidateSet:
    """Pair the i-th sampled representative point with the i-th noisy rows."""
    if noisy_sizes.shape[0] != n_b or noisy_labels.shape[0] != n_b:
        raise ValueError("noisy state rows must equal n_b")
    idx = center_idx if center_idx is not None else select_candidate_centers(enc, n_b, strategy, rng)
    return CandidateSet(
        centers=enc.rep_points[idx],
        center_rep_idx=idx,
        noisy_sizes=noisy_sizes,
        noisy_labels=noisy_labels,
    )


@dataclass
class RoiTape:
    argmax_idx: np.ndarray  # (N_b, C) winner rep index per pooled channel
    center_rep_idx: np.ndarray  # (N_b,) rep index of each candidate center
    mlp_tape: MlpTape
    feature_width: int


def extract_roi_features(
    enc: EncodedScene,
    cands: CandidateSet,
    sizes_scene: np.ndarray,
    params: ParamStore,
) -> tuple[np.ndarray, RoiTape]:
    """Channelwise max pool over representative points in each candidate box.

    `sizes_scene` are the candidate sizes already unscaled to scene units.
    An empty box falls back to the candidate center's own point feature, which
    keeps the function total and differentiable. The pooled features pass
    through a small MLP and are concatenated with the candidate center's own
    point feature, parameter-free geometric summaries of the box contents —
    the candidate center, the member-centroid offset from it, the member
    spread, and the occupancy fraction, plus the same three summaries over a
    fixed-extent context box (ROI_CONTEXT_EXTENT per axis) around the center —
    and the scaled noisy label rows, giving width 2C + ROI_GEOM_WIDTH +
    n_classes. The candidate's own feature and the context summaries are
    independent of the (possibly very noisy) box state, so regression stays
    learnable at every timestep; the explicit geometry lets the decoder reason
    about what the candidate box actually contains.
    """
    n_b = cands.centers.shape[0]
    c = enc.features.shape[1]
    m = enc.rep_points.shape[0]
    pooled = np.empty((n_b, c))
    argmax_idx = np.empty((n_b, c), dtype=np.int64)
    centroid_off = np.empty((n_b, 3))
    spread = np.empty((n_b, 3))
    occupancy = np.empty((n_b, 1))
    ctx_off = np.empty((n_b, 3))
    ctx_spread = np.empty((n_b, 3))
    ctx_occ = np.empty((n_b, 1))
    ctx_size = np.full(3, ROI_CONTEXT_EXTENT)
    cols = np.arange(c)
    for i in range(n_b):
        members = points_in_box(enc.rep_points, cands.centers[i], sizes_scene[i])
        occupancy[i] = members.size / m
        if members.size == 0:
            members = np.array([cands.center_rep_idx[i]])
        feats = enc.features[members]
        winners = np.argmax(feats, axis=0)
        pooled[i] = feats[winners, cols]
        argmax_idx[i] = members[winners]
        pts = enc.rep_points[members]
        centroid_off[i] = pts.mean(axis=0) - cands.centers[i]
        spread[i] = pts.std(axis=0)
        # the context box always contains the candidate's own rep point
        ctx = enc.rep_points[points_in_box(enc.rep_points, cands.centers[i], ctx_size)]
        ctx_off[i] = ctx.mean(axis=0) - cands.centers[i]
        ctx_spread[i] = ctx.std(axis=0)
        ctx_occ[i] = ctx.shape[0] / m
    f_roi, mlp_tape = mlp_forward(params, "roi", pooled)
    f_center = enc.features[cands.center_rep_idx]
    f_obj = np.concatenate(
        [
            f_roi,
            f_center,
            cands.centers,
            centroid_off,
            spread,
            occupancy,
            ctx_off,
            ctx_spread,
            ctx_occ,
            cands.noisy_labels,
        ],
        axis=1,
    )
    return f_obj, RoiTape(
        argmax_idx=argmax_idx,
        center_rep_idx=np.asarray(cands.center_rep_idx),
        mlp_tape=mlp_tape,
        feature_width=c,
    )


def roi_backward(
    tape: RoiTape,
    d_fobj: np.ndarray,
    enc: EncodedScene,
    params: ParamStore,
    grads: ParamStore,
) -> np.ndarray:
    """Backprop RoI features to encoder feature gradients (constant parts dropped)."""
    c = tape.feature_width
    d_pooled = mlp_backward(params, tape.mlp_tape, d_fobj[:, :c], grads)
    d_features = np.zeros_like(enc.features)
    cols = np.arange(c)
    for i in range(d_pooled.shape[0]):
        np.add.at(d_features, (tape.argmax_idx[i], cols), d_pooled[i])
    np.add.at(d_features, tape.center_rep_idx, d_fobj[:, c : 2 * c])
    return d_features


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------


def time_embedding(t: int, width: int) -> np.ndarray:
    """Sinusoidal timestep embedding; t = -1 is treated as t = 0."""
    t = max(int(t), 0)
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


@dataclass
class PredictionBatch:
    """Raw decoder head outputs for N_b candidates, with activated views.

    size applies softplus (plus a small floor) to keep sizes positive;
    objectness and IoU estimates are sigmoids of their logits.
    """

    center_offset: np.ndarray  # (N, 3)
    size_raw: np.ndarray  # (N, 3)
    class_logits: np.ndarray  # (N, K)
    obj_logit: np.ndarray  # (N,)
    iou_logit: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.center_offset.shape[0]

    @property
    def size(self) -> np.ndarray:
        return np.logaddexp(0.0, self.size_raw) + MIN_PRED_SIZE

    @property
    def class_probs(self) -> np.ndarray:
        z = self.class_logits - self.class_logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    @property
    def objectness(self) -> np.ndarray:
        return _sigmoid(self.obj_logit)

    @property
    def iou_est(self) -> np.ndarray:
        return _sigmoid(self.iou_logit)

    @property
    def score(self) -> np.ndarray:
        """Composite detection score: objectness times max class probability."""
        return self.objectness * self.class_probs.max(axis=1)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class DecodeTape:
    trunk_tape: MlpTape
    head_tapes: dict
    input_width: int
    trunk_width: int
    geom_slice: slice


def decode(
    f_obj: np.ndarray, t: int, params: ParamStore, cfg: DetectorConfig
) -> tuple[PredictionBatch, DecodeTape]:
    """Time-conditioned decoding of candidate features into predictions."""
    f_obj = np.asarray(f_obj, dtype=np.float64)
    expected = 2 * cfg.feature_width + ROI_GEOM_WIDTH + cfg.n_classes
    if f_obj.ndim != 2 or f_obj.shape[1] != expected:
        raise ValueError(f"decode expects (N, {expected}) features, got {f_obj.shape}")
    if not -1 <= t <= 10**9:
        raise ValueError(f"bad timestep {t}")
    emb = np.broadcast_to(time_embedding(t, cfg.time_embed_width), (f_obj.shape[0], cfg.time_embed_width))
    x = np.concatenate([f_obj, emb], axis=1)
    h, trunk_tape = mlp_forward(params, "trunk", x)
    h = np.maximum(h, 0.0)  # trunk output ReLU; backward handles via preacts[-1]
    # geometry block plus the trailing noisy-label block
    geom_slice = slice(2 * cfg.feature_width, 2 * cfg.feature_width + ROI_GEOM_WIDTH + cfg.n_classes)
    head_in = np.concatenate([h, f_obj[:, geom_slice]], axis=1)
    head_tapes = {}
    outs = {}
    for name in HEAD_NAMES:
        outs[name], head_tapes[name] = mlp_forward(params, f"head.{name}", head_in)
    preds = PredictionBatch(
        center_offset=outs["center"],
        size_raw=outs["size"],
        class_logits=outs["cls"],
        obj_logit=outs["obj"][:, 0],
        iou_logit=outs["iou"][:, 0],
    )
    return preds, DecodeTape(
        trunk_tape=trunk_tape,
        head_tapes=head_tapes,
        input_width=f_obj.shape[1],
        trunk_width=cfg.trunk_width,
        geom_slice=geom_slice,
    )


@dataclass
class PredGrads:
    """Gradients w.r.t. the raw fields of a PredictionBatch."""

    center_offset: np.ndarray
    size_raw: np.ndarray
    class_logits: np.ndarray
    obj_logit: np.ndarray
    iou_logit: np.ndarray

    @classmethod
    def zeros_for(cls, preds: PredictionBatch) -> "PredGrads":
        return cls(
            center_offset=np.zeros_like(preds.center_offset),
            size_raw=np.zeros_like(preds.size_raw),
            class_logits=np.zeros_like(preds.class_logits),
            obj_logit=np.zeros_like(preds.obj_logit),
            iou_logit=np.zeros_like(preds.iou_logit),
        )


def decode_backward(
    tape: DecodeTape,
    pred_grads: PredGrads,
    params: ParamStore,
    grads: ParamStore,
) -> np.ndarray:
    """Backprop decoder heads and trunk; returns gradient w.r.t. f_obj."""
    head_gs = {
        "center": pred_grads.center_offset,
        "size": pred_grads.size_raw,
        "cls": pred_grads.class_logits,
        "obj": pred_grads.obj_logit[:, None],
        "iou": pred_grads.iou_logit[:, None],
    }
    g_head_in = None
    for name in HEAD_NAMES:
        g = mlp_backward(params, tape.head_tapes[name], head_gs[name], grads)
        g_head_in = g if g_head_in is None else g_head_in + g
    # trunk output ReLU applied in decode
    g_h = g_head_in[:, : tape.trunk_width] * (tape.trunk_tape.preacts[-1] > 0)
    g_x = mlp_backward(params, tape.trunk_tape, g_h, grads)
    g_fobj = g_x[:, : tape.input_width].copy()
    g_fobj[:, tape.geom_slice] += g_head_in[:, tape.trunk_width :]  # geometry skip
    return g_fobj


# ---------------------------------------------------------------------------
# Target assignment and losses
# ---------------------------------------------------------------------------


@dataclass
class Assignment:
    """Per-candidate assignment of ground-truth (or pseudo) boxes.

    Each gt is matched to its nearest candidate center (ties to the lowest
    candidate index). A candidate hit by several gts keeps its closest gt.
    Additionally every candidate within r_pos of some gt center becomes a
    positive supervised by its nearest gt, so all on-object candidates learn
    calibrated predictions (duplicates are merged later by NMS). Candidates
    farther than r_neg from every gt center are negatives; the rest are
    ignored for objectness.
    """

    gt_to_candidate: np.ndarray  # (G,) candidate index per gt
    pos_candidates: np.ndarray  # (P,) unique positive candidate indices
    pos_gt: np.ndarray  # (P,) gt index supervising each positive
    negatives: np.ndarray  # (N,) bool mask
    center_targets: np.ndarray  # (P, 3) gt center minus candidate center
    size_targets: np.ndarray  # (P, 3)
    class_targets: np.ndarray  # (P,)
    iou_targets: np.ndarray | None = None  # (P,), filled from current preds
    neg_iou_targets: np.ndarray | None = None  # (N,), best IoU of each negative's box


def match_targets(
    candidate_centers: np.ndarray,
    gt_boxes: list[Box3],
    r_neg: float,
    r_pos: float = 0.0,
) -> Assignment:
    n = candidate_centers.shape[0]
    if not gt_boxes:
        return Assignment(
            gt_to_candidate=np.empty(0, dtype=np.int64),
            pos_candidates=np.empty(0, dtype=np.int64),
            pos_gt=np.empty(0, dtype=np.int64),
            negatives=np.ones(n, dtype=bool),
            center_targets=np.empty((0, 3)),
            size_targets=np.empty((0, 3)),
            class_targets=np.empty(0, dtype=np.int64),
        )
    gt_centers = np.stack([b.center for b in gt_boxes])
    d = np.linalg.norm(candidate_centers[None, :, :] - gt_centers[:, None, :], axis=2)  # (G, N)
    gt_to_candidate = np.argmin(d, axis=1)  # ties -> lowest candidate index

    pos_map: dict[int, int] = {}
    for g, cand in enumerate(gt_to_candidate):
        cand = int(cand)
        if cand not in pos_map or d[g, cand] < d[pos_map[cand], cand]:
            pos_map[cand] = g
    if r_pos > 0.0:
        nearest_gt = np.argmin(d, axis=0)
        nearest_d = d.min(axis=0)
        for cand in np.nonzero(nearest_d <= r_pos)[0]:
            pos_map.setdefault(int(cand), int(nearest_gt[cand]))
    pos_candidates = np.array(sorted(pos_map), dtype=np.int64)
    pos_gt = np.array([pos_map[c] for c in pos_candidates], dtype=np.int64)

    negatives = d.min(axis=0) > r_neg
    negatives[pos_candidates] = False
    return Assignment(
        gt_to_candidate=gt_to_candidate.astype(np.int64),
        pos_candidates=pos_candidates,
        pos_gt=pos_gt,
        negatives=negatives,
        center_targets=gt_centers[pos_gt] - candidate_centers[pos_candidates],
        size_targets=np.stack([gt_boxes[g].size for g in pos_gt]) if len(pos_gt) else np.empty((0, 3)),
        class_targets=np.array([gt_boxes[g].class_id for g in pos_gt], dtype=np.int64),
    )


def fill_iou_targets(
    assign: Assignment,
    preds: PredictionBatch,
    candidate_centers: np.ndarray,
    gt_boxes: list[Box3],
) -> None:
    """IoU of each positive's predicted box against its matched gt.

    Positives are scored against their matched gt; negatives against their
    best-overlapping gt (usually ~0), which keeps the IoU estimate calibrated
    on clutter candidates instead of unconstrained. Evaluated once per forward
    pass and then treated as a constant target (stop-gradient), so the loss
    stays an explicit function of the prediction heads only.
    """
    neg_idx = np.nonzero(assign.negatives)[0]
    if not gt_boxes:
        assign.iou_targets = np.empty(0)
        assign.neg_iou_targets = np.zeros(len(neg_idx))
        return
    all_gt_centers = np.stack([b.center for b in gt_boxes])
    all_gt_sizes = np.stack([b.size for b in gt_boxes])
    if len(neg_idx):
        neg_centers = candidate_centers[neg_idx] + preds.center_offset[neg_idx]
        neg_iou = iou_matrix(neg_centers, preds.size[neg_idx], all_gt_centers, all_gt_sizes)
        assign.neg_iou_targets = neg_iou.max(axis=1)
    else:
        assign.neg_iou_targets = np.empty(0)
    if len(assign.pos_candidates) == 0:
        assign.iou_targets = np.empty(0)
        return
    pc = assign.pos_candidates
    pred_centers = candidate_centers[pc] + preds.center_offset[pc]
    pred_sizes = preds.size[pc]
    gt_centers = all_gt_centers[assign.pos_gt]
    gt_sizes = all_gt_sizes[assign.pos_gt]
    iou = iou_matrix(pred_centers, pred_sizes, gt_centers, gt_sizes)
    assign.iou_targets = np.diagonal(iou).copy()


def _huber(e: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(e)
    return np.where(a < delta, 0.5 * e * e, delta * (a - 0.5 * delta))


def _huber_grad(e: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(e, -delta, delta)


def detection_loss(
    preds: PredictionBatch, assign: Assignment, cfg: DetectorConfig
) -> tuple[float, PredGrads]:
    """Composite detection loss and exact gradients w.r.t. raw prediction heads.

    Terms (each averaged within type, then summed with unit weights):
    Huber on center offsets and sizes, cross-entropy on classes and Huber on
    the IoU estimate over positives; binary cross-entropy on objectness over
    positives and negatives.
    """
    pos = assign.pos_candidates
    neg_idx = np.nonzero(assign.negatives)[0]
    n_pos, n_neg = len(pos), len(neg_idx)
    if n_pos == 0 and n_neg == 0:
        raise ValueError("malformed batch: no positives and no negatives")
    if assign.iou_targets is None or assign.neg_iou_targets is None:
        raise ValueError("assignment is missing iou_targets; call fill_iou_targets first")
    delta = cfg.huber_delta
    grads = PredGrads.zeros_for(preds)
    loss = 0.0

    if n_pos:
        # center regression
        e = preds.center_offset[pos] - assign.center_targets
        loss += float(_huber(e, delta).mean())
        grads.center_offset[pos] = _huber_grad(e, delta) / e.size

        # size regression through softplus
        size = preds.size[pos]
        e = size - assign.size_targets
        loss += float(_huber(e, delta).mean())
        dsize = _huber_grad(e, delta) / e.size
        grads.size_raw[pos] = dsize * _sigmoid(preds.size_raw[pos])

        # classification cross-entropy
        logits = preds.class_logits[pos]
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss += float(-logp[np.arange(n_pos), assign.class_targets].mean())
        softmax = np.exp(logp)
        dlogits = softmax.copy()
        dlogits[np.arange(n_pos), assign.class_targets] -= 1.0
        grads.class_logits[pos] = dlogits / n_pos

    # IoU-estimate regression through sigmoid, over positives and negatives
    # (negatives target their true best-gt IoU, keeping the gate calibrated)
    iou_idx = np.concatenate([pos, neg_idx])
    iou_tgt = np.concatenate([assign.iou_targets, assign.neg_iou_targets])
    if len(iou_idx):
        iou_est = preds.iou_est[iou_idx]
        e = iou_est - iou_tgt
        loss += float(_huber(e, delta).mean())
        grads.iou_logit[iou_idx] = (
            (_huber_grad(e, delta) / len(iou_idx)) * iou_est * (1.0 - iou_est)
        )

    # objectness BCE with logits over positives and negatives
    obj_idx = np.concatenate([pos, neg_idx])
    targets = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    z = preds.obj_logit[obj_idx]
    # stable BCE: max(z,0) - z*y + log(1+exp(-|z|))
    loss += float((np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))).mean())
    grads.obj_logit[obj_idx] = (_sigmoid(z) - targets) / len(obj_idx)

    return loss, grads
