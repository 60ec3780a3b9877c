import numpy as np
import pytest

from diffbox3d import detector as det
from diffbox3d.diffusion import DiffusionState, NoiseSchedule, scale_signal
from diffbox3d.geometry import Box3, iou_aabb
from diffbox3d.netcore import OptimState, ParamStore
from diffbox3d.synthdata import SceneConfig, generate_scene
from diffbox3d.training import (
    PseudoLabel,
    SslConfig,
    box_renewal,
    diffusion_inference,
    evaluate,
    filter_pseudo_labels,
    generate_pseudo_labels,
    init_noisy_state,
    prepare_targets,
    pretrain,
    run_detection,
    scene_loss,
    student_step,
    train_ssl,
)


def tiny_det_cfg(n_classes=4):
    return det.DetectorConfig(
        n_classes=n_classes,
        feature_width=8,
        m_rep=32,
        n_b=8,
        knn_k=4,
        time_embed_width=8,
        trunk_width=16,
        encoder_hidden=8,
    )


def tiny_ssl_cfg(**kw):
    kw.setdefault("n_b", 8)
    kw.setdefault("T", 100)
    return SslConfig(**kw)


def tiny_scene(seed=0, n_classes=4):
    cfg = SceneConfig(n_points=128, n_classes=n_classes)
    return generate_scene(cfg, seed)


def fake_preds(n, n_classes, obj_logit, cls_hot, iou_logit):
    logits = np.zeros((n, n_classes))
    logits[:, 0] = cls_hot
    return det.PredictionBatch(
        center_offset=np.zeros((n, 3)),
        size_raw=np.zeros((n, 3)),
        class_logits=logits,
        obj_logit=np.full(n, float(obj_logit)),
        iou_logit=np.full(n, float(iou_logit)),
    )


class TestInitNoisyState:
    def test_shapes_and_centering(self):
        cfg = tiny_ssl_cfg()
        rng = np.random.default_rng(0)
        n = 5000
        state = init_noisy_state(n, 4, cfg, rng, t=99)
        assert state.sizes_t.shape == (n, 3)
        assert state.labels_t.shape == (n, 4)
        assert state.t == 99
        # means: scale_signal(0.25, 4) = -2, scale_signal(0.25, 4) for labels too
        se = 3.0 / np.sqrt(n * 3)
        assert abs(state.sizes_t.mean() - scale_signal(cfg.mu_size, 4.0)) < se
        assert abs(state.labels_t.mean() - scale_signal(0.25, 4.0)) < 3.0 / np.sqrt(n * 4)
        assert abs(state.sizes_t.std() - 1.0) < 0.05


class TestPrepareTargets:
    def make_assignment(self, pos_candidates, pos_gt, n):
        return det.Assignment(
            gt_to_candidate=np.asarray(pos_gt, dtype=np.int64),
            pos_candidates=np.asarray(pos_candidates, dtype=np.int64),
            pos_gt=np.asarray(pos_gt, dtype=np.int64),
            negatives=np.zeros(n, dtype=bool),
            center_targets=np.empty((len(pos_gt), 3)),
            size_targets=np.empty((len(pos_gt), 3)),
            class_targets=np.empty(len(pos_gt), dtype=np.int64),
        )

    def test_matched_rows_carry_gt(self):
        cfg = tiny_ssl_cfg()
        boxes = [Box3(center=np.full(3, 0.5), size=np.array([0.1, 0.2, 0.3]), class_id=2)]
        assign = self.make_assignment([3], [0], 8)
        sizes, labels = prepare_targets(boxes, assign, 8, 4, cfg, np.random.default_rng(0))
        assert np.array_equal(sizes[3], [0.1, 0.2, 0.3])
        assert labels[3].tolist() == [0, 0, 1, 0]

    def test_pad_rows_in_range_and_one_hot(self):
        cfg = tiny_ssl_cfg()
        assign = self.make_assignment([], [], 8)
        sizes, labels = prepare_targets([], assign, 8, 4, cfg, np.random.default_rng(1))
        assert sizes.min() >= cfg.pad_size_lo and sizes.max() <= cfg.pad_size_hi
        assert np.array_equal(labels.sum(axis=1), np.ones(8))
        assert set(np.unique(labels)) <= {0.0, 1.0}

    def test_too_many_gts(self):
        cfg = tiny_ssl_cfg()
        boxes = [Box3(center=np.full(3, 0.5), size=np.full(3, 0.1)) for _ in range(9)]
        assign = self.make_assignment([], [], 8)
        with pytest.raises(ValueError):
            prepare_targets(boxes, assign, 8, 4, cfg, np.random.default_rng(0))


class TestSceneLoss:
    def test_finite_and_deterministic(self):
        dcfg, cfg = tiny_det_cfg(), tiny_ssl_cfg()
        params = det.init_detector_params(dcfg, np.random.default_rng(0))
        schedule = NoiseSchedule(T=cfg.T)
        scene = tiny_scene(0)
        a = scene_loss(params, dcfg, cfg, schedule, scene, scene.gt_boxes, np.random.default_rng(7))
        b = scene_loss(params, dcfg, cfg, schedule, scene, scene.gt_boxes, np.random.default_rng(7))
        assert np.isfinite(a) and a == b

    def test_grad_weight_scales_linearly(self):
        dcfg, cfg = tiny_det_cfg(), tiny_ssl_cfg()
        params = det.init_detector_params(dcfg, np.random.default_rng(0))
        schedule = NoiseSchedule(T=cfg.T)
        scene = tiny_scene(1)
        g1, g2 = ParamStore(), ParamStore()
        scene_loss(params, dcfg, cfg, schedule, scene, scene.gt_boxes, np.random.default_rng(3), grads=g1, grad_weight=1.0)
        scene_loss(params, dcfg, cfg, schedule, scene, scene.gt_boxes, np.random.default_rng(3), grads=g2, grad_weight=2.5)
        for name in g1.names():
            assert np.allclose(g2[name], 2.5 * g1[name])


class TestStudentStep:
    def test_lambda_zero_matches_no_unlabeled(self):
        dcfg, cfg0 = tiny_det_cfg(), tiny_ssl_cfg(lambda_u=0.0)
        schedule = NoiseSchedule(T=cfg0.T)
        scene = tiny_scene(2)
        labeled = [(scene, scene.gt_boxes)]
        other = tiny_scene(3)
        unlabeled = [(other, other.gt_boxes)]

        pa = det.init_detector_params(dcfg, np.random.default_rng(0))
        pb = pa.clone()
        oa = OptimState.for_params(pa, lr=cfg0.lr)
        ob = OptimState.for_params(pb, lr=cfg0.lr)
        # the rng streams must consume identically, so feed the same batch
        # structure but weight the unlabeled grads with lambda = 0
        la = student_step(labeled, unlabeled, pa, None, oa, dcfg, cfg0, schedule, np.random.default_rng(5))
        lb = student_step(labeled, unlabeled, pb, None, ob, dcfg, cfg0, schedule, np.random.default_rng(5))
        assert la == lb
        for name in pa.names():
            assert np.array_equal(pa[name], pb[name])

    def test_updates_student_and_teacher(self):
        dcfg, cfg = tiny_det_cfg(), tiny_ssl_cfg()
        schedule = NoiseSchedule(T=cfg.T)
        scene = tiny_scene(4)
        student = det.init_detector_params(dcfg, np.random.default_rng(0))
        teacher = student.clone()
        before = student.clone()
        opt = OptimState.for_params(student, lr=cfg.lr)
        student_step([(scene, scene.gt_boxes)], [], student, teacher, opt, dcfg, cfg, schedule, np.random.default_rng(6))
        changed = any(not np.array_equal(student[n], before[n]) for n in student.names())
        assert changed
        # teacher moved a small EMA step toward the student
        for name in student.names():
            expect = cfg.ema_decay * before[name] + (1 - cfg.ema_decay) * student[name]
            assert np.allclose(teacher[name], expect)

    def test_empty_labeled_raises(self):
        dcfg, cfg = tiny_det_cfg(), tiny_ssl_cfg()
        params = det.init_detector_params(dcfg, np.random.default_rng(0))
        opt = OptimState.for_params(params)
        with pytest.raises(ValueError):
            student_step([], [], params, None, opt, dcfg, cfg, NoiseSchedule(T=cfg.T), np.random.default_rng(0))


class TestBoxRenewal:
    def test_row_count_preserved_and_kept_rows_bitwise(self):
        cfg = tiny_ssl_cfg()
        rng = np.random.default_rng(0)
        for trial in range(1000):
            n = int(rng.integers(1, 12))
            k = 4
            state = DiffusionState(
                sizes_t=rng.normal(size=(n, 3)), labels_t=rng.normal(size=(n, k)), t=50
            )
            logits = rng.normal(size=(n, k)) * 3
            preds = det.PredictionBatch(
                center_offset=np.zeros((n, 3)),
                size_raw=np.zeros((n, 3)),
                class_logits=logits,
                obj_logit=rng.normal(size=n) * 3,
                iou_logit=rng.normal(size=n),
            )
            score = preds.objectness * preds.class_probs.max(axis=1)
            renew = score < cfg.tau_renew
            out = box_renewal(state, preds, k, cfg, np.random.default_rng(trial))
            assert out.sizes_t.shape == (n, 3) and out.labels_t.shape == (n, k)
            for i in range(n):
                if not renew[i]:
                    assert np.array_equal(out.sizes_t[i], state.sizes_t[i])
                    assert np.array_equal(out.labels_t[i], state.labels_t[i])

    def test_all_confident_returns_same_object(self):
        cfg = tiny_ssl_cfg()
        state = DiffusionState(sizes_t=np.zeros((3, 3)), labels_t=np.zeros((3, 4)), t=10)
        preds = fake_preds(3, 4, obj_logit=10.0, cls_hot=10.0, iou_logit=0.0)
        assert box_renewal(state, preds, 4, cfg, np.random.default_rng(0)) is state

    def test_renewed_rows_follow_init_distribution(self):
        cfg = tiny_ssl_cfg()
        n = 4000
        state = DiffusionState(sizes_t=np.zeros((n, 3)), labels_t=np.zeros((n, 4)), t=10)
        preds = fake_preds(n, 4, obj_logit=-10.0, cls_hot=0.0, iou_logit=0.0)
        out = box_renewal(state, preds, 4, cfg, np.random.default_rng(1))
        assert abs(out.sizes_t.mean() - scale_signal(cfg.mu_size, 4.0)) < 0.05
        assert abs(out.sizes_t.std() - 1.0) < 0.05


class TestFilterPseudoLabels:
    def make_preds(self, obj, cls_conf, iou):
        # one candidate engineered to the requested activations
        n_classes = 4
        obj_logit = np.log(obj / (1 - obj)) if 0 < obj < 1 else (50.0 if obj >= 1 else -50.0)
        iou_logit = np.log(iou / (1 - iou)) if 0 < iou < 1 else (50.0 if iou >= 1 else -50.0)
        # class conf c with remaining mass split over 3 classes
        rest = (1 - cls_conf) / (n_classes - 1)
        logits = np.log(np.array([cls_conf, rest, rest, rest]))
        return det.PredictionBatch(
            center_offset=np.zeros((1, 3)),
            size_raw=np.zeros((1, 3)),
            class_logits=logits[None],
            obj_logit=np.array([obj_logit]),
            iou_logit=np.array([iou_logit]),
        )

    def test_gate_boundaries_inclusive(self):
        centers = np.zeros((1, 3)) + 0.5
        # pin the thresholds to the exact realized activations: a candidate
        # sitting exactly on every gate is kept (>= semantics)
        preds = self.make_preds(0.9, 0.9, 0.25)
        cfg = tiny_ssl_cfg(
            thr_obj=float(preds.objectness[0]),
            thr_cls=float(preds.class_probs[0].max()),
            thr_iou=float(preds.iou_est[0]),
        )
        assert len(filter_pseudo_labels(preds, centers, cfg)) == 1
        # an activation one ulp below any gate is dropped
        for name in ("thr_obj", "thr_cls", "thr_iou"):
            bumped = tiny_ssl_cfg(**{
                "thr_obj": float(preds.objectness[0]),
                "thr_cls": float(preds.class_probs[0].max()),
                "thr_iou": float(preds.iou_est[0]),
                name: np.nextafter(getattr(cfg, name), 1.0),
            })
            assert filter_pseudo_labels(preds, centers, bumped) == []

    def test_each_gate_rejects(self):
        cfg = tiny_ssl_cfg()
        centers = np.zeros((1, 3)) + 0.5
        assert filter_pseudo_labels(self.make_preds(0.89, 0.99, 0.9), centers, cfg) == []
        assert filter_pseudo_labels(self.make_preds(0.99, 0.89, 0.9), centers, cfg) == []
        assert filter_pseudo_labels(self.make_preds(0.99, 0.99, 0.24), centers, cfg) == []

    def test_boundary_fuzz(self):
        # random triples near the thresholds: keep iff all three gates pass
        cfg = tiny_ssl_cfg()
        rng = np.random.default_rng(2)
        centers = np.zeros((1, 3)) + 0.5
        for _ in range(1000):
            obj = float(rng.uniform(0.85, 0.95))
            cc = float(rng.uniform(0.85, 0.95))
            iou = float(rng.uniform(0.2, 0.3))
            preds = self.make_preds(obj, cc, iou)
            expect = (
                preds.objectness[0] >= cfg.thr_obj
                and preds.class_probs[0].max() >= cfg.thr_cls
                and preds.iou_est[0] >= cfg.thr_iou
            )
            assert (len(filter_pseudo_labels(preds, centers, cfg)) == 1) == expect

    def test_box_fields(self):
        cfg = tiny_ssl_cfg()
        preds = self.make_preds(0.95, 0.95, 0.8)
        preds.center_offset[0] = [0.01, -0.02, 0.0]
        pls = filter_pseudo_labels(preds, np.full((1, 3), 0.5), cfg)
        assert np.allclose(pls[0].box.center, [0.51, 0.48, 0.5])
        assert pls[0].class_id == 0
        assert pls[0].score == pytest.approx(pls[0].objectness * pls[0].class_conf)


class TestDiffusionInference:
    def test_deterministic_given_seed(self):
        dcfg, cfg = tiny_det_cfg(), tiny_ssl_cfg()
        params = det.init_detector_params(dcfg, np.random.default_rng(0))
        schedule = NoiseSchedule(T=cfg.T)
        scene = tiny_scene(5)
        a, ca = diffusion_inference(params, scene, dcfg, cfg, schedule, np.random.default_rng(9))
        b, cb = diffusion_inference(params, scene, dcfg, cfg, schedule, np.random.default_rng(9))
        assert np.array_equal(a.center_offset, b.center_offset)
        assert np.array_equal(ca, cb)

    def test_zero_steps_single_decode(self):
        dcfg, cfg = tiny_det_cfg(), tiny_ssl_cfg(ddim_steps=0)
        params = det.init_detector_params(dcfg, np.random.default_rng(0))
        schedule = NoiseSchedule(T=cfg.T)
        preds, centers = diffusion_inference(params, tiny_scene(6), dcfg, cfg, schedule, np.random.default_rng(0))
        assert len(preds) == cfg.n_b

    def test_oracle_decoder_recovers_gt(self):
        # a decoder that always reports the nearest gt box perfectly should
        # yield pseudo-labels covering every gt after DDIM + filtering
        dcfg, cfg = tiny_det_cfg(), tiny_ssl_cfg()
        params = det.init_detector_params(dcfg, np.random.default_rng(0))
        schedule = NoiseSchedule(T=cfg.T)
        scene = tiny_scene(7)
        gt = scene.gt_boxes

        def oracle(enc, cands, sizes_scene, t):
            n = cands.centers.shape[0]
            gt_centers = np.stack([b.center for b in gt])
            nearest = np.argmin(
                np.linalg.norm(cands.centers[:, None] - gt_centers[None], axis=2), axis=1
            )
            offs = gt_centers[nearest] - cands.centers
            sizes = np.stack([gt[j].size for j in nearest])
            size_raw = np.log(np.expm1(np.maximum(sizes - 1e-3, 1e-9)))
            logits = np.full((n, dcfg.n_classes), -30.0)
            logits[np.arange(n), [gt[j].class_id for j in nearest]] = 30.0
            return det.PredictionBatch(
                center_offset=offs,
                size_raw=size_raw,
                class_logits=logits,
                obj_logit=np.full(n, 30.0),
                iou_logit=np.full(n, 30.0),
            )

        pls = generate_pseudo_labels(params, scene, dcfg, cfg, schedule, np.random.default_rng(1), decode_fn=oracle)
        assert len(pls) >= 1
        for b in gt:
            best = max(iou_aabb(p.box, b) for p in pls)
            assert best > 0.9


class TestRunDetectionAndEvaluate:
    def test_detection_outputs_well_formed(self):
        dcfg, cfg = tiny_det_cfg(), tiny_ssl_cfg()
        params = det.init_detector_params(dcfg, np.random.default_rng(0))
        schedule = NoiseSchedule(T=cfg.T)
        scene = tiny_scene(8)
        dets = run_detection(params, scene, dcfg, cfg, schedule, np.random.default_rng(0))
        for d in dets:
            assert d.scene_id == scene.scene_id
            assert 0.0 <= d.score <= 1.0
            assert d.box.size.min() > 0

    def test_evaluate_reports_thresholds(self):
        dcfg, cfg = tiny_ssl_cfg(), None
        dcfg = tiny_det_cfg()
        cfg = tiny_ssl_cfg()
        params = det.init_detector_params(dcfg, np.random.default_rng(0))
        schedule = NoiseSchedule(T=cfg.T)
        out = evaluate(params, [tiny_scene(9)], dcfg, cfg, schedule, seed=0)
        assert set(out) >= {"map@0.25", "map@0.5", "per_class@0.25", "per_class@0.5"}
        assert 0.0 <= out["map@0.25"] <= 1.0


class TestTrainingLoops:
    def test_pretrain_zero_epochs_returns_init(self):
        dcfg, cfg = tiny_det_cfg(), tiny_ssl_cfg()
        scenes = [tiny_scene(s) for s in range(2)]
        params = pretrain(scenes, dcfg, cfg, seed=0, epochs=0)
        fresh = det.init_detector_params(dcfg, np.random.default_rng(0))
        for name in params.names():
            assert np.array_equal(params[name], fresh[name])

    def test_pretrain_reduces_loss(self):
        dcfg = tiny_det_cfg()
        cfg = tiny_ssl_cfg()
        scenes = [tiny_scene(s) for s in range(4)]
        losses = []
        pretrain(scenes, dcfg, cfg, seed=0, epochs=30, log=lambda e, l: losses.append(l))
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_pretrain_deterministic(self):
        dcfg, cfg = tiny_det_cfg(), tiny_ssl_cfg()
        scenes = [tiny_scene(s) for s in range(2)]
        a = pretrain(scenes, dcfg, cfg, seed=3, epochs=2)
        b = pretrain(scenes, dcfg, cfg, seed=3, epochs=2)
        for name in a.names():
            assert np.array_equal(a[name], b[name])

    def test_train_ssl_runs_and_is_deterministic(self):
        dcfg, cfg = tiny_det_cfg(), tiny_ssl_cfg(batch_unlabeled=2)
        labeled = [tiny_scene(0)]
        unlabeled = [tiny_scene(10), tiny_scene(11)]
        init = pretrain(labeled, dcfg, cfg, seed=0, epochs=2)
        ra = train_ssl(labeled, unlabeled, init, dcfg, cfg, seed=1, epochs=2)
        rb = train_ssl(labeled, unlabeled, init, dcfg, cfg, seed=1, epochs=2)
        assert ra.epoch_losses == rb.epoch_losses
        for name in ra.student.names():
            assert np.array_equal(ra.student[name], rb.student[name])
            assert np.array_equal(ra.teacher[name], rb.teacher[name])
        # teacher stays an EMA: close to but not equal to the student
        moved = any(not np.array_equal(ra.teacher[n], init[n]) for n in init.names())
        assert moved

    def test_epoch_hook_called(self):
        dcfg, cfg = tiny_det_cfg(), tiny_ssl_cfg(batch_unlabeled=0)
        labeled = [tiny_scene(0)]
        init = pretrain(labeled, dcfg, cfg, seed=0, epochs=1)
        seen = []
        train_ssl(labeled, [], init, dcfg, cfg, seed=1, epochs=3, epoch_hook=lambda e, r, o: seen.append(e))
        assert seen == [0, 1, 2]
