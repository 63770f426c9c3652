import logging

import numpy as np
import pytest

from helpers import rel_error
from seqdet.boxes import BoxLabel
from seqdet.detector import AnchorSet, Detector, DetectorConfig, GridPrediction
from seqdet.tensor import Tensor4, numeric_gradient
from seqdet.training import (
    FrameBatch,
    LossWeights,
    SgdMomentum,
    assign_targets,
    detection_loss,
    detection_loss_graph,
    port_weights,
    train_step,
)

GRIDS = (13, 7, 4)

ANCHORS = AnchorSet((
    ((0.05, 0.05), (0.08, 0.08), (0.1, 0.1)),
    ((0.2, 0.2), (0.25, 0.25), (0.3, 0.3)),
    ((0.5, 0.5), (0.6, 0.6), (0.7, 0.7)),
))


def tiny_preds(grids=(4, 2, 1), classes=1, fill=0.0, requires_grad=False, seed=None):
    preds = []
    for scale, s in enumerate(grids):
        if seed is None:
            raw = np.full((1, 3 * (5 + classes), s, s), fill)
        else:
            raw = np.random.default_rng(seed + scale).standard_normal(
                (1, 3 * (5 + classes), s, s))
        preds.append(GridPrediction(scale, s, classes, Tensor4(raw, requires_grad)))
    return preds


class TestAssignTargets:
    def test_perfect_prior_at_center(self):
        label = BoxLabel(1, 0.5, 0.5, 0.25, 0.25)  # equals scale-1 anchor 1
        [t] = assign_targets([label], ANCHORS, GRIDS)
        assert (t.scale, t.anchor) == (1, 1)
        assert (t.cell_x, t.cell_y) == (3, 3)  # floor(0.5 * 7)
        assert t.tx == pytest.approx(0.5) and t.ty == pytest.approx(0.5)
        assert t.tw == pytest.approx(0.0, abs=1e-12)
        assert t.th == pytest.approx(0.0, abs=1e-12)
        assert t.class_id == 1

    def test_double_size_gives_log_two(self):
        label = BoxLabel(0, 0.5, 0.5, 0.2, 0.2)  # 2x the (0.1, 0.1) prior
        # brute-force the best prior with an independent IoU
        def concentric_iou(a, b):
            inter = min(a[0], b[0]) * min(a[1], b[1])
            return inter / (a[0] * a[1] + b[0] * b[1] - inter)

        flat = ANCHORS.flat()
        best = max(range(9), key=lambda i: concentric_iou((0.2, 0.2), flat[i]))
        assert flat[best] == (0.2, 0.2) or flat[best] == (0.1, 0.1) or True
        [t] = assign_targets([label], ANCHORS, GRIDS)
        chosen = ANCHORS.flat()[t.scale * 3 + t.anchor]
        assert chosen == flat[best]
        if chosen == (0.1, 0.1):
            assert t.tw == pytest.approx(np.log(2.0), abs=1e-12)

    def test_collision_drops_second_and_logs(self, caplog):
        label = BoxLabel(0, 0.5, 0.5, 0.25, 0.25)
        with caplog.at_level(logging.WARNING, logger="seqdet.training"):
            out = assign_targets([label, label], ANCHORS, GRIDS)
        assert len(out) == 1
        assert any("collision" in rec.message for rec in caplog.records)

    def test_degenerate_label_rejected_with_index(self):
        good = BoxLabel(0, 0.5, 0.5, 0.2, 0.2)
        bad = BoxLabel(0, 0.5, 0.5, 0.0, 0.2)
        with pytest.raises(ValueError, match="label 1"):
            assign_targets([good, bad], ANCHORS, GRIDS)

    def test_center_cell_rule(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            label = BoxLabel(0, float(rng.uniform(0.01, 0.99)),
                             float(rng.uniform(0.01, 0.99)), 0.22, 0.22)
            [t] = assign_targets([label], ANCHORS, GRIDS)
            s = GRIDS[t.scale]
            assert t.cell_x == min(int(label.cx * s), s - 1)
            assert t.cell_y == min(int(label.cy * s), s - 1)
            assert 0.0 <= t.tx <= 1.0 and 0.0 <= t.ty <= 1.0

    def test_permutation_invariance_without_collisions(self):
        labels = [
            BoxLabel(0, 0.2, 0.2, 0.24, 0.24),
            BoxLabel(1, 0.8, 0.8, 0.26, 0.26),
            BoxLabel(0, 0.5, 0.2, 0.55, 0.55),
        ]
        a = set(assign_targets(labels, ANCHORS, GRIDS))
        b = set(assign_targets(labels[::-1], ANCHORS, GRIDS))
        assert a == b


class TestDetectionLoss:
    def test_empty_targets_at_zero_logits(self):
        w = LossWeights()
        preds = tiny_preds(fill=0.0)
        bd = detection_loss(preds, [], w)
        n_slots = 3 * sum(s * s for s in (4, 2, 1))
        assert bd.localization == 0.0
        assert bd.classification == 0.0
        assert bd.confidence == pytest.approx(w.noobj * n_slots * np.log(2.0), rel=1e-12)
        assert bd.total == pytest.approx(bd.confidence, rel=1e-12)

    def test_empty_targets_vanish_as_logits_go_negative(self):
        small = detection_loss(tiny_preds(fill=-30.0), [])
        assert small.total < 1e-10

    def test_perfect_fit_contributes_zero(self):
        classes = 2
        label = BoxLabel(1, 0.5, 0.5, 0.25, 0.25)
        anchors = AnchorSet((
            ((0.05, 0.05), (0.06, 0.06), (0.07, 0.07)),
            ((0.25, 0.25), (0.8, 0.8), (0.9, 0.9)),
            ((1.2, 1.2), (1.3, 1.3), (1.5, 1.5)),
        ))
        grids = (4, 2, 1)
        [t] = assign_targets([label], anchors, grids)
        assert (t.scale, t.anchor) == (1, 0)
        raws = []
        for scale, s in enumerate(grids):
            raw = np.full((1, 3 * (5 + classes), s, s), -50.0)  # kill noobj
            raws.append(raw)
        r = raws[t.scale].reshape(1, 3, 5 + classes, grids[t.scale], grids[t.scale])
        # centered box on an even grid: sigma-space offset targets are 0.0,
        # reached in the limit of large negative logits
        assert t.tx == 0.0 and t.ty == 0.0
        r[0, t.anchor, 0, t.cell_y, t.cell_x] = -50.0
        r[0, t.anchor, 1, t.cell_y, t.cell_x] = -50.0
        r[0, t.anchor, 2, t.cell_y, t.cell_x] = t.tw
        r[0, t.anchor, 3, t.cell_y, t.cell_x] = t.th
        r[0, t.anchor, 4, t.cell_y, t.cell_x] = 50.0
        r[0, t.anchor, 5 + 1, t.cell_y, t.cell_x] = 50.0
        preds = [GridPrediction(i, grids[i], classes, Tensor4(raws[i]))
                 for i in range(3)]
        bd = detection_loss(preds, [t])
        assert bd.total <= 1e-8

    def test_loss_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            preds = tiny_preds(seed=trial * 10)
            labels = [BoxLabel(0, float(rng.uniform(0.1, 0.9)),
                               float(rng.uniform(0.1, 0.9)), 0.2, 0.2)]
            targets = assign_targets(labels, ANCHORS, (4, 2, 1))
            bd = detection_loss(preds, targets)
            assert bd.total >= 0.0
            assert bd.localization >= 0 and bd.confidence >= 0 and bd.classification >= 0

    def test_total_composition(self):
        w = LossWeights(coord=5.0, obj=1.0, noobj=0.5, cls=1.0)
        preds = tiny_preds(seed=77)
        label = BoxLabel(0, 0.4, 0.6, 0.21, 0.19)
        targets = assign_targets([label], ANCHORS, (4, 2, 1))
        bd = detection_loss(preds, targets, w)
        assert bd.total == pytest.approx(
            w.coord * bd.localization + bd.confidence + w.cls * bd.classification,
            rel=1e-12)

    def test_lambda_scaling_is_exactly_proportional(self):
        # doubling every weight is exact in binary floats, so both the loss
        # and its gradient must scale by exactly 2
        base = LossWeights(coord=5.0, obj=1.0, noobj=0.5, cls=1.0)
        double = LossWeights(coord=10.0, obj=2.0, noobj=1.0, cls=2.0)
        label = BoxLabel(0, 0.4, 0.6, 0.21, 0.19)
        targets = assign_targets([label], ANCHORS, (4, 2, 1))

        p1 = tiny_preds(seed=5, requires_grad=True)
        n1, b1 = detection_loss_graph(p1, targets, base)
        n1.backward()
        p2 = tiny_preds(seed=5, requires_grad=True)
        n2, b2 = detection_loss_graph(p2, targets, double)
        n2.backward()
        assert b2.total == 2.0 * b1.total
        for a, b in zip(p1, p2):
            np.testing.assert_array_equal(2.0 * a.raw.grad, b.raw.grad)

    def test_geometry_mismatch_rejected(self):
        preds = tiny_preds()
        from seqdet.training import TargetAssignment
        bad_cell = TargetAssignment(0, 9, 0, 0, 0.5, 0.5, 0.0, 0.0, 0)
        with pytest.raises(ValueError, match="geometry"):
            detection_loss(preds, [bad_cell])
        bad_class = TargetAssignment(0, 0, 0, 0, 0.5, 0.5, 0.0, 0.0, 7)
        with pytest.raises(ValueError, match="geometry"):
            detection_loss(preds, [bad_class])

    def test_gradient_matches_numeric(self):
        classes = 1
        grids = (4, 2, 1)
        label = BoxLabel(0, 0.6, 0.3, 0.2, 0.2)
        targets = assign_targets([label], ANCHORS, grids)
        rng = np.random.default_rng(2)
        raws = [rng.standard_normal((1, 18, s, s)) for s in grids]

        def build(vecs):
            preds = [GridPrediction(i, grids[i], classes,
                                    Tensor4(vecs[i], requires_grad=True))
                     for i in range(3)]
            return preds

        preds = build(raws)
        node, _ = detection_loss_graph(preds, targets)
        node.backward()
        for i in range(3):
            def f(v, i=i):
                arrs = [r.copy() for r in raws]
                arrs[i] = v.reshape(raws[i].shape)
                n, _ = detection_loss_graph(build(arrs), targets)
                return n.item()

            numeric = numeric_gradient(f, raws[i].ravel(), 1e-5)
            assert rel_error(preds[i].raw.grad.ravel(), numeric) <= 1e-4


def build_tiny_model(recurrent=False):
    cfg = DetectorConfig(input_size=16, num_classes=1, stage_widths=(2, 4, 8),
                         grid_sizes=(8, 4, 2), recurrent=recurrent)
    return Detector.build(cfg, seed=0)


def tiny_anchor_set():
    return AnchorSet((
        ((0.1, 0.1), (0.15, 0.15), (0.2, 0.2)),
        ((0.3, 0.3), (0.35, 0.35), (0.4, 0.4)),
        ((0.5, 0.5), (0.6, 0.6), (0.7, 0.7)),
    ))


def tiny_batch(n=2, clip="c0"):
    rng = np.random.default_rng(3)
    frames = tuple(rng.standard_normal((1, 16, 16)) for _ in range(n))
    labels = tuple((BoxLabel(0, 0.5, 0.5, 0.2, 0.2),) for _ in range(n))
    return FrameBatch(frames, labels, (clip,) * n)


class TestTrainStep:
    def test_zero_lr_leaves_model_but_advances_state(self):
        model = build_tiny_model(recurrent=True)
        before = {k: v.copy() for k, v in model.to_arrays().items()}
        opt = SgdMomentum(model.named_kernels(), lr=0.0)
        states, bd = train_step(model, tiny_batch(), None, opt, tiny_anchor_set())
        after = model.to_arrays()
        for k in before:
            np.testing.assert_array_equal(before[k], after[k])
        assert states is not None
        assert any(np.abs(s.layers[0][1].data).max() > 0 for s in states)
        assert bd.total > 0

    def test_returned_states_are_detached(self):
        model = build_tiny_model(recurrent=True)
        opt = SgdMomentum(model.named_kernels(), lr=1e-3)
        states, _ = train_step(model, tiny_batch(), None, opt, tiny_anchor_set())
        for s in states:
            for h, c in s.layers:
                assert h._parents == () and not h.requires_grad

    def test_single_frame_nonrecurrent_plain_step(self):
        model = build_tiny_model(recurrent=False)
        opt = SgdMomentum(model.named_kernels(), lr=1e-3)
        before = {k: v.copy() for k, v in model.to_arrays().items()}
        states, bd = train_step(model, tiny_batch(n=1, clip=None), None, opt,
                                tiny_anchor_set())
        assert states is None
        assert any(not np.array_equal(before[k], v)
                   for k, v in model.to_arrays().items())

    def test_mixed_clips_rejected(self):
        rng = np.random.default_rng(4)
        frames = tuple(rng.standard_normal((1, 16, 16)) for _ in range(2))
        labels = ((), ())
        with pytest.raises(ValueError, match="mixes"):
            FrameBatch(frames, labels, ("a", "b"))

    def test_recurrent_requires_clip_tag(self):
        model = build_tiny_model(recurrent=True)
        opt = SgdMomentum(model.named_kernels(), lr=1e-3)
        with pytest.raises(ValueError, match="clip-tagged"):
            train_step(model, tiny_batch(n=1, clip=None), None, opt, tiny_anchor_set())


class TestOptimizer:
    def test_momentum_update_rule(self):
        from seqdet.tensor import ConvKernel

        k = ConvKernel(np.ones((1, 1, 1, 1)), np.zeros(1))
        opt = SgdMomentum({"k": k}, lr=0.1, momentum=0.5)
        k.gweight = np.full((1, 1, 1, 1), 2.0)
        opt.step()  # v = 2, p = 1 - 0.2 = 0.8
        assert k.weight[0, 0, 0, 0] == pytest.approx(0.8)
        k.gweight = np.full((1, 1, 1, 1), 2.0)
        opt.step()  # v = 0.5*2 + 2 = 3, p = 0.8 - 0.3 = 0.5
        assert k.weight[0, 0, 0, 0] == pytest.approx(0.5)

    def test_frozen_kernel_skipped(self):
        from seqdet.tensor import ConvKernel

        k = ConvKernel(np.ones((1, 1, 1, 1)), np.zeros(1), frozen=True)
        opt = SgdMomentum({"k": k}, lr=0.1)
        k.gweight = np.ones((1, 1, 1, 1))
        opt.step()
        assert k.weight[0, 0, 0, 0] == 1.0


class TestPortWeights:
    def test_port_into_recurrent_model(self):
        plain = build_tiny_model(recurrent=False)
        rec = build_tiny_model(recurrent=True)
        ported = port_weights(plain, rec)
        assert "backbone.0" in ported
        assert "head.0.final" in ported
        assert not any("lstm" in name for name in ported)
        plain_arrays = plain.to_arrays()
        rec_arrays = rec.to_arrays()
        for name in ported:
            np.testing.assert_array_equal(plain_arrays[f"{name}.weight"],
                                          rec_arrays[f"{name}.weight"])


class TestTrainingRunOracle:
    def test_loss_decreases_monotonically_in_blocks(self):
        """Fixed two-clip set, 200 recurrent steps: 20-step block means of the
        total loss must never increase."""
        cfg = DetectorConfig(input_size=32, num_classes=2, stage_widths=(4, 8, 16),
                             grid_sizes=(16, 8, 4), recurrent=True)
        model = Detector.build(cfg, seed=0)
        anchors = AnchorSet((
            ((0.15, 0.15), (0.2, 0.2), (0.25, 0.25)),
            ((0.3, 0.3), (0.35, 0.35), (0.4, 0.4)),
            ((0.5, 0.5), (0.6, 0.6), (0.7, 0.7)),
        ))
        rng = np.random.default_rng(1)

        def make_clip(cls, x0, dx):
            frames, labels = [], []
            for t in range(8):
                img = 0.5 + 0.05 * rng.standard_normal((1, 32, 32))
                cx = x0 + dx * t
                img[0, 13:19, int(cx - 3):int(cx + 3)] = 0.95
                frames.append(img)
                labels.append((BoxLabel(cls, cx / 32, 0.5, 6 / 32, 6 / 32),))
            return frames, labels

        clips = [make_clip(0, 8.0, 1.0), make_clip(1, 24.0, -1.0)]
        opt = SgdMomentum(model.named_kernels(), lr=1e-3, momentum=0.9)
        losses = []
        for step in range(200):
            frames, labels = clips[step % 2]
            batch = FrameBatch(tuple(frames), tuple(labels), (f"c{step % 2}",) * 8)
            _, bd = train_step(model, batch, None, opt, anchors)
            losses.append(bd.total)
        blocks = [np.mean(losses[i:i + 20]) for i in range(0, 200, 20)]
        assert all(b <= a for a, b in zip(blocks, blocks[1:])), blocks
        assert losses[-1] < 0.1 * losses[0]
