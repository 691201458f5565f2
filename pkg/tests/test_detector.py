"""Detector structure: strides, attention behavior, fusion wiring, heads,
assignment, detection loss, and component tagging."""

import numpy as np
import pytest

from gradalign import ops
from gradalign.detector import (BACKGROUND, BOX_LOSS_WEIGHT, LEVELS,
                                ToyDetector, assign_targets, box_iou,
                                cell_for_box, detection_loss, level_for_box)
from gradalign.errors import BadResolution, ShapeMismatch
from gradalign.registry import Component
from gradalign.scenes import SceneObject, scene_batch
from gradalign.tensor import Tape, Tensor, backward, no_grad


@pytest.fixture(scope="module")
def model():
    return ToyDetector(seed=0)


def make_objects(*entries):
    return [[SceneObject(class_id=c, box=b) for c, b in scene] for scene in entries]


class TestBackbone:
    def test_strides_at_256(self, model):
        s3, s4, s5 = model.backbone_features(np.zeros((1, 3, 256, 256)))
        assert s5.shape[2:] == (8, 8)
        assert s4.shape[2:] == (16, 16)
        assert s3.shape[2:] == (32, 32)

    def test_strides_at_128(self, model):
        s3, s4, s5 = model.backbone_features(np.zeros((1, 3, 128, 128)))
        assert s3.shape == (1, 32, 16, 16)
        assert s4.shape == (1, 64, 8, 8)
        assert s5.shape == (1, 128, 4, 4)

    def test_bad_resolution(self, model):
        with pytest.raises(BadResolution):
            model.backbone_features(np.zeros((1, 3, 100, 128)))

    def test_batch_independence(self, model):
        images, _ = scene_batch(0, range(1), 128)
        batch = np.concatenate([images, images])
        with no_grad():
            single = model.backbone_features(images)
            double = model.backbone_features(batch)
        for a, b in zip(single, double):
            np.testing.assert_array_equal(a.data[0], b.data[0])
            np.testing.assert_array_equal(a.data[0], b.data[1])


class TestAttentionBlock:
    def test_f5_keeps_s5_shape(self, model):
        s5 = Tensor(np.random.default_rng(0).normal(size=(2, 128, 4, 4)))
        assert model.attention(s5).shape == s5.shape

    def test_attention_rows_sum_to_one(self, model):
        s5 = Tensor(np.random.default_rng(1).normal(size=(1, 128, 4, 4)))
        model.attention(s5)
        rows = model.attention.last_attn.sum(axis=-1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-12)

    def test_permutation_equivariant_without_positions(self, model):
        rng = np.random.default_rng(2)
        s5 = rng.normal(size=(1, 128, 4, 4))
        perm = rng.permutation(16)
        tokens = s5.reshape(1, 128, 16)
        permuted = tokens[:, :, perm].reshape(1, 128, 4, 4)
        with no_grad():
            out_a = model.attention(Tensor(s5), use_pos=False).data.reshape(1, 128, 16)
            out_b = model.attention(Tensor(permuted), use_pos=False).data.reshape(1, 128, 16)
        np.testing.assert_allclose(out_b, out_a[:, :, perm], atol=1e-10)

    def test_positions_break_equivariance(self, model):
        rng = np.random.default_rng(3)
        s5 = rng.normal(size=(1, 128, 4, 4))
        perm = np.roll(np.arange(16), 1)
        tokens = s5.reshape(1, 128, 16)
        permuted = tokens[:, :, perm].reshape(1, 128, 4, 4)
        with no_grad():
            out_a = model.attention(Tensor(s5)).data.reshape(1, 128, 16)
            out_b = model.attention(Tensor(permuted)).data.reshape(1, 128, 16)
        assert not np.allclose(out_b, out_a[:, :, perm], atol=1e-6)

    def test_wrong_channels(self, model):
        with pytest.raises(ShapeMismatch):
            model.attention(Tensor(np.zeros((1, 64, 4, 4))))


class TestFusion:
    def test_strides_preserved(self, model):
        images, _ = scene_batch(0, range(1), 128)
        with no_grad():
            out, _ = model.forward(images)
        assert out.logits["P3"].shape == (1, 4, 16, 16)
        assert out.logits["P4"].shape == (1, 4, 8, 8)
        assert out.logits["P5"].shape == (1, 4, 4, 4)
        assert out.boxes["P3"].shape == (1, 4, 16, 16)

    def test_f5_semantics_reach_p3(self, model):
        rng = np.random.default_rng(4)
        s3 = Tensor(rng.normal(size=(1, 32, 16, 16)))
        s4 = Tensor(rng.normal(size=(1, 64, 8, 8)))
        f5 = Tensor(rng.normal(size=(1, 128, 4, 4)))
        with no_grad():
            p3_live, _, _ = model.fusion(f5, s4, s3)
            p3_dead, _, _ = model.fusion(Tensor(np.zeros_like(f5.data)), s4, s3)
        assert not np.allclose(p3_live.data, p3_dead.data)

    def test_all_zero_inputs_give_zero_outputs(self):
        fresh = ToyDetector(seed=5)
        zero = lambda c, hw: Tensor(np.zeros((1, c, hw, hw)))
        with no_grad():
            p3, p4, p5 = fresh.fusion(zero(128, 4), zero(64, 8), zero(32, 16))
        assert not p3.data.any() and not p4.data.any() and not p5.data.any()


class TestComponentCensus:
    def test_every_parameter_tagged(self, model):
        tagged = {c: 0 for c in Component}
        for _, t, c in model.registry:
            tagged[c] += t.size
        assert tagged[Component.BACKBONE] > 0
        assert tagged[Component.AIFI] > 0
        assert tagged[Component.CCFF] > 0
        assert tagged[Component.DECODER] > 0
        assert tagged[Component.PROJECTOR] == 0  # projectors register separately
        census = sum(tagged.values())
        assert census == model.registry.n_values()

    def test_gradient_reach_from_f5(self):
        fresh = ToyDetector(seed=1)
        images, _ = scene_batch(0, range(2), 128)
        with Tape() as tape:
            feats = fresh.features(images)
            backward(ops.mean(ops.mul(feats.f5, feats.f5)))
            tape.clear()
        fresh.registry.ensure_grads()
        l1 = {c: fresh.registry.component_grad_l1(c) for c in Component}
        assert l1[Component.AIFI] > 0
        assert l1[Component.BACKBONE] > 0
        assert l1[Component.CCFF] == 0.0
        assert l1[Component.DECODER] == 0.0


class TestAssignment:
    def test_level_thresholds(self):
        assert level_for_box((0.5, 0.5, 0.1, 0.1)) == "P3"     # area 0.01 < 1/64
        assert level_for_box((0.5, 0.5, 0.2, 0.2)) == "P4"     # 0.04 < 1/16
        assert level_for_box((0.5, 0.5, 0.3, 0.3)) == "P5"
        assert level_for_box((0.5, 0.5, 0.125, 0.125)) == "P4"  # ties go up

    def test_center_cell(self):
        assert cell_for_box((0.51, 0.26, 0.1, 0.1), (4, 4)) == (1, 2)
        assert cell_for_box((0.999, 0.999, 0.1, 0.1), (4, 4)) == (3, 3)

    def test_first_object_keeps_cell(self):
        objs = make_objects([(0, (0.5, 0.5, 0.3, 0.3)), (1, (0.52, 0.52, 0.3, 0.3))])
        targets = assign_targets(objs, {"P3": (16, 16), "P4": (8, 8), "P5": (4, 4)})
        t5 = targets["P5"]
        assert t5.classes[0, 2, 2] == 0
        assert t5.mask.sum() == 4.0  # only the first object assigned

    def test_background_default(self):
        targets = assign_targets([[]], {"P3": (16, 16), "P4": (8, 8), "P5": (4, 4)})
        assert (targets["P3"].classes == BACKGROUND).all()
        assert targets["P5"].mask.sum() == 0


class TestDetectionLoss:
    def level_shapes(self):
        return {"P3": (16, 16), "P4": (8, 8), "P5": (4, 4)}

    def synthetic_output(self, targets, logit_margin=0.0, box_value=None):
        logits, boxes = {}, {}
        for lv, (h, w) in self.level_shapes().items():
            t = targets[lv]
            raw = np.zeros((1, 4, h, w))
            if logit_margin:
                onehot = np.eye(4)[t.classes[0]]  # (h, w, 4)
                raw = (onehot.transpose(2, 0, 1) * logit_margin)[None]
            b = t.boxes.copy() if box_value is None else np.full((1, 4, h, w), box_value)
            logits[lv] = Tensor(raw)
            boxes[lv] = Tensor(b)
        from gradalign.detector import DetectionOutput
        return DetectionOutput(logits=logits, boxes=boxes)

    def test_perfect_predictions_drive_loss_to_zero(self):
        objs = make_objects([(1, (0.5, 0.5, 0.3, 0.3)), (2, (0.1, 0.1, 0.12, 0.12))])
        targets = assign_targets(objs, self.level_shapes())
        high = detection_loss(self.synthetic_output(targets, logit_margin=30.0), targets)
        low = detection_loss(self.synthetic_output(targets, logit_margin=5.0), targets)
        assert high.item() < 1e-9
        assert high.item() < low.item()

    def test_uniform_logits_give_log4(self):
        targets = assign_targets([[]], self.level_shapes())
        out = self.synthetic_output(targets)
        assert detection_loss(out, targets).item() == pytest.approx(np.log(4.0), abs=1e-12)

    def test_box_offset_contribution(self):
        # one assigned cell, prediction off by +0.1 in cx only:
        # the box term adds beta * 0.1 / 4
        objs = make_objects([(0, (0.5, 0.5, 0.3, 0.3))])
        targets = assign_targets(objs, self.level_shapes())
        exact = self.synthetic_output(targets, logit_margin=40.0)
        shifted = self.synthetic_output(targets, logit_margin=40.0)
        box = shifted.boxes["P5"].data.copy()
        box[0, 0, 2, 2] += 0.1
        shifted.boxes["P5"] = Tensor(box)
        delta = detection_loss(shifted, targets).item() - detection_loss(exact, targets).item()
        assert delta == pytest.approx(BOX_LOSS_WEIGHT * 0.1 / 4.0, abs=1e-12)

    def test_no_targets_is_legal(self):
        targets = assign_targets([[]], self.level_shapes())
        loss = detection_loss(self.synthetic_output(targets), targets)
        assert np.isfinite(loss.item())


class TestIoU:
    def test_disjoint(self):
        assert box_iou((0.2, 0.2, 0.1, 0.1), (0.8, 0.8, 0.1, 0.1)) == 0.0

    def test_identical(self):
        assert box_iou((0.5, 0.5, 0.2, 0.3), (0.5, 0.5, 0.2, 0.3)) == pytest.approx(1.0)

    def test_half_overlap(self):
        iou = box_iou((0.5, 0.5, 0.2, 0.2), (0.6, 0.5, 0.2, 0.2))
        assert iou == pytest.approx(1.0 / 3.0)

    def test_degenerate_sizes(self):
        assert box_iou((0.5, 0.5, -0.2, 0.1), (0.5, 0.5, 0.2, 0.2)) == 0.0


class TestDeterminism:
    def test_n_steps_bit_reproducible(self):
        def run():
            from gradalign.registry import Adam
            m = ToyDetector(seed=3)
            opt = Adam(m.registry, lr=1e-3)
            losses = []
            for step in range(3):
                images, objects = scene_batch(9, range(step * 2, step * 2 + 2), 128)
                with Tape() as tape:
                    out, _ = m.forward(images)
                    loss = detection_loss(out, assign_targets(objects, out.level_shapes()))
                    backward(loss)
                    tape.clear()
                m.registry.ensure_grads()
                opt.step()
                m.registry.zero_grads()
                losses.append(loss.item())
            return losses

        assert run() == run()
