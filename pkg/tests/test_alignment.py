"""Alignment geometry: token reshape, bilinear resize, projectors, losses,
injection strategies, and gradient routing."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from gradalign import ops
from gradalign.alignment import (Aligner, Conv1x1Projector, InjectionStrategy,
                                 LinearProjector, MlpProjector, alignment_loss,
                                 bilinear_resize, cosine_alignment_loss,
                                 make_projector, map_to_tokens,
                                 mse_alignment_loss, parse_strategy,
                                 project_student, teacher_target,
                                 tokens_to_map)
from gradalign.detector import ToyDetector
from gradalign.errors import (ChannelMismatch, MissingFeature, ShapeMismatch,
                              ZeroTarget)
from gradalign.registry import Component, ParameterRegistry
from gradalign.teacher import StubTeacher, TokenSequence
from gradalign.tensor import Tape, Tensor, backward


def bilinear_reference(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Independent scalar bilinear resampler (half-pixel centers, clamped)."""
    h, w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
            x = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = (src[y0, x0] * (1 - fy) * (1 - fx)
                         + src[y0, x1] * (1 - fy) * fx
                         + src[y1, x0] * fy * (1 - fx)
                         + src[y1, x1] * fy * fx)
    return out


class TestTokenReshape:
    def test_row_major_placement(self):
        tokens = np.arange(4, dtype=np.float64).reshape(1, 4, 1)
        grid_map = tokens_to_map(TokenSequence(tokens=tokens, grid=(2, 2)))
        assert grid_map[0, 0, 1, 0] == 2.0  # token 2 -> (row 1, col 0)
        assert grid_map[0, 0, 0, 1] == 1.0

    def test_single_cell(self):
        tokens = np.array([[[3.0, 4.0]]])
        grid_map = tokens_to_map(TokenSequence(tokens=tokens, grid=(1, 1)))
        np.testing.assert_array_equal(grid_map[0, :, 0, 0], [3.0, 4.0])

    def test_reshape_then_flatten_is_identity(self):
        rng = np.random.default_rng(0)
        tokens = rng.normal(size=(2, 12, 5))
        seq = TokenSequence(tokens=tokens, grid=(3, 4))
        np.testing.assert_array_equal(map_to_tokens(tokens_to_map(seq)), tokens)


class TestBilinearResize:
    def test_identity_at_same_size(self):
        rng = np.random.default_rng(1)
        src = rng.normal(size=(2, 3, 5, 7))
        np.testing.assert_array_equal(bilinear_resize(src, 5, 7), src)

    def test_single_cell_source_is_constant(self):
        src = np.full((1, 2, 1, 1), 3.5)
        out = bilinear_resize(src, 4, 6)
        assert out.shape == (1, 2, 4, 6)
        np.testing.assert_array_equal(out, np.full((1, 2, 4, 6), 3.5))

    def test_2x2_to_4x4_matches_reference(self):
        src = np.array([[0.0, 1.0], [2.0, 3.0]])
        got = bilinear_resize(src[None, None], 4, 4)[0, 0]
        np.testing.assert_allclose(got, bilinear_reference(src, 4, 4), atol=1e-12)

    @pytest.mark.parametrize("shape,target", [((8, 8), (4, 4)), ((8, 8), (16, 16)),
                                              ((5, 3), (7, 11)), ((4, 6), (3, 2))])
    def test_random_maps_match_reference(self, shape, target):
        rng = np.random.default_rng(hash(shape + target) % 2 ** 31)
        src = rng.normal(size=shape)
        got = bilinear_resize(src[None, None], *target)[0, 0]
        np.testing.assert_allclose(got, bilinear_reference(src, *target), atol=1e-12)

    def test_zero_target_rejected(self):
        with pytest.raises(ZeroTarget):
            bilinear_resize(np.zeros((1, 1, 2, 2)), 0, 4)


class TestProjectors:
    def test_linear_identity(self):
        rng = np.random.default_rng(0)
        proj = LinearProjector(rng, 3, 3)
        proj.weight.data = np.eye(3)
        proj.bias.data = np.zeros(3)
        feat = Tensor(rng.normal(size=(2, 3, 4, 4)))
        np.testing.assert_allclose(project_student(feat, proj).data, feat.data,
                                   atol=1e-12)

    def test_zero_weights_zero_output(self):
        rng = np.random.default_rng(0)
        proj = LinearProjector(rng, 3, 5)
        proj.weight.data[:] = 0.0
        out = project_student(Tensor(rng.normal(size=(1, 3, 2, 2))), proj)
        np.testing.assert_array_equal(out.data, np.zeros((1, 5, 2, 2)))

    def test_hand_matvec(self):
        # rows [1,0],[0,1],[1,1] mapping (2,5) -> (2,5,7)
        rng = np.random.default_rng(0)
        proj = LinearProjector(rng, 2, 3)
        proj.weight.data = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
        proj.bias.data = np.zeros(3)
        feat = np.zeros((1, 2, 1, 1))
        feat[0, :, 0, 0] = [2.0, 5.0]
        out = project_student(Tensor(feat), proj)
        np.testing.assert_array_equal(out.data[0, :, 0, 0], [2.0, 5.0, 7.0])

    def test_conv1x1_equals_linear_map(self):
        rng = np.random.default_rng(3)
        lin = LinearProjector(np.random.default_rng(7), 4, 3)
        conv = Conv1x1Projector(np.random.default_rng(7), 4, 3)
        conv.weight.data = lin.weight.data.T.reshape(3, 4, 1, 1).copy()
        conv.bias.data = lin.bias.data.copy()
        feat = Tensor(rng.normal(size=(2, 4, 3, 3)))
        np.testing.assert_allclose(project_student(feat, conv).data,
                                   project_student(feat, lin).data, atol=1e-12)

    def test_mlp_output_width(self):
        proj = MlpProjector(np.random.default_rng(0), 4, 6)
        out = project_student(Tensor(np.random.default_rng(1).normal(size=(1, 4, 2, 2))), proj)
        assert out.shape == (1, 6, 2, 2)

    def test_channel_mismatch(self):
        proj = LinearProjector(np.random.default_rng(0), 4, 3)
        with pytest.raises(ChannelMismatch):
            project_student(Tensor(np.zeros((1, 5, 2, 2))), proj)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_projector("resnet", np.random.default_rng(0), 2, 2)


class TestCosineLoss:
    def test_identical_inputs_reach_minus_one(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 4, 3, 3)) + 1.0
        loss = cosine_alignment_loss(Tensor(x), Tensor(x.copy()))
        assert abs(loss.item() + 1.0) < 1e-9

    def test_orthogonal_inputs_zero(self):
        a = np.zeros((1, 2, 2, 2))
        b = np.zeros((1, 2, 2, 2))
        a[:, 0] = 1.0
        b[:, 1] = 1.0
        assert abs(cosine_alignment_loss(Tensor(a), Tensor(b)).item()) < 1e-9

    def test_antiparallel_inputs_plus_one(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 3, 2, 2)) + 0.5
        loss = cosine_alignment_loss(Tensor(x), Tensor(-x))
        assert abs(loss.item() - 1.0) < 1e-9

    def test_zero_location_contributes_zero(self):
        a = np.ones((1, 2, 1, 2))
        b = np.ones((1, 2, 1, 2))
        a[0, :, 0, 0] = 0.0  # one all-zero student location
        loss = cosine_alignment_loss(Tensor(a), Tensor(b))
        assert abs(loss.item() + 0.5) < 1e-9

    def test_zero_location_backward_is_finite(self):
        a = np.ones((1, 2, 1, 2))
        a[0, :, 0, 0] = 0.0
        x = Tensor(a, requires_grad=True)
        with Tape() as tape:
            backward(cosine_alignment_loss(x, Tensor(np.ones((1, 2, 1, 2)))))
            tape.clear()
        assert np.all(np.isfinite(x.grad))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            cosine_alignment_loss(Tensor(np.zeros((1, 2, 2, 2))),
                                  Tensor(np.zeros((1, 3, 2, 2))))

    def test_mse_definition(self):
        a = np.zeros((1, 2, 1, 1))
        b = np.ones((1, 2, 1, 1))
        assert mse_alignment_loss(Tensor(a), Tensor(b)).item() == 1.0

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, (1, 3, 2, 2),
                      elements=st.floats(-10, 10)),
           hnp.arrays(np.float64, (1, 3, 2, 2),
                      elements=st.floats(-10, 10)))
    def test_range_property(self, a, b):
        val = cosine_alignment_loss(Tensor(a), Tensor(b)).item()
        assert -1.0 - 1e-9 <= val <= 1.0 + 1e-9

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, (1, 3, 2, 2),
                      elements=st.floats(-5, 5, allow_subnormal=False)),
           st.floats(0.01, 100.0))
    def test_positive_scale_invariance(self, a, c):
        base = np.where(np.abs(a) < 0.1, 0.1, a)  # keep norms well away from the floor
        target = np.random.default_rng(0).normal(size=(1, 3, 2, 2)) + 0.3
        v1 = cosine_alignment_loss(Tensor(base), Tensor(target)).item()
        v2 = cosine_alignment_loss(Tensor(base * c), Tensor(target)).item()
        assert abs(v1 - v2) < 1e-9


class TestStrategies:
    def channels(self):
        return {"S3": 32, "S4": 64, "S5": 128, "F5": 128}

    def test_parse_variants(self):
        assert parse_strategy("aifi-only").aligned_features() == ("F5",)
        assert parse_strategy("backbone", ["S5"]).aligned_features() == ("S5",)
        assert parse_strategy("backbone").aligned_features() == ("S3", "S4", "S5")
        assert parse_strategy("hybrid").aligned_features() == ("S3", "S4", "S5", "F5")

    def test_invalid_strategies(self):
        with pytest.raises(ValueError):
            InjectionStrategy(kind="backbone", levels=())
        with pytest.raises(ValueError):
            InjectionStrategy(kind="backbone", levels=("F5",))
        with pytest.raises(ValueError):
            InjectionStrategy(kind="aifi-only", levels=("S3",))
        with pytest.raises(ValueError):
            parse_strategy("decoder")

    def build(self, strategy, seed=0, loss_kind="cosine"):
        model = ToyDetector(seed=seed)
        teacher = StubTeacher(seed=11)
        aligner = Aligner(seed=seed, strategy=strategy,
                          feature_channels=self.channels(),
                          teacher_width=teacher.width, loss_kind=loss_kind)
        return model, teacher, aligner

    def batch(self, model, teacher, n=2):
        from gradalign.scenes import scene_batch
        images, _ = scene_batch(0, range(n), 128)
        feats = model.features(images)
        tokens = teacher.forward(images)
        return feats, tokens

    def test_aifi_only_is_single_term(self):
        model, teacher, aligner = self.build(parse_strategy("aifi-only"))
        feats, tokens = self.batch(model, teacher)
        total = aligner.loss(feats, tokens).item()
        target = Tensor(teacher_target(tokens, 4, 4))
        direct = alignment_loss(project_student(feats.f5, aligner.projectors["F5"]),
                                target, "cosine").item()
        assert total == direct

    def test_backbone_s5_differs_from_aifi_only(self):
        model, teacher, a1 = self.build(parse_strategy("backbone", ["S5"]))
        _, _, a2 = self.build(parse_strategy("aifi-only"))
        feats, tokens = self.batch(model, teacher)
        assert a1.loss(feats, tokens).item() != a2.loss(feats, tokens).item()

    def test_hybrid_is_sum_with_shared_projectors(self):
        model, teacher, hybrid = self.build(parse_strategy("hybrid"))
        feats, tokens = self.batch(model, teacher)
        backbone = Aligner(seed=0, strategy=parse_strategy("backbone"),
                           feature_channels=self.channels(),
                           teacher_width=teacher.width)
        aifi = Aligner(seed=0, strategy=parse_strategy("aifi-only"),
                       feature_channels=self.channels(),
                       teacher_width=teacher.width)
        for feat in ("S3", "S4", "S5"):
            backbone.projectors[feat] = hybrid.projectors[feat]
        aifi.projectors["F5"] = hybrid.projectors["F5"]
        lhs = hybrid.loss(feats, tokens).item()
        rhs = backbone.loss(feats, tokens).item() + aifi.loss(feats, tokens).item()
        assert abs(lhs - rhs) < 1e-12

    def test_missing_feature_detected(self):
        _, teacher, aligner = self.build(parse_strategy("aifi-only"))

        class NoF5:
            s3 = s4 = s5 = None
            f5 = None

        with pytest.raises(MissingFeature):
            aligner.loss(NoF5(), teacher.forward(np.zeros((1, 3, 64, 64))))

    def test_gradient_routing_aifi_only(self):
        model, teacher, aligner = self.build(parse_strategy("aifi-only"))
        aligner.register(model.registry)
        from gradalign.scenes import scene_batch
        images, _ = scene_batch(0, range(2), 128)
        with Tape() as tape:
            feats = model.features(images)
            loss = aligner.loss(feats, teacher.forward(images))
            backward(loss)
            tape.clear()
        model.registry.ensure_grads()
        l1 = {c: model.registry.component_grad_l1(c) for c in Component}
        assert l1[Component.PROJECTOR] > 0
        assert l1[Component.AIFI] > 0
        assert l1[Component.BACKBONE] > 0
        assert l1[Component.CCFF] == 0.0
        assert l1[Component.DECODER] == 0.0

    def test_gradient_routing_backbone_s5_skips_attention(self):
        model, teacher, aligner = self.build(parse_strategy("backbone", ["S5"]))
        aligner.register(model.registry)
        from gradalign.scenes import scene_batch
        images, _ = scene_batch(0, range(2), 128)
        with Tape() as tape:
            feats = model.features(images)
            loss = aligner.loss(feats, teacher.forward(images))
            backward(loss)
            tape.clear()
        model.registry.ensure_grads()
        assert model.registry.component_grad_l1(Component.AIFI) == 0.0
        assert model.registry.component_grad_l1(Component.BACKBONE) > 0

    def test_one_descent_step_does_not_increase_loss(self):
        from gradalign.registry import Sgd
        model, teacher, aligner = self.build(parse_strategy("aifi-only"))
        registry = ParameterRegistry()
        aligner.register(registry)
        from gradalign.scenes import scene_batch
        images, _ = scene_batch(0, range(2), 128)
        feats_const = model.features(images)
        tokens = teacher.forward(images)
        f5_fixed = Tensor(feats_const.f5.data.copy())

        def loss_now():
            target = Tensor(teacher_target(tokens, 4, 4))
            return alignment_loss(project_student(f5_fixed, aligner.projectors["F5"]),
                                  target, "cosine")

        with Tape() as tape:
            before = loss_now()
            backward(before)
            tape.clear()
        registry.ensure_grads()
        Sgd(registry, lr=1e-3).step()
        after = loss_now()
        assert after.item() <= before.item() + 1e-12
