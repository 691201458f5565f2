"""Frozen teacher stub and the binary feature-file format."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradalign.errors import (BadMagic, BadResolution, GridMismatch,
                              TruncatedPayload, VersionMismatch)
from gradalign.scenes import generate_scene
from gradalign.teacher import (FileTeacher, StubTeacher, TokenSequence,
                               read_feature_file, write_feature_file)


@pytest.fixture(scope="module")
def teacher():
    return StubTeacher(seed=0)


class TestStubTeacher:
    def test_grid_arithmetic(self, teacher):
        seq = teacher.forward(np.zeros((1, 3, 128, 128)))
        assert seq.grid == (8, 8)
        assert seq.tokens.shape == (1, 64, 48)

    def test_bad_resolution(self, teacher):
        with pytest.raises(BadResolution):
            teacher.forward(np.zeros((1, 3, 100, 128)))

    def test_deterministic(self, teacher):
        img = generate_scene(0, 0).image[None]
        a = teacher.forward(img).tokens
        b = teacher.forward(img).tokens
        assert np.array_equal(a, b)
        again = StubTeacher(seed=0).forward(img).tokens
        assert np.array_equal(a, again)

    def test_seed_changes_weights(self):
        assert StubTeacher(seed=0).fingerprint() != StubTeacher(seed=1).fingerprint()

    def test_attention_mixes_patches(self, teacher):
        # perturb a single 16x16 patch; more than one token must change
        img = generate_scene(0, 0).image[None].copy()
        other = img.copy()
        other[:, :, 32:48, 64:80] = 0.0
        t_a = teacher.forward(img).tokens[0]
        t_b = teacher.forward(other).tokens[0]
        changed = np.abs(t_a - t_b).sum(axis=1) > 1e-9
        assert changed.sum() > 1

    def test_token_norms_positive(self, teacher):
        for idx in range(5):
            seq = teacher.forward(generate_scene(3, idx).image[None])
            norms = np.linalg.norm(seq.tokens[0], axis=1)
            assert norms.min() > 0.0

    def test_frozen_fingerprint_is_stable(self, teacher):
        before = teacher.fingerprint()
        teacher.forward(np.ones((2, 3, 64, 64)))
        assert teacher.fingerprint() == before

    def test_batch_independence(self, teacher):
        img = generate_scene(0, 1).image
        batch = np.stack([img, np.zeros_like(img)])
        joint = teacher.forward(batch).tokens
        solo = teacher.forward(img[None]).tokens
        np.testing.assert_array_equal(joint[0], solo[0])


class TestTokenSequence:
    def test_grid_invariant(self):
        with pytest.raises(GridMismatch):
            TokenSequence(tokens=np.zeros((1, 3, 8)), grid=(2, 2))

    def test_valid(self):
        seq = TokenSequence(tokens=np.zeros((2, 6, 4)), grid=(2, 3))
        assert seq.n_patches == 6 and seq.width == 4


class TestFeatureFile:
    def roundtrip(self, tmp_path, tokens, grid):
        seq = TokenSequence(tokens=tokens, grid=grid)
        path = tmp_path / "feat.sdtf"
        write_feature_file(path, seq)
        return path, read_feature_file(path)

    def test_roundtrip_grid_and_values(self, tmp_path):
        rng = np.random.default_rng(0)
        tokens = rng.normal(size=(2, 12, 5))
        path, loaded = self.roundtrip(tmp_path, tokens, (3, 4))
        assert loaded.grid == (3, 4)
        # f32 quantization bound
        np.testing.assert_allclose(loaded.tokens, tokens, rtol=1e-6, atol=1e-6)

    def test_second_write_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        tokens = rng.normal(size=(1, 4, 3))
        path, loaded = self.roundtrip(tmp_path, tokens, (2, 2))
        first = path.read_bytes()
        write_feature_file(path, loaded)
        assert path.read_bytes() == first

    def test_empty_file_bad_magic(self, tmp_path):
        path = tmp_path / "empty.sdtf"
        path.write_bytes(b"")
        with pytest.raises(BadMagic):
            read_feature_file(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.sdtf"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(BadMagic):
            read_feature_file(path)

    def test_version_mismatch(self, tmp_path):
        import struct
        path = tmp_path / "v9.sdtf"
        path.write_bytes(struct.pack("<4sIIIII", b"SDTF", 9, 2, 2, 3, 1) + b"\x00" * 48)
        with pytest.raises(VersionMismatch):
            read_feature_file(path)

    def test_grid_mismatch_in_payload(self, tmp_path):
        # payload holds 3 whole tokens per image but the header says 2x2
        import struct
        path = tmp_path / "grid.sdtf"
        payload = np.zeros(1 * 3 * 3, dtype="<f4").tobytes()
        path.write_bytes(struct.pack("<4sIIIII", b"SDTF", 1, 2, 2, 3, 1) + payload)
        with pytest.raises(GridMismatch):
            read_feature_file(path)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(2)
        seq = TokenSequence(tokens=rng.normal(size=(1, 4, 3)), grid=(2, 2))
        path = tmp_path / "cut.sdtf"
        write_feature_file(path, seq)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(TruncatedPayload):
            read_feature_file(path)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 6))
    def test_roundtrip_property(self, tmp_path_factory, bsz, h, w, c):
        rng = np.random.default_rng(bsz * 1000 + h * 100 + w * 10 + c)
        tokens = rng.normal(size=(bsz, h * w, c)).astype(np.float32).astype(np.float64)
        seq = TokenSequence(tokens=tokens, grid=(h, w))
        path = tmp_path_factory.mktemp("ff") / "t.sdtf"
        write_feature_file(path, seq)
        loaded = read_feature_file(path)
        assert loaded.grid == (h, w)
        np.testing.assert_array_equal(loaded.tokens, tokens)


class TestFileTeacher:
    def test_serves_by_scene_index(self, tmp_path):
        rng = np.random.default_rng(3)
        bank = rng.normal(size=(4, 4, 6))
        path = tmp_path / "bank.sdtf"
        write_feature_file(path, TokenSequence(tokens=bank, grid=(2, 2)))
        ft = FileTeacher(path)
        assert ft.width == 6
        seq = ft.tokens_for_batch(None, [1, 3, 5])
        np.testing.assert_allclose(seq.tokens[0], bank[1], atol=1e-6)
        np.testing.assert_allclose(seq.tokens[2], bank[1], atol=1e-6)  # 5 % 4
