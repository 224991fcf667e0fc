import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsv.core_math import grad_check, softmax
from anchorsv.errors import FrozenBranchError, ShapeMismatch
from anchorsv.losses import stage1_objective
from anchorsv.model import (POOL_EPS, SOFTMAX, Arch, Checkpoint, HeadMode, HeadParams,
                            clone_and_freeze, deep_copy, digest, extractor_forward, flatten,
                            flatten_grads, forward_embed, forward_logits, head_forward,
                            init_branch, load_checkpoint, save_checkpoint, stats_pool, unflatten)

SMALL = Arch(in_dim=4, hidden_dim=5, embed_dim=6, n_classes=3)


class TestStatsPool:
    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 30))
    def test_permutation_invariant_bitwise(self, seed, t):
        rng = np.random.default_rng(seed)
        h = rng.standard_normal((2, t, 7))
        perm = rng.permutation(t)
        a, _ = stats_pool(h)
        b, _ = stats_pool(h[:, perm])
        assert a.tobytes() == b.tobytes()

    def test_identical_frames(self):
        h = np.tile(np.array([0.5, -1.0, 2.0]), (1, 6, 1))
        pooled, _ = stats_pool(h)
        np.testing.assert_array_equal(pooled[0, :3], [0.5, -1.0, 2.0])
        np.testing.assert_allclose(pooled[0, 3:], math.sqrt(POOL_EPS), rtol=1e-12)

    def test_two_frame_hand_case(self):
        h = np.array([[[1.0, 0.0], [3.0, 4.0]]])
        pooled, _ = stats_pool(h)
        np.testing.assert_allclose(pooled[0], [2.0, 2.0, math.sqrt(1 + POOL_EPS),
                                               math.sqrt(4 + POOL_EPS)], rtol=1e-15)

    def test_extractor_frame_order_invariant(self):
        # the frame MLP runs through BLAS, which may round rows differently
        # by position, so only pooling itself is bitwise invariant
        branch = init_branch(SMALL, 0)
        x = np.random.default_rng(1).standard_normal((10, 4))
        a = forward_embed(branch.extractor, x)
        b = forward_embed(branch.extractor, x[::-1])
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)

    def test_shape_checks(self):
        branch = init_branch(SMALL, 0)
        with pytest.raises(ShapeMismatch):
            extractor_forward(branch.extractor, np.zeros((1, 5, 3)))
        with pytest.raises(ShapeMismatch):
            extractor_forward(branch.extractor, np.zeros((1, 1, 4)))


class TestHead:
    def test_margin_zero_matches_normalized_softmax(self):
        rng = np.random.default_rng(0)
        head = HeadParams(rng.standard_normal((5, 6)), np.zeros(5))
        emb = rng.standard_normal(6)
        mode = HeadMode("aam", 0.0, 30.0)
        wn = head.W / np.linalg.norm(head.W, axis=1, keepdims=True)
        ref = softmax(30.0 * wn @ (emb / np.linalg.norm(emb)))
        np.testing.assert_allclose(softmax(forward_logits(head, emb, mode, 2)), ref, atol=1e-12)

    def test_target_logit_with_margin(self):
        head = HeadParams(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2))
        logits = forward_logits(head, [2.0, 0.0], HeadMode("aam", 0.2, 30.0), 0)
        assert logits[0] == pytest.approx(30 * math.cos(0.2), abs=1e-12)
        assert logits[0] == pytest.approx(29.40199733523725, abs=1e-12)
        assert logits[1] == pytest.approx(0.0, abs=1e-12)

    def test_margin_needs_label(self):
        head = HeadParams(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2))
        logits = forward_logits(head, [2.0, 0.0], HeadMode("aam", 0.2, 30.0))
        assert logits[0] == pytest.approx(30.0, abs=1e-12)

    def test_single_class(self):
        head = HeadParams(np.array([[0.3, -1.0]]), np.zeros(1))
        for mode in (SOFTMAX, HeadMode()):
            assert softmax(forward_logits(head, [1.0, 2.0], mode, 0))[0] == 1.0

    @given(st.floats(0.01, 100))
    def test_aam_embedding_scale_invariant(self, s):
        rng = np.random.default_rng(4)
        head = HeadParams(rng.standard_normal((4, 3)), np.zeros(4))
        emb = rng.standard_normal(3)
        np.testing.assert_allclose(forward_logits(head, s * emb, HeadMode(), 1),
                                   forward_logits(head, emb, HeadMode(), 1), atol=1e-11)

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            HeadMode("aam", 0.7, 30.0)
        with pytest.raises(ValueError):
            HeadMode("cosface")


class TestFreeze:
    def test_frozen_branch_rejects_updates(self):
        anchor = clone_and_freeze(init_branch(SMALL, 0))
        with pytest.raises(FrozenBranchError):
            anchor.apply_update({"extractor.W1": np.ones((4, 5))})
        with pytest.raises(ValueError):
            anchor.extractor.W1[0, 0] = 1.0

    def test_clone_is_independent(self):
        base = init_branch(SMALL, 0)
        before = digest(base)
        anchor = clone_and_freeze(base)
        copy = deep_copy(base)
        copy.apply_update({"extractor.W1": np.ones((4, 5))})
        assert digest(anchor) == before == digest(base)
        assert digest(copy) != before

    def test_flatten_roundtrip(self):
        base = init_branch(SMALL, 3)
        assert digest(unflatten(base, flatten(base))) == digest(base)


class TestCheckpoint:
    @pytest.mark.parametrize("mode", [SOFTMAX, HeadMode("aam", 0.2, 30.0)])
    def test_bit_exact_roundtrip(self, tmp_path, mode):
        branch = init_branch(Arch(), 5)
        branch.apply_update({"extractor.bp": np.full(32, 1 / 3)})
        save_checkpoint(tmp_path / "m.ckpt", Checkpoint(branch, mode, "2", 5))
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert digest(back.branch) == digest(branch)
        assert back.mode == mode and back.stage == "2" and back.seed == 5
        save_checkpoint(tmp_path / "again.ckpt", back)
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x").write_text("hello\n")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x")


def _stage1_grad_error(seed, mode):
    rng = np.random.default_rng(seed)
    branch = init_branch(SMALL, seed)
    x = rng.standard_normal((3, 4, 4))
    y = rng.integers(0, 3, 3)
    _, grads = stage1_objective(branch, x, y, mode)
    f = lambda v: stage1_objective(unflatten(branch, v), x, y, mode)[0]
    return grad_check(f, flatten(branch), flatten_grads(branch, grads))


class TestBackward:
    @pytest.mark.parametrize("seed", range(5))
    def test_softmax(self, seed):
        assert _stage1_grad_error(seed, SOFTMAX) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_aam(self, seed):
        assert _stage1_grad_error(seed, HeadMode("aam", 0.2, 30.0)) < 1e-4

    def test_head_logits_batch_matches_single(self):
        rng = np.random.default_rng(0)
        head = HeadParams(rng.standard_normal((3, 6)), np.zeros(3))
        emb = rng.standard_normal((4, 6))
        labels = np.array([0, 2, 1, 1])
        batch, _ = head_forward(head, emb, HeadMode(), labels)
        for i in range(4):
            np.testing.assert_allclose(batch[i], forward_logits(head, emb[i], HeadMode(), labels[i]),
                                       atol=1e-13)
