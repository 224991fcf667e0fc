import math
from dataclasses import replace

import numpy as np
import pytest

from anchorsv.benchmark import DeskCorpus
from anchorsv.datagen import synth_corpus, split_by_speaker
from anchorsv.errors import NonFinite
from anchorsv.model import Arch, digest, init_branch
from anchorsv.trainer import SGD, TrainConfig, augment, train_joint, train_stage1, train_stage2


@pytest.fixture(scope="module")
def tiny():
    full = synth_corpus(0, 6, 4, 6, 5, 0.3, 0.3, style_spread=0.5)
    train, _ = split_by_speaker(full, 2)
    return train


def tiny_config(**kw):
    base = dict(epochs=3, batch_size=8, hidden_dim=6, embed_dim=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def desk():
    """Reference config on the seed-0 desk corpus, all three modes."""
    train, _, _ = DeskCorpus().build(0)
    cfg = TrainConfig(seed=0)
    base, log1 = train_stage1(cfg, train)
    tuned, log2 = train_stage2(replace(cfg, stage="2"), train, base)
    joint, logj = train_joint(replace(cfg, stage="joint"), train)
    return dict(train=train, cfg=cfg, base=base, tuned=tuned, logs={"1": log1, "2": log2, "joint": logj})


class TestConfig:
    def test_text_roundtrip(self):
        cfg = TrainConfig(seed=3, stage="joint", noise_kinds=("white", "tonal"), stage2_clean_ce=True)
        back = TrainConfig.from_text(cfg.to_text())
        assert back == cfg
        assert back.digest() == cfg.digest()

    def test_comments_and_overrides(self):
        cfg = TrainConfig.from_text("# reference\nepochs = 4  # short\nm = 2.5\n", seed="9")
        assert (cfg.epochs, cfg.m, cfg.seed) == (4, 2.5, 9)

    @pytest.mark.parametrize("text", ["epochs = 0", "m = 0", "snr_min = -20", "stage = 3",
                                      "noise_kinds = pink", "bogus = 1", "epochs"])
    def test_invalid(self, text):
        with pytest.raises(ValueError):
            TrainConfig.from_text(text)

    def test_lr_schedule(self):
        cfg = TrainConfig(learning_rate=0.1, lr_decay_every=2, lr_decay_factor=0.5)
        assert [cfg.lr_at(e) for e in (1, 2, 3, 5)] == [0.1, 0.1, 0.05, 0.025]
        assert TrainConfig().lr_at(30) == TrainConfig().learning_rate


class TestAugment:
    def test_deterministic_and_exact_snr(self, tiny):
        cfg = tiny_config()
        x = tiny.utterances[0].frames
        a = augment(x, cfg, 1, 0, force_noisy=True)
        b = augment(x, cfg, 1, 0, force_noisy=True)
        np.testing.assert_array_equal(a[0], b[0])
        kind, snr = a[1], a[2]
        assert kind in cfg.noise_kinds and 0.0 <= snr <= 20.0
        measured = 10 * math.log10(np.mean(x ** 2) / np.mean((a[0] - x) ** 2))
        assert measured == pytest.approx(snr, abs=1e-9)

    def test_new_draw_each_epoch(self, tiny):
        x = tiny.utterances[0].frames
        cfg = tiny_config()
        assert not np.array_equal(augment(x, cfg, 1, 0, force_noisy=True)[0],
                                  augment(x, cfg, 2, 0, force_noisy=True)[0])

    def test_probability_zero_is_clean(self, tiny):
        x = tiny.utterances[0].frames
        out, kind, _ = augment(x, tiny_config(aug_prob=0.0), 1, 0)
        assert kind is None and out is x


class TestStage1:
    def test_deterministic(self, tiny):
        a, la = train_stage1(tiny_config(), tiny)
        b, lb = train_stage1(tiny_config(), tiny)
        assert digest(a) == digest(b)
        assert [r.loss for r in la.steps] == [r.loss for r in lb.steps]
        c, _ = train_stage1(tiny_config(seed=1), tiny)
        assert digest(c) != digest(a)

    def test_zero_learning_rate(self, tiny):
        cfg = tiny_config(learning_rate=0.0)
        branch, log = train_stage1(cfg, tiny)
        fresh = init_branch(branch.arch, cfg.seed)
        assert digest(branch) == digest(fresh)

    def test_requires_train_split(self, tiny):
        test = replace(tiny, split="test")
        with pytest.raises(ValueError):
            train_stage1(tiny_config(), test)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_reports_step(self, tiny):
        with pytest.raises(NonFinite) as info:
            train_stage1(tiny_config(learning_rate=1e300, grad_clip=0.0, loss_mode="softmax"), tiny)
        assert info.value.step is not None and info.value.step >= 1

    def test_desk_loss_falls_below_ten_percent(self, desk):
        log = desk["logs"]["1"]
        assert log.epochs[-1].loss < 0.1 * log.epochs[0].loss


class TestStage2:
    def test_anchor_untouched_and_base_untouched(self, tiny):
        base, _ = train_stage1(tiny_config(), tiny)
        before = digest(base)
        tuned, log = train_stage2(tiny_config(stage="2"), tiny, base)
        assert digest(base) == before
        assert log.anchor_digest_before == log.anchor_digest_after == before
        assert digest(tuned) != before

    def test_step_zero(self, tiny):
        base, _ = train_stage1(tiny_config(), tiny)
        _, log = train_stage2(tiny_config(stage="2"), tiny, base)
        first = log.steps[0]
        assert first.k_cc == 1.0
        assert first.loss >= 2.0
        assert all(r.k_cn + r.k_cc >= 2.0 for r in log.steps)

    def test_deterministic(self, tiny):
        base, _ = train_stage1(tiny_config(), tiny)
        a, la = train_stage2(tiny_config(stage="2"), tiny, base)
        b, lb = train_stage2(tiny_config(stage="2"), tiny, base)
        assert digest(a) == digest(b)
        assert [r.loss for r in la.steps] == [r.loss for r in lb.steps]

    def test_wrong_stage(self, tiny):
        base, _ = train_stage1(tiny_config(), tiny)
        with pytest.raises(ValueError):
            train_stage2(tiny_config(), tiny, base)

    def test_desk_epoch_mean_k_clean_noise_falls(self, desk):
        log = desk["logs"]["2"]
        assert log.epochs[-1].k_cn < log.epochs[0].k_cn


class TestJoint:
    def test_deterministic(self, tiny):
        a, _ = train_joint(tiny_config(stage="joint"), tiny)
        b, _ = train_joint(tiny_config(stage="joint"), tiny)
        assert digest(a) == digest(b)

    def test_weight_zero_log_is_two_cross_entropies(self, tiny):
        _, log = train_joint(tiny_config(stage="joint", joint_weight=0.0), tiny)
        for r in log.steps:
            assert r.loss == r.ce


class TestSmoke:
    @pytest.mark.parametrize("mode", ["1", "2", "joint"])
    def test_desk_epoch_loss_falls(self, desk, mode):
        log = desk["logs"][mode]
        assert log.epochs[-1].loss < log.epochs[0].loss

    def test_log_csv(self, desk, tmp_path):
        desk["logs"]["2"].write_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,k_cn,k_cc,ce,lr"
        assert len(lines) == 31


class TestSGD:
    def test_momentum_update(self, tiny):
        branch = init_branch(Arch(5, 6, 5, 4), 0)
        w0 = branch.extractor.bp.copy()
        opt = SGD(branch, momentum=0.5)
        g = {"extractor.bp": np.ones(5)}
        opt.step(g, 0.1)
        opt.step(g, 0.1)
        np.testing.assert_allclose(branch.extractor.bp, w0 - 0.1 * 1.0 - 0.1 * 1.5)

    def test_clip(self, tiny):
        branch = init_branch(Arch(5, 6, 5, 4), 0)
        w0 = branch.extractor.bp.copy()
        SGD(branch, momentum=0.0, grad_clip=1.0).step({"extractor.bp": np.full(5, 10.0)}, 1.0)
        assert np.linalg.norm(branch.extractor.bp - w0) == pytest.approx(1.0, rel=1e-12)
