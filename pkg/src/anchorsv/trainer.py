"""Seeded SGD training loops: stage 1, stage 2 (anchor-guided) and the joint ablation.

All randomness flows from ``TrainConfig.seed``: parameter init, batch order
and online noise augmentation. Augmentation draws use per-(epoch, utterance)
seeds in the training noise domain, so they never collide with evaluation
noise and a batch can be prepared independently of the others.
"""

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .datagen import NOISE_KINDS, TRAIN_NOISE, derive_seed, gen_noise, mix_at_snr
from .errors import AnchorNotFrozen, NonFinite
from .losses import joint_objective, stage1_objective, stage2_objective
from .model import (Arch, HeadMode, check_finite, clone_and_freeze, deep_copy, digest,
                    init_branch, init_head)

log = logging.getLogger(__name__)

STAGES = ("1", "2", "joint")
_STAGE_CODE = {"1": 1, "2": 2, "joint": 3}


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    stage: str = "1"
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 5.0
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.5
    m: float = 5.0
    loss_mode: str = "aam"
    aam_margin: float = 0.2
    aam_scale: float = 30.0
    snr_min: float = 0.0
    snr_max: float = 20.0
    noise_kinds: tuple = NOISE_KINDS
    augmentation: str = "additive"  # only additive noise; reverberation is not implemented
    aug_prob: float = 0.5
    noisy_per_clean: int = 1
    stage2_clean_ce: bool = False
    stage2_reinit_head: bool = False
    joint_weight: float = 1.0
    hidden_dim: int = 32
    embed_dim: int = 32

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.noisy_per_clean < 1:
            raise ValueError("epochs, batch_size and noisy_per_clean must be >= 1")
        if not self.m > 0:
            raise ValueError("m must be > 0")
        if not -10.0 <= self.snr_min <= self.snr_max <= 40.0:
            raise ValueError("SNR range must satisfy -10 <= snr_min <= snr_max <= 40")
        if not self.noise_kinds or any(k not in NOISE_KINDS for k in self.noise_kinds):
            raise ValueError(f"noise_kinds must be a non-empty subset of {NOISE_KINDS}")
        if self.augmentation != "additive":
            raise ValueError("augmentation must be 'additive'")
        if not 0.0 <= self.aug_prob <= 1.0:
            raise ValueError("aug_prob must lie in [0, 1]")
        if self.joint_weight < 0:
            raise ValueError("joint_weight must be >= 0")
        self.head_mode  # validates margin/scale

    @property
    def head_mode(self):
        if self.loss_mode == "softmax":
            return HeadMode("softmax", 0.0, 1.0)
        if self.loss_mode == "aam":
            return HeadMode("aam", self.aam_margin, self.aam_scale)
        raise ValueError(f"unknown loss_mode {self.loss_mode!r}")

    def lr_at(self, epoch):
        if self.lr_decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_every)

    # Plain-text config: "key = value" per line, '#' starts a comment,
    # tuples are comma-separated, booleans are true/false.
    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_overrides(self, overrides):
        return replace(self, **_coerce(overrides))

    @classmethod
    def from_text(cls, text, **overrides):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            values[key.strip()] = value.strip()
        values.update(overrides)
        return cls(**_coerce(values))

    @classmethod
    def from_file(cls, path, **overrides):
        with open(path) as fh:
            return cls.from_text(fh.read(), **overrides)


def _coerce(values):
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for key, value in values.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        if not isinstance(value, str):
            out[key] = tuple(value) if types[key] in (tuple, "tuple") else value
            continue
        tp = types[key]
        if tp in (bool, "bool"):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"{key}: expected true/false, got {value!r}")
            out[key] = value.lower() in ("true", "1")
        elif tp in (int, "int"):
            out[key] = int(value)
        elif tp in (float, "float"):
            out[key] = float(value)
        elif tp in (tuple, "tuple"):
            out[key] = tuple(v.strip() for v in value.split(",") if v.strip())
        else:
            out[key] = value
    return out


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    k_cn: float = math.nan
    k_cc: float = math.nan
    ce: float = math.nan
    lr: float = math.nan


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)  # per-step loss terms, same keys as EpochRecord
    anchor_digest_before: str = ""
    anchor_digest_after: str = ""

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "k_cn", "k_cc", "ce", "lr"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.loss), repr(r.k_cn), repr(r.k_cc), repr(r.ce), repr(r.lr)])


class SGD:
    """SGD with heavy-ball momentum, L2 weight decay and global-norm clipping:
    g <- g * min(1, clip/|g|);  v <- mu*v + g + wd*p;  p <- p - lr*v."""

    def __init__(self, branch, momentum, weight_decay=0.0, grad_clip=0.0):
        self.branch = branch
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.velocity = {k: np.zeros_like(v) for k, v in branch.named_arrays().items()}

    def step(self, grads, lr):
        params = self.branch.named_arrays()
        if self.grad_clip > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.grad_clip:
                grads = {k: g * (self.grad_clip / norm) for k, g in grads.items()}
        updates = {}
        for name, g in grads.items():
            v = self.velocity[name]
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * params[name]
            updates[name] = -lr * v
        self.branch.apply_update(updates)


def augment(frames, config, epoch, index, copy=0, force_noisy=False):
    """Online augmentation for one utterance. Returns (frames, kind or None, snr)."""
    stage = _STAGE_CODE[config.stage]
    rng = np.random.default_rng(derive_seed(config.seed, TRAIN_NOISE, stage, epoch, index, copy))
    if not force_noisy and rng.random() >= config.aug_prob:
        return frames, None, math.inf
    kind = config.noise_kinds[int(rng.integers(len(config.noise_kinds)))]
    snr = float(rng.uniform(config.snr_min, config.snr_max))
    noise = gen_noise(int(rng.integers(2**62)), frames.shape[0], frames.shape[1], kind)
    return mix_at_snr(frames, noise, snr), kind, snr


def _arch_for(config, dataset):
    _, dim = dataset.shape
    return Arch(dim, config.hidden_dim, config.embed_dim, dataset.n_speakers)


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_step(loss, grads, step):
    if not np.isfinite(loss):
        raise NonFinite(f"non-finite loss at step {step}", step=step)
    check_finite(grads, step=step)


def _expect_stage(config, stage):
    if config.stage != stage:
        raise ValueError(f"config.stage is {config.stage!r}, expected {stage!r}")


def train_stage1(config, dataset):
    """Train extractor + head on -log p(y|x) with online noise augmentation."""
    _expect_stage(config, "1")
    if dataset.split != "train":
        raise ValueError("stage 1 trains on the train split")
    x_all, y_all = dataset.stacked()
    branch = init_branch(_arch_for(config, dataset), config.seed)
    mode = config.head_mode
    opt = SGD(branch, config.momentum, config.weight_decay, config.grad_clip)
    rng = np.random.default_rng([config.seed, _STAGE_CODE["1"]])
    tlog = TrainLog()
    step = 0
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        xs = np.stack([augment(x_all[i], config, epoch, i)[0] for i in range(len(x_all))])
        losses = []
        for idx in _batches(rng, len(x_all), config.batch_size):
            loss, grads = stage1_objective(branch, xs[idx], y_all[idx], mode)
            _check_step(loss, grads, step)
            opt.step(grads, lr)
            losses.append(loss)
            tlog.steps.append(EpochRecord(epoch, loss, ce=loss, lr=lr))
            step += 1
        mean = float(np.mean(losses))
        tlog.epochs.append(EpochRecord(epoch, mean, ce=mean, lr=lr))
        log.debug("stage1 epoch %d loss %.4f", epoch, mean)
    return branch, tlog


def _pairs(config, x_all, epoch):
    """Parallel clean/noisy tensors: ``noisy_per_clean`` noisy copies per utterance."""
    clean, noisy, src = [], [], []
    for c in range(config.noisy_per_clean):
        for i in range(len(x_all)):
            clean.append(x_all[i])
            noisy.append(augment(x_all[i], config, epoch, i, copy=c, force_noisy=True)[0])
            src.append(i)
    return np.stack(clean), np.stack(noisy), np.array(src)


def train_stage2(config, dataset, base):
    """Anchor-guided fine-tuning of a copy of ``base`` against a frozen copy.

    Returns the trainable branch; the anchor digest before and after training
    is recorded in the log.
    """
    _expect_stage(config, "2")
    if dataset.split != "train":
        raise ValueError("stage 2 trains on the train split")
    x_all, y_all = dataset.stacked()
    anchor = clone_and_freeze(base)
    before = digest(anchor)
    trainable = deep_copy(base)
    if config.stage2_reinit_head:
        trainable.head = init_head(trainable.arch, np.random.default_rng([config.seed, 99]))
    mode = config.head_mode
    opt = SGD(trainable, config.momentum, config.weight_decay, config.grad_clip)
    rng = np.random.default_rng([config.seed, _STAGE_CODE["2"]])
    tlog = TrainLog(anchor_digest_before=before)
    step = 0
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        xc, xn, src = _pairs(config, x_all, epoch)
        recs = []
        for idx in _batches(rng, len(src), config.batch_size):
            terms, grads = stage2_objective(anchor, trainable, xc[idx], xn[idx], y_all[src[idx]],
                                            config.m, mode, clean_ce=config.stage2_clean_ce)
            _check_step(terms.total, grads, step)
            opt.step(grads, lr)
            rec = EpochRecord(epoch, terms.total, terms.k_clean_noise, terms.k_clean_clean,
                              terms.ce_noisy + terms.ce_clean, lr)
            recs.append(rec)
            tlog.steps.append(rec)
            step += 1
        tlog.epochs.append(_mean_record(epoch, recs, lr))
        log.debug("stage2 epoch %d loss %.4f", epoch, tlog.epochs[-1].loss)
    tlog.anchor_digest_after = digest(anchor)
    if tlog.anchor_digest_after != before:
        raise AnchorNotFrozen("anchor parameters changed during stage 2")
    return trainable, tlog


def train_joint(config, dataset):
    """Ablation: one model from random init, classification + kernel on live pairs."""
    _expect_stage(config, "joint")
    if dataset.split != "train":
        raise ValueError("joint training uses the train split")
    x_all, y_all = dataset.stacked()
    branch = init_branch(_arch_for(config, dataset), config.seed)
    mode = config.head_mode
    opt = SGD(branch, config.momentum, config.weight_decay, config.grad_clip)
    rng = np.random.default_rng([config.seed, _STAGE_CODE["joint"]])
    tlog = TrainLog()
    step = 0
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        xc, xn, src = _pairs(config, x_all, epoch)
        recs = []
        for idx in _batches(rng, len(src), config.batch_size):
            terms, grads = joint_objective(branch, xc[idx], xn[idx], y_all[src[idx]],
                                           config.m, config.joint_weight, mode)
            _check_step(terms.total, grads, step)
            opt.step(grads, lr)
            rec = EpochRecord(epoch, terms.total, k_cn=terms.kernel,
                              ce=terms.ce_clean + terms.ce_noisy, lr=lr)
            recs.append(rec)
            tlog.steps.append(rec)
            step += 1
        tlog.epochs.append(_mean_record(epoch, recs, lr))
    return branch, tlog


def _mean_record(epoch, recs, lr):
    return EpochRecord(epoch,
                       float(np.mean([r.loss for r in recs])),
                       float(np.mean([r.k_cn for r in recs])),
                       float(np.mean([r.k_cc for r in recs])),
                       float(np.mean([r.ce for r in recs])),
                       lr)
