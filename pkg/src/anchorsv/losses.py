"""Training objectives with analytic gradients.

* stage 1: speaker cross-entropy, -log p(y|x), softmax or AAM logits
* stage 2: K(clean, noisy) + K(clean, clean) - log p(y|noisy), where the
  first argument of every kernel comes from the frozen anchor branch and
  K(a, b) = exp(m * (1 - cos(a, b)))
* joint: CE(clean) + CE(noisy) + weight * K(g(clean), g(noisy)) with a single
  live model feeding both kernel arguments

Every batched term is an arithmetic mean over the batch. The ``*_objective``
functions return the loss and a gradient dict keyed like
``BranchState.named_arrays()``.
"""

from dataclasses import dataclass

import numpy as np

from .core_math import log_softmax, row_cosine_grad, row_kernel, softmax
from .errors import AnchorNotFrozen
from .model import extractor_backward, extractor_forward, head_backward, head_forward


def _batch(x):
    frames = getattr(x, "frames", x)
    frames = np.asarray(frames, dtype=np.float64)
    return frames[None] if frames.ndim == 2 else frames


def _labels(label):
    return np.atleast_1d(np.asarray(label, dtype=np.int64))


def cross_entropy(logits, labels):
    """Mean -log softmax(logits)[label] and its gradient wrt the logits."""
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -np.mean(log_softmax(logits)[rows, labels])
    dlogits = softmax(logits)
    dlogits[rows, labels] -= 1.0
    return float(loss), dlogits / n


def _prefixed(prefix, grads):
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def _accumulate(total, grads):
    for k, v in grads.items():
        total[k] = total[k] + v if k in total else v
    return total


# ---------------------------------------------------------------- stage 1

def loss_stage1(head, emb, label, mode):
    """Cross-entropy of the (AAM-adjusted) logits at ``label``; batch mean."""
    emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    labels = _labels(label)
    if np.any(labels >= head.W.shape[0]) or np.any(labels < 0):
        raise ValueError("label outside the head's class range")
    logits, _ = head_forward(head, emb, mode, labels)
    return cross_entropy(logits, labels)[0]


def _ce_through_head(head, emb, labels, mode):
    logits, cache = head_forward(head, emb, mode, labels)
    loss, dlogits = cross_entropy(logits, labels)
    dhead, demb = head_backward(head, mode, cache, dlogits)
    return loss, _prefixed("head", dhead), demb


def stage1_objective(branch, x, labels, mode):
    x = _batch(x)
    labels = _labels(labels)
    emb, cache = extractor_forward(branch.extractor, x)
    loss, grads, demb = _ce_through_head(branch.head, emb, labels, mode)
    grads.update(_prefixed("extractor", extractor_backward(branch.extractor, cache, demb)))
    return loss, grads


# ---------------------------------------------------------------- stage 2

@dataclass
class Stage2Terms:
    k_clean_noise: float
    k_clean_clean: float
    ce_noisy: float
    ce_clean: float = 0.0

    @property
    def total(self):
        return self.k_clean_noise + self.k_clean_clean + self.ce_noisy + self.ce_clean


def _kernel_term(anchor_emb, live_emb, m):
    """Mean kernel and its gradient wrt the live (second) argument."""
    k, cos, na, nb = row_kernel(anchor_emb, live_emb, m)
    _, dcos_db = row_cosine_grad(anchor_emb, live_emb, cos, na, nb)
    n = len(k)
    dlive = -(m * k / n)[:, None] * dcos_db
    return float(np.mean(k)), dlive


def stage2_objective(anchor, trainable, clean, noisy, labels, m, mode, clean_ce=False):
    """Stage-2 loss terms and gradients for the trainable branch only.

    ``clean`` and ``noisy`` are parallel batches derived from the same
    utterances. The anchor branch is only read.
    """
    if not anchor.frozen:
        raise AnchorNotFrozen("the anchor branch must be frozen in stage 2")
    if not m > 0:
        raise ValueError("kernel scale m must be positive")
    xc, xn = _batch(clean), _batch(noisy)
    if xc.shape != xn.shape:
        raise ValueError("clean and noisy batches must have the same shape")
    labels = _labels(labels)

    anchor_emb, _ = extractor_forward(anchor.extractor, xc)
    emb_n, cache_n = extractor_forward(trainable.extractor, xn)
    emb_c, cache_c = extractor_forward(trainable.extractor, xc)

    k_cn, demb_n = _kernel_term(anchor_emb, emb_n, m)
    k_cc, demb_c = _kernel_term(anchor_emb, emb_c, m)
    ce_n, grads, dce_n = _ce_through_head(trainable.head, emb_n, labels, mode)
    demb_n = demb_n + dce_n
    ce_c = 0.0
    if clean_ce:
        ce_c, g_head_c, dce_c = _ce_through_head(trainable.head, emb_c, labels, mode)
        _accumulate(grads, g_head_c)
        demb_c = demb_c + dce_c

    ext = trainable.extractor
    _accumulate(grads, _prefixed("extractor", extractor_backward(ext, cache_n, demb_n)))
    _accumulate(grads, _prefixed("extractor", extractor_backward(ext, cache_c, demb_c)))
    return Stage2Terms(k_cn, k_cc, ce_n, ce_c), grads


def loss_stage2(anchor, trainable, clean, noisy, label, m, mode, clean_ce=False):
    """Stage-2 loss terms (values only) for one utterance pair or a batch."""
    terms, _ = stage2_objective(anchor, trainable, clean, noisy, label, m, mode, clean_ce)
    return terms


# ---------------------------------------------------------------- joint ablation

@dataclass
class JointTerms:
    ce_clean: float
    ce_noisy: float
    kernel: float
    weight: float

    @property
    def total(self):
        return self.ce_clean + self.ce_noisy + self.weight * self.kernel


def joint_objective(model, clean, noisy, labels, m, weight, mode):
    """Joint loss where both kernel arguments come from the same live model."""
    if weight < 0:
        raise ValueError("joint weight must be >= 0")
    xc, xn = _batch(clean), _batch(noisy)
    labels = _labels(labels)
    emb_c, cache_c = extractor_forward(model.extractor, xc)
    emb_n, cache_n = extractor_forward(model.extractor, xn)

    ce_c, grads, demb_c = _ce_through_head(model.head, emb_c, labels, mode)
    ce_n, g_head_n, demb_n = _ce_through_head(model.head, emb_n, labels, mode)
    _accumulate(grads, g_head_n)

    k, cos, na, nb = row_kernel(emb_c, emb_n, m)
    if weight != 0.0:
        dcos_dc, dcos_dn = row_cosine_grad(emb_c, emb_n, cos, na, nb)
        coef = -(weight * m * k / len(k))[:, None]
        demb_c = demb_c + coef * dcos_dc
        demb_n = demb_n + coef * dcos_dn

    ext = model.extractor
    _accumulate(grads, _prefixed("extractor", extractor_backward(ext, cache_c, demb_c)))
    _accumulate(grads, _prefixed("extractor", extractor_backward(ext, cache_n, demb_n)))
    return JointTerms(ce_c, ce_n, float(np.mean(k)), float(weight)), grads


def loss_joint(model, clean, noisy, label, m, weight, mode):
    terms, _ = joint_objective(model, clean, noisy, label, m, weight, mode)
    return terms.total
