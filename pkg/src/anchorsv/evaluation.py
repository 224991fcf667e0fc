"""Trial scoring, equal error rate, embedding geometry and 2-D projection."""

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core_math import EPS_NORM
from .datagen import NOISE_KINDS, corrupt
from .errors import Degenerate, UnknownId
from .model import forward_embed

DEFAULT_SNRS = (0.0, 5.0, 10.0, 15.0, 20.0)


@dataclass(frozen=True)
class ScoredTrial:
    trial: object
    score: float


def embed_dataset(extractor, dataset, workers=1):
    """Embedding per utterance id. One forward pass per utterance, so the
    result does not depend on ``workers``."""
    utts = dataset.utterances
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            embs = list(pool.map(lambda u: forward_embed(extractor, u), utts))
    else:
        embs = [forward_embed(extractor, u) for u in utts]
    return {u.id: e for u, e in zip(utts, embs)}


def score_embeddings(embeddings, trials):
    unit = {}
    for k, e in embeddings.items():
        n = np.linalg.norm(e)
        if n <= EPS_NORM:
            raise Degenerate(f"embedding of {k} has (near) zero norm")
        unit[k] = e / n
    out = []
    for t in trials:
        try:
            a, b = unit[t.utt_a], unit[t.utt_b]
        except KeyError as exc:
            raise UnknownId(f"trial references unknown utterance {exc.args[0]!r}") from None
        out.append(ScoredTrial(t, min(1.0, max(-1.0, float(a @ b)))))
    return out


def score_trials(extractor, dataset, trials, workers=1):
    """Cosine score for every trial; embeddings are computed once per utterance."""
    needed = {t.utt_a for t in trials} | {t.utt_b for t in trials}
    known = {u.id for u in dataset.utterances}
    missing = sorted(needed - known)
    if missing:
        raise UnknownId(f"trial references unknown utterance {missing[0]!r}")
    return score_embeddings(embed_dataset(extractor, dataset, workers), trials)


def _split_scores(scored):
    tar = np.array([s.score for s in scored if s.trial.target], dtype=np.float64)
    non = np.array([s.score for s in scored if not s.trial.target], dtype=np.float64)
    if tar.size == 0 or non.size == 0:
        raise Degenerate("EER needs at least one target and one nontarget trial")
    return tar, non


def _crossing(far, frr):
    """EER from FAR/FRR sampled on increasing thresholds.

    FAR is non-increasing and FRR non-decreasing. An exact FAR == FRR point
    returns the common value; otherwise the two segments between the last
    FAR > FRR point and the first FAR < FRR point are intersected.
    """
    diff = far - frr
    exact = np.flatnonzero(diff == 0)
    if exact.size:
        return float(far[exact[0]])
    k = int(np.flatnonzero(diff > 0)[-1])
    d0, d1 = diff[k], diff[k + 1]
    alpha = d0 / (d0 - d1)
    return float(far[k] + alpha * (far[k + 1] - far[k]))


def eer_from_scores(target_scores, nontarget_scores):
    """EER via a sorted sweep over all distinct scores plus +inf.

    FAR(t) = P(nontarget >= t), FRR(t) = P(target < t). Between adjacent
    thresholds the crossing is linearly interpolated.
    """
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tar.size == 0 or non.size == 0:
        raise Degenerate("EER needs at least one target and one nontarget trial")
    thr = np.unique(np.concatenate([tar, non]))
    far = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    frr = np.searchsorted(tar, thr, side="left") / tar.size
    far = np.append(far, 0.0)
    frr = np.append(frr, 1.0)
    return _crossing(far, frr)


def compute_eer(scored):
    return eer_from_scores(*_split_scores(scored))


def eer_oracle(scored, chunk=512):
    """Brute-force EER: FAR/FRR counted directly at -inf, every midpoint
    between consecutive distinct scores, and +inf."""
    tar, non = _split_scores(scored)
    distinct = np.unique(np.concatenate([tar, non]))
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    thr = np.concatenate([[-np.inf], mids, [np.inf]])
    far = np.empty(thr.size)
    frr = np.empty(thr.size)
    for lo in range(0, thr.size, chunk):
        t = thr[lo:lo + chunk, None]
        far[lo:lo + chunk] = (non[None, :] >= t).sum(axis=1) / non.size
        frr[lo:lo + chunk] = (tar[None, :] < t).sum(axis=1) / tar.size
    # Enumerate every segment and keep the one where FAR - FRR changes sign.
    for k in range(thr.size):
        if far[k] == frr[k]:
            return float(far[k])
        if k + 1 < thr.size and far[k] > frr[k] and far[k + 1] < frr[k + 1]:
            x0, x1 = far[k] - frr[k], far[k + 1] - frr[k + 1]
            a = x0 / (x0 - x1)
            return float(far[k] + a * (far[k + 1] - far[k]))
    raise AssertionError("FAR/FRR curves never cross")


@dataclass
class GeometryStats:
    inter_var: float
    intra_var: float
    ratio: float

    def to_dict(self):
        return {"inter_var": self.inter_var, "intra_var": self.intra_var, "ratio": self.ratio}


def geometry_stats(embeddings, labels):
    """Within/between-speaker scatter of a set of embeddings.

    intra = mean over embeddings of |e - c_spk|^2
    inter = sum over speakers of (n_s / N) |c_s - c|^2
    so that intra + inter equals the total scatter about the global mean.
    ratio = inter / intra, inf when intra is 0 and inter > 0.
    """
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels)
    if e.shape[0] != labels.shape[0]:
        raise ValueError("one label per embedding required")
    speakers, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if speakers.size < 2:
        raise Degenerate("geometry statistics need at least two speakers")
    centroids = np.zeros((speakers.size, e.shape[1]))
    np.add.at(centroids, inverse, e)
    centroids /= counts[:, None]
    glob = e.mean(axis=0)
    intra = float(np.mean(np.sum((e - centroids[inverse]) ** 2, axis=1)))
    inter = float(np.sum(counts / e.shape[0] * np.sum((centroids - glob) ** 2, axis=1)))
    if intra > 0:
        ratio = inter / intra
    else:
        ratio = math.inf if inter > 0 else math.nan
    return GeometryStats(inter, intra, ratio)


def total_scatter(embeddings):
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    return float(np.mean(np.sum((e - e.mean(axis=0)) ** 2, axis=1)))


@dataclass
class Projection:
    points: np.ndarray           # (N, 2)
    components: np.ndarray       # (2, E), rows are principal directions
    explained: np.ndarray        # (2,) variance along each direction
    variance_share: float        # explained.sum() / total variance


def project_2d(embeddings):
    """PCA onto the top two principal directions.

    Sign convention: the largest-magnitude coordinate of each direction is
    positive (first such coordinate on ties).
    """
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if e.shape[0] < 3 or e.shape[1] < 2:
        raise Degenerate("projection needs at least 3 embeddings of dimension >= 2")
    centered = e - e.mean(axis=0)
    if not np.any(centered):
        raise Degenerate("all embeddings are identical")
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    var = sing ** 2 / e.shape[0]
    explained = np.zeros(2)
    explained[:min(2, var.size)] = var[:2]
    total = var.sum()
    return Projection(centered @ comps.T, comps, explained, float(explained.sum() / total))


def l2_normalize(embs):
    embs = np.atleast_2d(embs)
    return embs / np.linalg.norm(embs, axis=1, keepdims=True)


@dataclass
class EvalReport:
    clean_eer: float
    cells: dict = field(default_factory=dict)          # "kind@snr" -> EER
    geometry: dict = field(default_factory=dict)       # condition tag -> GeometryStats
    snrs: tuple = DEFAULT_SNRS
    noise_kinds: tuple = NOISE_KINDS

    def kind_average(self, kind):
        return float(np.mean([self.cells[_cell(kind, s)] for s in self.snrs]))

    @property
    def noisy_average(self):
        return float(np.mean([self.cells[_cell(k, s)] for k in self.noise_kinds for s in self.snrs]))

    def to_dict(self):
        return {
            "clean_eer": self.clean_eer,
            "cells": dict(self.cells),
            "kind_averages": {k: self.kind_average(k) for k in self.noise_kinds},
            "noisy_average": self.noisy_average,
            "geometry": {k: v.to_dict() for k, v in self.geometry.items()},
            "snrs": list(self.snrs),
            "noise_kinds": list(self.noise_kinds),
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["noise_kind", "snr_db", "eer", "inter_var", "intra_var", "ratio"])
            rows = [("clean", "inf", self.clean_eer, "clean")]
            rows += [(k, f"{s:g}", self.cells[_cell(k, s)], _cell(k, s))
                     for k in self.noise_kinds for s in self.snrs]
            for kind, snr, eer, tag in rows:
                g = self.geometry.get(tag)
                geo = [repr(g.inter_var), repr(g.intra_var), repr(g.ratio)] if g else ["", "", ""]
                w.writerow([kind, snr, repr(eer), *geo])
            for k in self.noise_kinds:
                w.writerow([k, "avg", repr(self.kind_average(k)), "", "", ""])
            w.writerow(["all", "avg", repr(self.noisy_average), "", "", ""])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _cell(kind, snr):
    return f"{kind}@{snr:g}"


def default_geometry_condition(snrs, noise_kinds):
    """First noise kind at the median SNR of the grid."""
    grid = sorted(snrs)
    return noise_kinds[0], grid[len(grid) // 2]


def condition_embeddings(extractor, dataset, kind, snr, seed, workers=1):
    """Embeddings of the test set under one condition (kind None = clean)."""
    data = dataset if kind is None else corrupt(dataset, kind, snr, seed)
    return embed_dataset(extractor, data, workers)


def full_eval(extractor, test_dataset, trials, snr_grid=DEFAULT_SNRS, noise_kinds=NOISE_KINDS,
              seed=0, geometry_condition=None, workers=1):
    """EER for clean and every (kind, snr) cell on the same trial list, plus
    geometry statistics (on L2-normalized embeddings) for clean and one noisy
    condition. Evaluation noise uses the held-out seed domain."""
    snr_grid = tuple(float(s) for s in snr_grid)
    noise_kinds = tuple(noise_kinds)
    if not snr_grid:
        raise ValueError("snr grid must be non-empty")
    labels_by_id = {u.id: u.speaker for u in test_dataset.utterances}
    ids = [u.id for u in test_dataset.utterances]
    labels = [labels_by_id[i] for i in ids]

    clean = embed_dataset(extractor, test_dataset, workers)
    report = EvalReport(compute_eer(score_embeddings(clean, trials)), snrs=snr_grid,
                        noise_kinds=noise_kinds)
    report.geometry["clean"] = geometry_stats(l2_normalize(np.stack([clean[i] for i in ids])), labels)
    geo_kind, geo_snr = geometry_condition or default_geometry_condition(snr_grid, noise_kinds)
    for kind in noise_kinds:
        for snr in snr_grid:
            embs = condition_embeddings(extractor, test_dataset, kind, snr, seed, workers)
            report.cells[_cell(kind, snr)] = compute_eer(score_embeddings(embs, trials))
            if kind == geo_kind and snr == geo_snr:
                report.geometry[_cell(kind, snr)] = geometry_stats(
                    l2_normalize(np.stack([embs[i] for i in ids])), labels)
    return report
