"""Synthetic speaker corpus, feature-space noise, exact-SNR mixing and trial lists.

Each speaker owns a unit-norm prototype vector. An utterance is a (T, D)
frame matrix built from the prototype, a per-utterance offset and per-frame
jitter. Noise lives in the same (T, D) feature space and is mixed at an
exact power ratio.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import Infeasible, ShapeMismatch, ZeroPower

NOISE_KINDS = ("white", "babble", "tonal")
BABBLE_TALKERS = 3
TONAL_HARMONICS = (1, 2)

# Seed domains. Training augmentation and evaluation noise never share a seed:
# the domain is stored in the lowest bit of every derived noise seed.
TRAIN_NOISE = 0
EVAL_NOISE = 1


def derive_seed(base, domain, *keys):
    """Derive a 63-bit noise seed from a base seed and integer keys.

    The lowest bit equals ``domain``, so seeds from different domains are
    disjoint by construction.
    """
    if domain not in (TRAIN_NOISE, EVAL_NOISE):
        raise ValueError(f"unknown seed domain {domain!r}")
    words = np.random.SeedSequence([int(base), int(domain), *map(int, keys)]).generate_state(2)
    value = (int(words[0]) << 30) ^ int(words[1])
    return ((value & ((1 << 62) - 1)) << 1) | domain


@dataclass(frozen=True)
class Condition:
    kind: str = "clean"
    snr_db: float = math.inf

    @property
    def is_clean(self):
        return self.kind == "clean"

    @property
    def tag(self):
        if self.is_clean:
            return "clean"
        return f"{self.kind}@{self.snr_db:g}"

    @classmethod
    def parse(cls, tag):
        if tag == "clean":
            return CLEAN
        kind, _, snr = tag.partition("@")
        if kind not in NOISE_KINDS or not snr:
            raise ValueError(f"bad condition tag {tag!r}")
        return cls(kind, float(snr))


CLEAN = Condition()


@dataclass
class Utterance:
    id: str
    speaker: int
    frames: np.ndarray
    condition: Condition = CLEAN

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 2:
            raise ShapeMismatch(f"utterance {self.id} needs a (T>=2, D) frame matrix")


@dataclass
class Dataset:
    utterances: list
    n_speakers: int
    split: str = "train"
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [u.id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise ValueError("utterance ids must be unique")
        for u in self.utterances:
            if not 0 <= u.speaker < self.n_speakers:
                raise ValueError(f"speaker label {u.speaker} outside [0, {self.n_speakers})")

    def __len__(self):
        return len(self.utterances)

    def __getitem__(self, utt_id):
        if self._index is None:
            self._index = {u.id: u for u in self.utterances}
        return self._index[utt_id]

    @property
    def speakers(self):
        return sorted({u.speaker for u in self.utterances})

    @property
    def shape(self):
        return self.utterances[0].frames.shape

    def stacked(self):
        """(N, T, D) frame tensor and (N,) integer labels."""
        x = np.stack([u.frames for u in self.utterances])
        y = np.array([u.speaker for u in self.utterances], dtype=np.int64)
        return x, y


@dataclass(frozen=True)
class Trial:
    utt_a: str
    utt_b: str
    target: bool


def synth_corpus(seed, n_speakers, utts_per_speaker, frames, dim,
                 intra_spread, channel_spread, split="train", style_spread=0.0):
    """Generate a synthetic corpus with ``n_speakers`` speakers.

    Frames of utterance u of speaker s are ``p_s + o_u + j_t`` where ``p_s``
    is a unit-norm prototype, ``o_u`` an offset with per-entry std
    ``intra_spread / sqrt(dim)`` and ``j_t`` per-frame jitter with per-entry
    std ``channel_spread / sqrt(dim)``.
    """
    for name, value in (("n_speakers", n_speakers), ("utts_per_speaker", utts_per_speaker),
                        ("frames", frames), ("dim", dim)):
        if value < 1:
            raise ValueError(f"{name} must be >= 1")
    if frames < 2:
        raise ValueError("frames must be >= 2 for statistics pooling")
    if intra_spread < 0 or channel_spread < 0 or style_spread < 0:
        raise ValueError("spreads must be >= 0")
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((n_speakers, dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    if style_spread > 0:
        styles = np.exp(style_spread * rng.standard_normal((n_speakers, dim)))
    else:
        styles = np.ones((n_speakers, dim))
    scale_o = intra_spread / math.sqrt(dim)
    scale_j = channel_spread / math.sqrt(dim)
    utts = []
    for s in range(n_speakers):
        for u in range(utts_per_speaker):
            offset = rng.standard_normal(dim) * scale_o
            jitter = rng.standard_normal((frames, dim)) * (scale_j * styles[s])
            x = (protos[s] + offset)[None, :] + jitter
            utts.append(Utterance(f"spk{s:03d}-utt{u:03d}", s, x))
    return Dataset(utts, n_speakers, split)


def split_by_speaker(dataset, n_test_speakers):
    """Split off the last ``n_test_speakers`` speakers as a disjoint test set.

    Labels stay global: train holds [0, S - n_test), test holds the rest.
    """
    cut = dataset.n_speakers - n_test_speakers
    if not 0 < cut < dataset.n_speakers:
        raise ValueError("need at least one train and one test speaker")
    train = [u for u in dataset.utterances if u.speaker < cut]
    test = [u for u in dataset.utterances if u.speaker >= cut]
    return Dataset(train, cut, "train"), Dataset(test, dataset.n_speakers, "test")


def gen_noise(seed, frames, dim, kind):
    """Zero-mean (in expectation) feature-space noise of shape (frames, dim).

    white   iid standard normal entries
    babble  average of BABBLE_TALKERS random unit prototypes, each with a
            bursty per-frame loudness envelope (Exp(1), mean 1), plus
            per-frame jitter (speech-like interference)
    tonal   each row is a sampled sinusoid over the feature axis at a fixed
            low harmonic (TONAL_HARMONICS cycles per row), with a drifting
            phase and a slow amplitude envelope
    """
    if frames < 1 or dim < 1:
        raise ValueError("frames and dim must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "white":
        return rng.standard_normal((frames, dim))
    if kind == "babble":
        talkers = rng.standard_normal((BABBLE_TALKERS, dim))
        talkers /= np.linalg.norm(talkers, axis=1, keepdims=True)
        envelope = rng.exponential(1.0, size=(frames, BABBLE_TALKERS))
        jitter = rng.standard_normal((frames, dim)) * (0.3 / math.sqrt(dim))
        return envelope @ talkers / BABBLE_TALKERS + jitter
    if kind == "tonal":
        k = TONAL_HARMONICS[int(rng.integers(len(TONAL_HARMONICS)))]
        phase0 = rng.uniform(0.0, 2.0 * math.pi)
        rate = rng.uniform(0.05, 0.5)
        env_freq = rng.uniform(0.01, 0.1)
        t = np.arange(frames)
        phase = phase0 + rate * t
        amp = 1.0 + 0.5 * np.sin(2.0 * math.pi * env_freq * t)
        j = np.arange(dim)
        return amp[:, None] * np.sin(2.0 * math.pi * k * j[None, :] / dim + phase[:, None])
    raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")


def power(x):
    """Mean squared entry."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def snr_gain(signal, noise, snr_db):
    """Gain g such that power(signal) / power(g * noise) = 10^(snr_db / 10)."""
    ps = power(signal)
    pn = power(noise)
    if ps == 0.0 or pn == 0.0:
        raise ZeroPower("signal and noise must both have nonzero power")
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return math.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(signal, noise, snr_db):
    """Return ``signal + g * noise`` at exactly ``snr_db`` dB. +inf means no noise."""
    signal = np.asarray(signal, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if signal.shape != noise.shape:
        raise ShapeMismatch(f"signal {signal.shape} vs noise {noise.shape}")
    g = snr_gain(signal, noise, snr_db)
    if g == 0.0:
        return signal.copy()
    return signal + g * noise


def noisy_copy(utt, kind, snr_db, seed):
    t, d = utt.frames.shape
    noise = gen_noise(seed, t, d, kind)
    cond = Condition(kind, float(snr_db))
    if math.isinf(snr_db):
        return Utterance(utt.id, utt.speaker, utt.frames.copy(), cond)
    return Utterance(f"{utt.id}~{cond.tag}", utt.speaker, mix_at_snr(utt.frames, noise, snr_db), cond)


def corrupt(dataset, kind, snr_db, base_seed, domain=EVAL_NOISE):
    """Noisy copy of every utterance, each with its own derived noise seed.

    Utterance ids are kept so a trial list of the clean set applies unchanged.
    """
    kind_idx = NOISE_KINDS.index(kind)
    out = []
    for i, u in enumerate(dataset.utterances):
        seed = derive_seed(base_seed, domain, kind_idx, i)
        nu = noisy_copy(u, kind, snr_db, seed)
        out.append(Utterance(u.id, u.speaker, nu.frames, nu.condition))
    return Dataset(out, dataset.n_speakers, dataset.split)


def _pairs(labels):
    i, j = np.triu_indices(len(labels), k=1)
    same = labels[i] == labels[j]
    return (i[same], j[same]), (i[~same], j[~same])


def make_trials(dataset, seed, n_target, n_nontarget):
    """Sample distinct unordered target and nontarget pairs."""
    labels = np.array([u.speaker for u in dataset.utterances])
    if len(np.unique(labels)) < 2 and n_nontarget > 0:
        raise Infeasible("nontarget trials need at least two speakers")
    (ti, tj), (ni, nj) = _pairs(labels)
    if n_target > len(ti):
        raise Infeasible(f"requested {n_target} target pairs, only {len(ti)} exist")
    if n_nontarget > len(ni):
        raise Infeasible(f"requested {n_nontarget} nontarget pairs, only {len(ni)} exist")
    rng = np.random.default_rng(seed)
    pick_t = np.sort(rng.choice(len(ti), size=n_target, replace=False))
    pick_n = np.sort(rng.choice(len(ni), size=n_nontarget, replace=False))
    ids = [u.id for u in dataset.utterances]
    trials = [Trial(ids[ti[k]], ids[tj[k]], True) for k in pick_t]
    trials += [Trial(ids[ni[k]], ids[nj[k]], False) for k in pick_n]
    order = rng.permutation(len(trials))
    return [trials[k] for k in order]


def write_trials(path, trials):
    with open(path, "w") as fh:
        for t in trials:
            fh.write(f"{int(t.target)} {t.utt_a} {t.utt_b}\n")


def read_trials(path):
    trials = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected '1|0 <utt_a> <utt_b>'")
            trials.append(Trial(parts[1], parts[2], parts[0] == "1"))
    return trials


# On-disk corpus layout (one directory per split):
#   dataset.json     {"split", "n_speakers", "frames", "dim", "format_version"}
#   utterances.tsv   id, speaker, condition, storage, data
#                    storage "path": data is a .npy file relative to the directory
#                    storage "inline": data is comma-separated float reprs, row-major
#   feats/<id>.npy   frame matrix for "path" records
CORPUS_FORMAT_VERSION = 1


def export_dataset(dataset, directory, inline=False):
    os.makedirs(directory, exist_ok=True)
    t, d = dataset.shape
    meta = {"format_version": CORPUS_FORMAT_VERSION, "split": dataset.split,
            "n_speakers": dataset.n_speakers, "frames": t, "dim": d}
    with open(os.path.join(directory, "dataset.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not inline:
        os.makedirs(os.path.join(directory, "feats"), exist_ok=True)
    with open(os.path.join(directory, "utterances.tsv"), "w") as fh:
        fh.write("id\tspeaker\tcondition\tstorage\tdata\n")
        for u in dataset.utterances:
            if inline:
                storage, data = "inline", ",".join(repr(float(v)) for v in u.frames.ravel())
            else:
                storage, data = "path", f"feats/{u.id}.npy"
                np.save(os.path.join(directory, data), u.frames, allow_pickle=False)
            fh.write(f"{u.id}\t{u.speaker}\t{u.condition.tag}\t{storage}\t{data}\n")


def load_dataset(directory):
    with open(os.path.join(directory, "dataset.json")) as fh:
        meta = json.load(fh)
    shape = (meta["frames"], meta["dim"])
    utts = []
    with open(os.path.join(directory, "utterances.tsv")) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["id", "speaker", "condition", "storage", "data"]:
            raise ValueError(f"unexpected utterances.tsv header {header}")
        for line in fh:
            uid, spk, cond, storage, data = line.rstrip("\n").split("\t")
            if storage == "path":
                frames = np.load(os.path.join(directory, data), allow_pickle=False)
            elif storage == "inline":
                frames = np.array([float(v) for v in data.split(",")]).reshape(shape)
            else:
                raise ValueError(f"unknown storage flag {storage!r}")
            if frames.shape != shape:
                raise ShapeMismatch(f"{uid}: frames {frames.shape}, expected {shape}")
            utts.append(Utterance(uid, int(spk), frames, Condition.parse(cond)))
    return Dataset(utts, meta["n_speakers"], meta["split"])
