"""Embedding extractor g(.) and speaker classification head.

The extractor is a two-layer tanh frame encoder (D -> H -> H) followed by
statistics pooling (per-dimension mean and std over frames) and a linear
projection (2H -> E). The embedding itself is never normalized; cosine is
taken where it is used.

Forward functions work on batches of shape (B, T, D) and return a cache that
the matching backward function consumes.
"""

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from .errors import FrozenBranchError, NonFinite, ShapeMismatch, ZeroVector

POOL_EPS = 1e-8
NORM_EPS = 1e-12

EXTRACTOR_PARAMS = ("W1", "b1", "W2", "b2", "Wp", "bp")
HEAD_PARAMS = ("W", "b")


@dataclass(frozen=True)
class Arch:
    in_dim: int = 16
    hidden_dim: int = 32
    embed_dim: int = 32
    n_classes: int = 32


@dataclass(frozen=True)
class HeadMode:
    """Logit mode. ``kind`` is "softmax" (linear + bias) or "aam"."""

    kind: str = "aam"
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        if self.kind not in ("softmax", "aam"):
            raise ValueError(f"unknown head mode {self.kind!r}")
        if self.kind == "aam":
            if not 0.0 <= self.margin <= 0.5:
                raise ValueError("AAM margin must lie in [0, 0.5]")
            if not self.scale > 0:
                raise ValueError("AAM scale must be positive")


SOFTMAX = HeadMode("softmax", 0.0, 1.0)


@dataclass
class ExtractorParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wp: np.ndarray
    bp: np.ndarray

    @property
    def arch_dims(self):
        return self.W1.shape[0], self.W1.shape[1], self.Wp.shape[1]


@dataclass
class HeadParams:
    W: np.ndarray  # (S, E), one row per speaker
    b: np.ndarray  # (S,), used by softmax mode only


@dataclass
class BranchState:
    extractor: ExtractorParams
    head: HeadParams
    frozen: bool = False

    def named_arrays(self):
        out = {f"extractor.{n}": getattr(self.extractor, n) for n in EXTRACTOR_PARAMS}
        out.update({f"head.{n}": getattr(self.head, n) for n in HEAD_PARAMS})
        return out

    @property
    def arch(self):
        d, h, e = self.extractor.arch_dims
        return Arch(d, h, e, self.head.W.shape[0])

    def set_frozen(self, frozen):
        self.frozen = frozen
        for arr in self.named_arrays().values():
            arr.flags.writeable = not frozen

    def apply_update(self, updates):
        """In-place ``param += delta`` for every entry of ``updates``."""
        if self.frozen:
            raise FrozenBranchError("cannot update a frozen branch")
        arrays = self.named_arrays()
        for name, delta in updates.items():
            arrays[name] += delta


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_extractor(arch, rng):
    d, h, e = arch.in_dim, arch.hidden_dim, arch.embed_dim
    return ExtractorParams(
        W1=_glorot(rng, d, h), b1=np.zeros(h),
        W2=_glorot(rng, h, h), b2=np.zeros(h),
        Wp=_glorot(rng, 2 * h, e), bp=np.zeros(e),
    )


def init_head(arch, rng):
    w = rng.standard_normal((arch.n_classes, arch.embed_dim)) / np.sqrt(arch.embed_dim)
    return HeadParams(W=w, b=np.zeros(arch.n_classes))


def init_branch(arch, seed):
    rng = np.random.default_rng(seed)
    ext = init_extractor(arch, rng)
    return BranchState(ext, init_head(arch, rng))


def deep_copy(branch, frozen=False):
    """Independent copy with writeable arrays, then frozen if requested."""
    arrays = {k: np.array(v, copy=True) for k, v in branch.named_arrays().items()}
    out = branch_from_arrays(arrays)
    out.set_frozen(frozen)
    return out


def clone_and_freeze(branch):
    """Frozen deep copy; the original is untouched."""
    return deep_copy(branch, frozen=True)


def branch_from_arrays(arrays, frozen=False):
    ext = ExtractorParams(**{n: np.asarray(arrays[f"extractor.{n}"], dtype=np.float64)
                             for n in EXTRACTOR_PARAMS})
    head = HeadParams(**{n: np.asarray(arrays[f"head.{n}"], dtype=np.float64)
                         for n in HEAD_PARAMS})
    branch = BranchState(ext, head)
    branch.set_frozen(frozen)
    return branch


def digest(branch):
    """SHA-256 over parameter names, shapes and raw float64 bytes."""
    h = hashlib.sha256()
    for name, arr in branch.named_arrays().items():
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def flatten(branch):
    return np.concatenate([a.ravel() for a in branch.named_arrays().values()])


def unflatten(like, vec):
    arrays = {}
    pos = 0
    for name, arr in like.named_arrays().items():
        arrays[name] = np.asarray(vec[pos:pos + arr.size], dtype=np.float64).reshape(arr.shape).copy()
        pos += arr.size
    if pos != len(vec):
        raise ShapeMismatch("flat vector length does not match the branch")
    return branch_from_arrays(arrays)


def flatten_grads(branch, grads):
    """Flatten a gradient dict in parameter order; missing blocks count as zero."""
    return np.concatenate([np.asarray(grads.get(n, np.zeros_like(a))).ravel()
                           for n, a in branch.named_arrays().items()])


# ---------------------------------------------------------------- extractor

def stats_pool(h):
    """Concatenate per-dimension mean and std over the frame axis.

    ``h`` has shape (B, T, H). Values are sorted along the frame axis before
    summation, which makes the result bitwise independent of frame order.
    Std is the population std with POOL_EPS under the square root.
    """
    t = h.shape[1]
    mu = np.sort(h, axis=1).sum(axis=1) / t
    dev = h - mu[:, None, :]
    var = np.sort(dev * dev, axis=1).sum(axis=1) / t
    sd = np.sqrt(var + POOL_EPS)
    return np.concatenate([mu, sd], axis=1), (mu, sd)


def extractor_forward(ext, x):
    """Embeddings (B, E) for frames ``x`` of shape (B, T, D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    b, t, d = x.shape
    if d != ext.W1.shape[0]:
        raise ShapeMismatch(f"feature dim {d} does not match extractor input dim {ext.W1.shape[0]}")
    if t < 2:
        raise ShapeMismatch("statistics pooling needs at least 2 frames")
    a1 = np.tanh(x @ ext.W1 + ext.b1)
    h = np.tanh(a1 @ ext.W2 + ext.b2)
    pooled, (mu, sd) = stats_pool(h)
    emb = pooled @ ext.Wp + ext.bp
    return emb, (x, a1, h, mu, sd, pooled)


def extractor_backward(ext, cache, demb):
    """Gradients of the extractor parameters given dL/d(embedding)."""
    x, a1, h, mu, sd, pooled = cache
    b, t, d = x.shape
    hid = h.shape[2]
    grads = {"Wp": pooled.T @ demb, "bp": demb.sum(axis=0)}
    dpool = demb @ ext.Wp.T
    dmu, dsd = dpool[:, :hid], dpool[:, hid:]
    dh = (dmu[:, None, :] + (dsd / sd)[:, None, :] * (h - mu[:, None, :])) / t
    dz2 = (dh * (1.0 - h * h)).reshape(b * t, hid)
    grads["W2"] = a1.reshape(b * t, hid).T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ ext.W2.T) * (1.0 - a1.reshape(b * t, hid) ** 2)
    grads["W1"] = x.reshape(b * t, d).T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads


def forward_embed(ext, utt):
    """Embedding vector for a single utterance (or a (T, D) frame matrix)."""
    frames = getattr(utt, "frames", utt)
    emb, _ = extractor_forward(ext, np.asarray(frames)[None])
    return emb[0]


# ---------------------------------------------------------------- head

def head_forward(head, emb, mode, labels=None):
    """Logits (B, S). In AAM mode the margin is applied only where labels are given."""
    if mode.kind == "softmax":
        return emb @ head.W.T + head.b, ("softmax", emb, None)
    en_norm = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(en_norm <= NORM_EPS):
        raise ZeroVector("AAM logits of a (near) zero embedding")
    w_norm = np.linalg.norm(head.W, axis=1, keepdims=True)
    if np.any(w_norm <= NORM_EPS):
        raise ZeroVector("AAM head has a (near) zero class row")
    en = emb / en_norm
    wn = head.W / w_norm
    cos = en @ wn.T
    logits_cos = cos.copy()
    if labels is not None and mode.margin != 0.0:
        rows = np.arange(len(labels))
        c = np.clip(cos[rows, labels], -1.0, 1.0)
        sin = np.sqrt(np.maximum(0.0, 1.0 - c * c))
        logits_cos[rows, labels] = c * np.cos(mode.margin) - sin * np.sin(mode.margin)
    cache = ("aam", emb, (en, en_norm, wn, w_norm, cos, labels))
    return mode.scale * logits_cos, cache


def head_backward(head, mode, cache, dlogits):
    """Returns (head gradient dict, dL/d(embedding))."""
    kind, emb, extra = cache
    if kind == "softmax":
        return {"W": dlogits.T @ emb, "b": dlogits.sum(axis=0)}, dlogits @ head.W
    en, en_norm, wn, w_norm, cos, labels = extra
    dcos = mode.scale * dlogits
    if labels is not None and mode.margin != 0.0:
        rows = np.arange(len(labels))
        c = cos[rows, labels]
        sin = np.sqrt(np.maximum(1e-12, 1.0 - c * c))
        dcos[rows, labels] *= np.cos(mode.margin) + np.sin(mode.margin) * c / sin
    den = dcos @ wn
    dwn = dcos.T @ en
    demb = (den - en * np.sum(en * den, axis=1, keepdims=True)) / en_norm
    dw = (dwn - wn * np.sum(wn * dwn, axis=1, keepdims=True)) / w_norm
    return {"W": dw, "b": np.zeros_like(head.b)}, demb


def forward_logits(head, emb, mode, true_label=None):
    """Logit vector for one embedding; the AAM margin applies only with a label."""
    emb = np.asarray(emb, dtype=np.float64).reshape(1, -1)
    if emb.shape[1] != head.W.shape[1]:
        raise ShapeMismatch("embedding length does not match head")
    labels = None if true_label is None else np.array([true_label])
    logits, _ = head_forward(head, emb, mode, labels)
    return logits[0]


def check_finite(grads, step=None):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFinite(f"non-finite gradient in {name}", step=step)


# ---------------------------------------------------------------- checkpoints
#
# Text format, one item per line:
#   anchorsv-checkpoint <format version>
#   stage <tag>
#   seed <int>
#   frozen <0|1>
#   arch in_dim=.. hidden_dim=.. embed_dim=.. n_classes=..
#   mode kind=.. margin=.. scale=..
#   block <name> <dim> [<dim> ...]
#   <space-separated float reprs, row-major>
#   ... one block/values pair per parameter ...
#   end
# Python float repr round-trips exactly, so load(save(x)) is bit-exact.

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    branch: BranchState
    mode: HeadMode
    stage: str
    seed: int


def _kv(obj):
    return " ".join(f"{f.name}={getattr(obj, f.name)!r}" for f in fields(obj))


def _parse_kv(text, cls):
    types = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for item in text.split():
        key, _, value = item.partition("=")
        if key not in types:
            raise ValueError(f"unknown {cls.__name__} key {key!r}")
        tp = types[key]
        if tp in (int, "int"):
            kwargs[key] = int(value)
        elif tp in (float, "float"):
            kwargs[key] = float(value)
        else:
            kwargs[key] = value.strip("'\"")
    return cls(**kwargs)


def save_checkpoint(path, ckpt):
    lines = [
        f"anchorsv-checkpoint {CHECKPOINT_VERSION}",
        f"stage {ckpt.stage}",
        f"seed {int(ckpt.seed)}",
        f"frozen {int(ckpt.branch.frozen)}",
        f"arch {_kv(ckpt.branch.arch)}",
        f"mode {_kv(ckpt.mode)}",
    ]
    for name, arr in ckpt.branch.named_arrays().items():
        lines.append("block " + " ".join([name, *map(str, arr.shape)]))
        lines.append(" ".join(repr(float(v)) for v in arr.ravel()))
    lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if head[:1] != ["anchorsv-checkpoint"]:
        raise ValueError(f"{path}: not a checkpoint file")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {head[1]}")
    header = {}
    pos = 1
    while not lines[pos].startswith("block "):
        key, _, rest = lines[pos].partition(" ")
        header[key] = rest
        pos += 1
    arch = _parse_kv(header["arch"], Arch)
    mode = _parse_kv(header["mode"], HeadMode)
    arrays = {}
    while lines[pos] != "end":
        parts = lines[pos].split()
        name, shape = parts[1], tuple(int(s) for s in parts[2:])
        values = lines[pos + 1].split()
        arrays[name] = np.array([float(v) for v in values], dtype=np.float64).reshape(shape)
        pos += 2
    branch = branch_from_arrays(arrays, frozen=header["frozen"] == "1")
    if branch.arch != arch:
        raise ShapeMismatch(f"{path}: parameter shapes disagree with header arch {arch}")
    return Checkpoint(branch, mode, header["stage"], int(header["seed"]))
