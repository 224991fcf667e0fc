"""Vector primitives: cosine similarity, the exponential-cosine anchor kernel,
a stable softmax, and a central-difference gradient checker.

Vectors are 1-D float64 numpy arrays, matrices are 2-D float64 arrays.
"""

import numpy as np

from .errors import NonFinite, ZeroVector

EPS_NORM = 1e-12


def as_vec(x):
    return np.asarray(x, dtype=np.float64).reshape(-1)


def cosine(a, b):
    """Cosine similarity of two vectors, clamped to [-1, 1].

    Raises ZeroVector if either norm is <= 1e-12.
    """
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= EPS_NORM or nb <= EPS_NORM:
        raise ZeroVector("cosine of a (near) zero vector")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


def cosine_distance(a, b):
    """1 - cos(a, b), computed as half the squared distance of the unit vectors.

    This form is exactly 0 for vectors with the same direction, where
    ``1 - a.b / (|a||b|)`` can round to a few ulps. Clamped to [0, 2].
    """
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= EPS_NORM or nb <= EPS_NORM:
        raise ZeroVector("cosine of a (near) zero vector")
    diff = a / na - b / nb
    return min(2.0, 0.5 * float(np.dot(diff, diff)))


def anchor_kernel(a, b, m):
    """exp(m * (1 - cos(a, b))); exactly 1 when a and b point the same way."""
    if not m > 0:
        raise ValueError("kernel scale m must be positive")
    return float(np.exp(m * cosine_distance(a, b)))


def row_kernel(a, b, m):
    """Row-wise anchor kernel for (N, E) arrays.

    Returns (kernel, cos, norm_a, norm_b) with ``cos = 1 - distance``.
    """
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na <= EPS_NORM) or np.any(nb <= EPS_NORM):
        raise ZeroVector("cosine of a (near) zero vector")
    diff = a / na[:, None] - b / nb[:, None]
    dist = np.minimum(2.0, 0.5 * np.einsum("ij,ij->i", diff, diff))
    return np.exp(m * dist), 1.0 - dist, na, nb


def row_cosine(a, b):
    """Row-wise cosine for two (N, E) arrays.

    Returns (cos, cos_raw, norm_a, norm_b); ``cos`` is clamped, ``cos_raw``
    is not and is what gradients should be taken through.
    """
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na <= EPS_NORM) or np.any(nb <= EPS_NORM):
        raise ZeroVector("cosine of a (near) zero vector")
    raw = np.einsum("ij,ij->i", a, b) / (na * nb)
    return np.clip(raw, -1.0, 1.0), raw, na, nb


def row_cosine_grad(a, b, cos, na, nb):
    """Partial derivatives of row-wise cos(a, b) with respect to a and b."""
    da = b / (na * nb)[:, None] - cos[:, None] * a / (na**2)[:, None]
    db = a / (na * nb)[:, None] - cos[:, None] * b / (nb**2)[:, None]
    return da, db


def softmax(logits, axis=-1):
    """Numerically stable softmax (max-subtracted)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of empty logits")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def central_diff(f, x, h=1e-5):
    x = as_vec(x).copy()
    out = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFinite(f"function is not finite around coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f, x, analytic_grad, h=1e-5):
    """Maximum relative error between an analytic gradient and central differences.

    The error of coordinate i is |a_i - n_i| / max(1, |a_i|, |n_i|).
    """
    analytic = as_vec(analytic_grad)
    numeric = central_diff(f, x, h)
    if analytic.shape != numeric.shape:
        raise ValueError("gradient length does not match parameter length")
    if not np.all(np.isfinite(analytic)):
        raise NonFinite("analytic gradient has non-finite entries")
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
