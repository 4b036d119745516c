"""Dense float64 numerics shared by the loss, network and evaluation code.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in row-major
(C) order. Class weight matrices store one class per column.
"""

import numpy as np

EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def as_matrix(a) -> np.ndarray:
    """Return ``a`` as a 2-D, C-contiguous float64 array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def row_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def l2_normalize_rows(m, eps: float = EPS) -> np.ndarray:
    """Divide each row by ``max(norm, eps)``; zero rows stay zero."""
    m = as_matrix(m)
    return m / np.maximum(row_norms(m), eps)[:, None]


def l2_normalize_cols(m, eps: float = EPS) -> np.ndarray:
    m = as_matrix(m)
    return m / np.maximum(row_norms(m.T), eps)[None, :]


def cosine_matrix(x, w) -> np.ndarray:
    """Cosines between the rows of ``x`` (M x D) and the columns of ``w`` (D x N).

    Entries are clamped to [-1, 1].
    """
    x = as_matrix(x)
    w = as_matrix(w)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"cosine_matrix: {x.shape} vs {w.shape}")
    return np.clip(l2_normalize_rows(x) @ l2_normalize_cols(w), -1.0, 1.0)


def logsumexp_rows(logits) -> np.ndarray:
    z = as_matrix(logits)
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def log_softmax_rows(logits) -> np.ndarray:
    z = as_matrix(logits)
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(logits) -> np.ndarray:
    return np.exp(log_softmax_rows(logits))


def normalize_backward(v: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray,
                       eps: float = EPS) -> np.ndarray:
    """Back-propagate through ``u = v / max(|v|, eps)`` row-wise.

    ``v`` holds the raw rows, ``norms`` their L2 norms, ``grad_unit`` the
    gradient with respect to ``u``.
    """
    safe = np.maximum(norms, eps)[:, None]
    u = v / safe
    radial = np.einsum("ij,ij->i", u, grad_unit)[:, None]
    # Below eps the divisor is constant, so only the linear part remains.
    active = (norms >= eps)[:, None]
    return np.where(active, (grad_unit - u * radial) / safe, grad_unit / safe)
