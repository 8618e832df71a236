"""Dense float64 linear algebra: products, one-sided Jacobi SVD, seeded init.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 80


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; streams are platform independent."""
    return np.random.Generator(np.random.Philox(int(seed)))


def kaiming_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Kaiming-normal matrix with fan_in = ``cols`` (the input dimension)."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"kaiming_init needs positive dims, got ({rows}, {cols})")
    return rng.standard_normal((rows, cols)) * np.sqrt(2.0 / cols)


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # m x k
    sigma: np.ndarray  # k, descending
    v: np.ndarray  # n x k

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Each step pairs every column with exactly one other, so the
    # rotations within a step commute and can be applied at once.
    players = list(range(n + (n % 2)))
    size = len(players)
    steps = []
    for _ in range(size - 1):
        p, q = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        steps.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return steps


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not in ``keep`` with orthonormal fill."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if keep[j]]
    out = u.copy()
    candidates = iter(np.eye(m))
    for j in range(k):
        if keep[j]:
            continue
        while True:
            e = next(candidates)
            w = e.copy()
            for _ in range(2):
                for b in basis:
                    w -= (b @ w) * b
            nrm = np.linalg.norm(w)
            if nrm > 0.5:
                w /= nrm
                break
        basis.append(w)
        out[:, j] = w
    return out


def svd(w) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Sweeps continue until every column pair has relative inner product at
    most ``SVD_TOL``. Each column of ``u`` is sign-normalised so that its
    largest-magnitude entry is non-negative.
    """
    w = as_matrix(w, "svd input")
    transposed = w.shape[0] < w.shape[1]
    a = (w.T if transposed else w).copy()
    m, n = a.shape
    v = np.eye(n)
    steps = _round_robin(n)
    off = 0.0
    for _ in range(SVD_MAX_SWEEPS):
        off = 0.0
        rotated = False
        for p, q in steps:
            if p.size == 0:
                continue
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            if rel.size:
                off = max(off, float(rel.max()))
            act = rel > SVD_TOL
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p], a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        resid = np.abs(a.T @ a - np.diag(np.einsum("ij,ij->j", a, a))).max()
        raise NumericError(
            f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps "
            f"(relative off-diagonal {off:.3e}, residual {resid:.3e})"
        )

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]
    smax = sigma[0] if sigma.size else 0.0
    keep = sigma > max(m, n) * np.finfo(np.float64).eps * smax
    u = np.zeros_like(a)
    u[:, keep] = a[:, keep] / sigma[keep]
    if not keep.all():
        u = _complete_basis(u, keep)

    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u *= signs
    v *= signs
    if transposed:
        # W^T = U S V^T  =>  W = V S U^T; re-apply the sign rule to the new U.
        u, v = v, u
        idx = np.argmax(np.abs(u), axis=0)
        signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
        u *= signs
        v *= signs
    return SvdResult(u=u, sigma=sigma, v=v)


def write_matrix_text(m, path_or_file) -> None:
    """Write "rows cols" then one line of space-separated reals per row."""
    m = as_matrix(m)
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in m]
    text = "\n".join(lines) + "\n"
    if isinstance(path_or_file, (str, os.PathLike)):
        with open(path_or_file, "w", encoding="ascii") as fh:
            fh.write(text)
    else:
        path_or_file.write(text)


def read_matrix_text(path_or_file) -> np.ndarray:
    if isinstance(path_or_file, (str, os.PathLike)):
        with open(path_or_file, encoding="ascii") as fh:
            text = fh.read()
    elif isinstance(path_or_file, io.TextIOBase):
        text = path_or_file.read()
    else:
        text = str(path_or_file)
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ShapeError("empty matrix text")
    try:
        rows, cols = (int(t) for t in lines[0].split())
    except ValueError as exc:
        raise ShapeError(f"bad matrix header {lines[0]!r}") from exc
    body = lines[1:]
    if len(body) != rows:
        raise ShapeError(f"header declares {rows} rows, found {len(body)}")
    try:
        data = [[float(t) for t in ln.split()] for ln in body]
    except ValueError as exc:
        raise ShapeError(f"non-numeric matrix entry: {exc}") from None
    if any(len(r) != cols for r in data):
        raise ShapeError(f"every row must have {cols} entries")
    return as_matrix(data)
