"""Exact O(n^2) t-SNE with perplexity calibration by bisection."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericError, ParameterError

MACHINE_EPSILON = np.finfo(np.float64).eps


@dataclass(frozen=True)
class EmbeddingConfig:
    perplexity: float = 30.0
    n_components: int = 2
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    min_gain: float = 0.01
    init_std: float = 1e-4
    seed: int = 0

    def check(self, n: int) -> None:
        if n < 4:
            raise ParameterError(f"t-SNE needs at least 4 points, got {n}")
        if not 0 < self.perplexity < (n - 1) / 3:
            raise ParameterError(
                f"perplexity {self.perplexity} must lie in (0, {(n - 1) / 3:.3g}) for n={n}"
            )


@dataclass
class EmbeddingResult:
    coords: np.ndarray
    kl_trace: np.ndarray


def squared_distances(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] - 2.0 * (x @ x.T) + sq[None, :]
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _row_entropy_bits(d_row: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    # shift by the smallest distance so exp() cannot underflow to all zeros
    shifted = d_row - d_row.min()
    p = np.exp(-shifted * beta)
    total = p.sum()
    p /= total
    entropy_nats = np.log(total) + beta * np.dot(shifted, p)
    return entropy_nats / np.log(2.0), p


def conditional_affinities(
    d2: np.ndarray, perplexity: float, tol: float = 1e-8, max_iter: int = 50
) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic ``p_{j|i}`` with each row's entropy equal to ``log2(perplexity)``.

    Bisects the Gaussian precision ``beta = 1 / (2 sigma^2)`` per row. A row
    whose neighbours are all equidistant is uniform for any bandwidth and is
    returned as such (``beta = 0``). Returns the conditional matrix and the
    per-row betas.
    """
    n = d2.shape[0]
    target = np.log2(perplexity)
    cond = np.zeros((n, n))
    betas = np.empty(n)
    for i in range(n):
        row = np.delete(d2[i], i)
        spread = row - row.min()
        if not np.any(spread > 0):
            # equidistant neighbours: every bandwidth gives the uniform row
            betas[i] = 0.0
            cond[i, np.arange(n) != i] = 1.0 / (n - 1)
            continue
        beta = 1.0 / np.median(spread[spread > 0])
        lo, hi = 0.0, np.inf
        for _ in range(max_iter):
            h, p = _row_entropy_bits(row, beta)
            diff = h - target
            if abs(diff) <= tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if np.isinf(hi) else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        else:
            raise NumericError(f"perplexity bisection did not converge for row {i}")
        betas[i] = beta
        cond[i, np.arange(n) != i] = p
    return cond, betas


def calibrate_affinities(x: np.ndarray, perplexity: float = 30.0) -> np.ndarray:
    """Symmetric joint affinities ``P = (P_cond + P_cond^T) / (2n)`` with zero diagonal."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    n = x.shape[0]
    if n < 4:
        raise ParameterError(f"t-SNE needs at least 4 points, got {n}")
    cond, _ = conditional_affinities(squared_distances(x), perplexity)
    p = (cond + cond.T) / (2.0 * n)
    np.fill_diagonal(p, 0.0)
    return p


def student_t_affinities(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Low-dimensional joint affinities ``Q`` and the kernel ``(1 + |yi - yj|^2)^-1``."""
    kernel = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(kernel, 0.0)
    return kernel / kernel.sum(), kernel


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], MACHINE_EPSILON))))


def tsne_gradient(p: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``4 * sum_j (p_ij - q_ij)(y_i - y_j)(1 + |y_i - y_j|^2)^-1`` and ``Q``."""
    q, kernel = student_t_affinities(y)
    w = (p - q) * kernel
    grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
    return grad, q


def initial_coords(n: int, cfg: EmbeddingConfig) -> np.ndarray:
    return np.random.default_rng(cfg.seed).standard_normal((n, cfg.n_components)) * cfg.init_std


def tsne_embed(x: np.ndarray, cfg: EmbeddingConfig = EmbeddingConfig(), init: np.ndarray | None = None) -> EmbeddingResult:
    """Embed ``x`` ([n, d]) in ``cfg.n_components`` dimensions.

    Gradient descent with momentum and per-coordinate adaptive gains; ``P`` is
    multiplied by ``early_exaggeration`` for the first ``exaggeration_iters``
    iterations, after which momentum rises and velocity and gains restart.
    ``kl_trace`` records KL(P || Q) for the unexaggerated ``P``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    n = x.shape[0]
    cfg.check(n)
    p = calibrate_affinities(x, cfg.perplexity)
    y = initial_coords(n, cfg) if init is None else np.array(init, dtype=np.float64)
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    trace = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        exaggerating = it < cfg.exaggeration_iters
        if it == cfg.exaggeration_iters:
            # the second phase restarts velocity and gains
            update[:] = 0.0
            gains[:] = 1.0
        p_eff = p * cfg.early_exaggeration if exaggerating else p
        grad, q = tsne_gradient(p_eff, y)
        trace[it] = kl_divergence(p, q)
        momentum = cfg.momentum if exaggerating else cfg.final_momentum
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, cfg.min_gain, out=gains)
        update = momentum * update - cfg.learning_rate * gains * grad
        y = y + update
        if not np.all(np.isfinite(y)):
            raise NumericError(f"t-SNE coordinates overflowed at iteration {it}")
    return EmbeddingResult(y, trace)


def knn_purity(coords: np.ndarray, labels, k: int = 10) -> float:
    """Mean fraction of each point's ``k`` nearest neighbours sharing its label."""
    labels = np.asarray(labels)
    d = squared_distances(coords)
    np.fill_diagonal(d, np.inf)
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    return float(np.mean(labels[nearest] == labels[:, None]))


def write_coords_csv(path, ids, coords, locations, sizes, source: str) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "break_location", "break_size_cm", "source"])
        for i, (cx, cy), loc, size in zip(ids, coords, locations, sizes):
            w.writerow([i, repr(float(cx)), repr(float(cy)), loc, repr(float(size)), source])
    return path


def write_kl_csv(path, trace) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "kl"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
    return path
