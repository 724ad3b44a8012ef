"""Per-class embedding sampling and exact t-SNE projection."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .data import to_model_input
from .encoder import cache_get_or_encode
from .prompting import embedding_grid_labels


@dataclass
class EmbeddingSample:
    vectors: np.ndarray  # (m, 256)
    labels: np.ndarray  # (m,) class id, 0 = background
    provenance: list  # (subject_id, grid_row, grid_col) per vector
    shortfall: dict = field(default_factory=dict)  # class -> missing count


def sample_class_embeddings(test_set, backend, cache=None, n=50, rng_seed=0,
                            classes=None, include_background=True, rule="majority"):
    """Sample ``n`` encoder grid cells per class without replacement.

    A class with fewer than ``n`` candidate cells contributes all of them and
    the gap is recorded in ``shortfall``.
    """
    test_set = list(test_set)
    if classes is None:
        label_set = test_set[0][1].label_set if test_set else ()
        classes = ([0] if include_background else []) + list(label_set)
    feats, cells = [], {c: [] for c in classes}
    for si, (img, mask) in enumerate(test_set):
        feats.append(cache_get_or_encode(cache, backend, to_model_input(img)).features)
        grid = embedding_grid_labels(mask, rule)
        for c in classes:
            rows, cols = np.nonzero(grid == c)
            cells[c] += [(si, r, q) for r, q in zip(rows.tolist(), cols.tolist())]
    rng = np.random.default_rng(rng_seed)
    vectors, labels, prov, shortfall = [], [], [], {}
    for c in classes:
        cand = cells[c]
        if len(cand) < n:
            shortfall[c] = n - len(cand)
            pick = np.arange(len(cand))
        else:
            pick = np.sort(rng.choice(len(cand), size=n, replace=False))
        for k in pick:
            si, r, q = cand[k]
            vectors.append(feats[si][:, r, q])
            labels.append(c)
            prov.append((test_set[si][0].provenance[0], r, q))
    dim = feats[0].shape[0] if feats else 256
    return EmbeddingSample(np.asarray(vectors, dtype=np.float64).reshape(-1, dim),
                           np.asarray(labels, dtype=np.int64), prov, shortfall)


# ---------------------------------------------------------------- t-SNE

def _sq_distances(X):
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_entropy(d, beta):
    # d excludes self; shift for stability
    e = np.exp(-(d - d.min()) * beta)
    s = e.sum()
    p = e / s
    H = np.log(s) + beta * np.sum((d - d.min()) * p)
    return H, p


def conditional_probabilities(X, perplexity, tol=1e-6, max_steps=200):
    """Row-conditional affinities with per-point Gaussian precision found by
    bisection so that ``exp(H_i)`` matches ``perplexity``.

    Returns ``(P_cond, achieved_perplexity)``.
    """
    D = _sq_distances(np.asarray(X, dtype=np.float64))
    n = D.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    perp = np.zeros(n)
    for i in range(n):
        d = np.delete(D[i], i)
        beta, lo, hi = 1.0 / max(np.median(d), 1e-12), 0.0, np.inf
        for _ in range(max_steps):
            H, p = _row_entropy(d, beta)
            diff = H - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        P[i, np.arange(n) != i] = p
        perp[i] = np.exp(H)
    return P, perp


@dataclass
class ProjectionResult:
    coords: np.ndarray
    labels: np.ndarray
    params: dict
    kl_history: np.ndarray
    perplexities: np.ndarray


def _kl(P, Q):
    m = P > 0
    return float(np.sum(P[m] * np.log(P[m] / Q[m])))


def tsne_project(sample, perplexity=25.0, iterations=5000, rng_seed=0, learning_rate=None,
                 early_exaggeration=12.0, exaggeration_iters=250, momentum=(0.5, 0.8)):
    """Exact t-SNE of ``sample`` (an :class:`EmbeddingSample` or array) to 2D."""
    if isinstance(sample, EmbeddingSample):
        X, labels = sample.vectors, sample.labels
    else:
        X, labels = np.asarray(sample, dtype=np.float64), None
    n = X.shape[0]
    if n <= 3 * perplexity:
        raise ValueError(f"t-SNE needs more than 3*perplexity = {3 * perplexity:g} points, got {n}")
    lr = n / 12.0 if learning_rate is None else float(learning_rate)
    Pc, perp = conditional_probabilities(X, perplexity)
    P = np.maximum((Pc + Pc.T) / (2.0 * n), 1e-12)
    rng = np.random.default_rng(rng_seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl = np.zeros(iterations)
    for it in range(iterations):
        exag = early_exaggeration if it < exaggeration_iters else 1.0
        mom = momentum[0] if it < exaggeration_iters else momentum[1]
        num = 1.0 / (1.0 + _sq_distances(Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        same = (grad > 0) == (update > 0)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = mom * update - lr * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        kl[it] = _kl(P, Q)
    params = {"perplexity": perplexity, "iterations": iterations, "learning_rate": lr,
              "early_exaggeration": early_exaggeration, "exaggeration_iters": exaggeration_iters,
              "momentum": list(momentum), "rng_seed": rng_seed}
    return ProjectionResult(Y, labels, params, kl, perp)


def projection_csv(result: ProjectionResult, sample: EmbeddingSample, class_names=None):
    class_names = class_names or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "class_name", "subject_id", "grid_row", "grid_col"])
    for (x, y), c, (sid, r, q) in zip(result.coords, sample.labels, sample.provenance):
        w.writerow([repr(float(x)), repr(float(y)), class_names.get(int(c), str(int(c))), sid, r, q])
    return buf.getvalue()
