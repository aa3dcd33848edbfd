"""RBF-kernel nu-one-class SVM trained by sequential minimal optimization.

The solver works on the dual problem

    min_a  1/2 a' Q a    s.t.  0 <= a_i <= 1/(nu*n),  sum_i a_i = 1,

with Q_ij = exp(-gamma * ||x_i - x_j||^2). The decision function of the
trained model is f(x) = sum_i a_i K(s_i, x) - b; points with f(x) >= 0 are
classified as normal (+1), the rest as outliers (-1).
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_text
from .errors import ConvergenceError, DataError

__all__ = [
    "KernelParams",
    "TrainedModel",
    "rbf_kernel",
    "train_ocsvm",
    "qp_reference_solve",
    "decision_value",
    "decision_values",
    "classify",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

DEFAULT_KKT_TOL = 1e-3
DEFAULT_MAX_ITER = 10_000_000
DEFAULT_CACHE_MB = 200.0

# Alphas at or below this (relative to the box bound) are treated as zero
# when pruning support vectors.
_ALPHA_DROP_REL = 1e-12


@dataclass(frozen=True)
class KernelParams:
    """RBF kernel parameters; gamma is the inverse squared length-scale."""

    gamma: float

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be a positive finite real, got {self.gamma}")


@dataclass(frozen=True)
class TrainedModel:
    """One-class SVM in dual form.

    `alphas` are the strictly positive dual coefficients (box bound
    1/(nu*n_train), simplex sum 1); `support_vectors` the matching training
    rows. `feature_mask` and `normalizer` record the preprocessing the model
    expects; raw rows must be masked/normalized before scoring.
    """

    support_vectors: np.ndarray
    alphas: np.ndarray
    offset_b: float
    gamma: float
    nu: float
    feature_mask: tuple = ()
    normalizer: object = None

    def __post_init__(self):
        sv = np.asarray(self.support_vectors, dtype=np.float64)
        al = np.asarray(self.alphas, dtype=np.float64)
        if sv.ndim != 2 or sv.shape[0] == 0:
            raise ValueError("support_vectors must be a nonempty 2-D array")
        if al.shape != (sv.shape[0],):
            raise ValueError("alphas and support_vectors lengths differ")
        if np.any(al <= 0):
            raise ValueError("alphas must be strictly positive")
        if abs(float(al.sum()) - 1.0) > 1e-6:
            raise ValueError("alphas must sum to 1")
        KernelParams(self.gamma)
        if not 0 < self.nu <= 1:
            raise ValueError(f"nu must lie in (0, 1], got {self.nu}")
        sv.setflags(write=False)
        al.setflags(write=False)
        object.__setattr__(self, "support_vectors", sv)
        object.__setattr__(self, "alphas", al)
        object.__setattr__(self, "feature_mask", tuple(int(i) for i in self.feature_mask))

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]


def rbf_kernel(x, y, gamma: float) -> float:
    """exp(-gamma * ||x - y||^2); always in (0, 1]."""
    KernelParams(gamma)
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.exp(-gamma * float(d @ d)))


def _kernel_matrix(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    """Pairwise RBF kernel between the rows of A and B."""
    sq_a = np.einsum("ij,ij->i", A, A)
    sq_b = np.einsum("ij,ij->i", B, B)
    d2 = sq_a[:, None] + sq_b[None, :] - 2.0 * (A @ B.T)
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-gamma * d2)


class _GramRowCache:
    """LRU cache of Gram-matrix rows, capped by an approximate byte budget."""

    def __init__(self, X: np.ndarray, gamma: float, budget_mb: float = DEFAULT_CACHE_MB):
        self._X = X
        self._gamma = gamma
        self._sq = np.einsum("ij,ij->i", X, X)
        row_bytes = 8 * X.shape[0]
        self._capacity = max(2, int(budget_mb * 2**20 / max(row_bytes, 1)))
        self._rows: OrderedDict[int, np.ndarray] = OrderedDict()

    def row(self, i: int) -> np.ndarray:
        r = self._rows.get(i)
        if r is not None:
            self._rows.move_to_end(i)
            return r
        d2 = self._sq + self._sq[i] - 2.0 * (self._X @ self._X[i])
        np.maximum(d2, 0.0, out=d2)
        r = np.exp(-self._gamma * d2)
        r[i] = 1.0
        if len(self._rows) >= self._capacity:
            self._rows.popitem(last=False)
        self._rows[i] = r
        return r


def _initial_alpha(n: int, nu: float, box: float) -> np.ndarray:
    # libsvm-style start: fill the box on the first floor(nu*n) points,
    # put the remaining mass on the next one.
    alpha = np.zeros(n)
    k = int(nu * n)
    alpha[:k] = box
    if k < n:
        alpha[k] = 1.0 - k * box
    return alpha


def _offset_from_gradient(alpha: np.ndarray, grad: np.ndarray, box: float) -> float:
    """Decision threshold b from the converged dual gradient (grad = Q a).

    Free support vectors sit exactly on the boundary, so b is their mean
    kernel expansion. Without free vectors, b is bracketed by the expansions
    of the upper-bounded (must score <= 0) and zero (must score >= 0) points.
    """
    free = (alpha > 0.0) & (alpha < box)
    if np.any(free):
        return float(grad[free].mean())
    at_upper = alpha >= box
    at_zero = alpha <= 0.0
    lo = float(grad[at_upper].max()) if np.any(at_upper) else None
    hi = float(grad[at_zero].min()) if np.any(at_zero) else None
    if lo is not None and hi is not None:
        return 0.5 * (lo + hi)
    return lo if lo is not None else hi


def _build_model(X, alpha, grad, box, nu, gamma) -> TrainedModel:
    b = _offset_from_gradient(alpha, grad, box)
    keep = alpha > _ALPHA_DROP_REL * box
    return TrainedModel(
        support_vectors=X[keep].copy(),
        alphas=alpha[keep].copy(),
        offset_b=b,
        gamma=gamma,
        nu=nu,
        feature_mask=tuple(range(X.shape[1])),
    )


def _validate_training_inputs(points, nu, gamma):
    X = np.ascontiguousarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("points must be a 2-D array (n x d)")
    n = X.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 training points, got {n}")
    if not np.all(np.isfinite(X)):
        raise ValueError("training points must be finite")
    if not 0 < nu <= 1:
        raise ValueError(f"nu must lie in (0, 1], got {nu}")
    if nu * n < 1:
        raise ValueError(
            f"nu*n = {nu * n:.4g} < 1: the box constraint cannot be saturated"
        )
    KernelParams(gamma)
    return X


def train_ocsvm(
    points,
    nu: float,
    gamma: float,
    kkt_tol: float = DEFAULT_KKT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    cache_mb: float = DEFAULT_CACHE_MB,
) -> TrainedModel:
    """Train a one-class SVM by SMO with maximal-violating-pair selection.

    Each iteration moves mass between the two coordinates that most violate
    the KKT conditions; the run stops when the violation gap drops below
    `kkt_tol`. Raises ConvergenceError (carrying the best iterate and its
    residual gap) if `max_iter` pair updates are exhausted first.
    """
    X = _validate_training_inputs(points, nu, gamma)
    n = X.shape[0]
    box = 1.0 / (nu * n)
    rows = _GramRowCache(X, gamma, cache_mb)

    alpha = _initial_alpha(n, nu, box)
    grad = np.zeros(n)
    for i in np.nonzero(alpha)[0]:
        grad += alpha[i] * rows.row(i)

    gap = np.inf
    for _ in range(max_iter):
        # i: best coordinate that can still grow; j: best that can shrink.
        up = np.where(alpha < box, grad, np.inf)
        down = np.where(alpha > 0.0, grad, -np.inf)
        i = int(np.argmin(up))
        j = int(np.argmax(down))
        gap = down[j] - up[i]
        if gap < kkt_tol:
            return _build_model(X, alpha, grad, box, nu, gamma)
        row_i = rows.row(i)
        row_j = rows.row(j)
        quad = row_i[i] + row_j[j] - 2.0 * row_i[j]
        if quad <= 0.0:
            quad = 1e-12
        step = (grad[j] - grad[i]) / quad
        room_i = box - alpha[i]
        step = min(step, room_i, alpha[j])
        # Exact bound assignment keeps zero/upper entries exactly on the bound.
        if step == room_i:
            alpha[i] = box
        else:
            alpha[i] += step
        if step == alpha[j]:
            alpha[j] = 0.0
        else:
            alpha[j] -= step
        grad += step * (row_i - row_j)

    model = _build_model(X, alpha, grad, box, nu, gamma)
    raise ConvergenceError(
        f"SMO did not reach kkt_tol={kkt_tol} within {max_iter} pair updates "
        f"(residual gap {gap:.3e})",
        model=model,
        residual=float(gap),
    )


def _project_capped_simplex(v: np.ndarray, box: float) -> np.ndarray:
    """Euclidean projection onto {0 <= a <= box, sum(a) = 1} by bisection."""
    lo = float(v.min()) - box
    hi = float(v.max())
    for _ in range(100):
        tau = 0.5 * (lo + hi)
        s = np.clip(v - tau, 0.0, box).sum()
        if s > 1.0:
            lo = tau
        else:
            hi = tau
    return np.clip(v - 0.5 * (lo + hi), 0.0, box)


def _kkt_gap(alpha: np.ndarray, grad: np.ndarray, box: float) -> float:
    up = np.where(alpha < box - 1e-12 * box, grad, np.inf)
    down = np.where(alpha > 1e-12 * box, grad, -np.inf)
    return float(np.max(down) - np.min(up))


def qp_reference_solve(
    points,
    nu: float,
    gamma: float,
    tol: float = 1e-9,
    max_iter: int = 200_000,
) -> TrainedModel:
    """Dense reference solver for the same dual; test oracle, n <= 50 only.

    Accelerated projected gradient (with monotone restarts) on the full Gram
    matrix, run until the KKT violation gap falls below `tol`.
    """
    X = _validate_training_inputs(points, nu, gamma)
    n = X.shape[0]
    if n > 50:
        raise ValueError(f"qp_reference_solve is limited to n <= 50, got {n}")
    box = 1.0 / (nu * n)
    Q = _kernel_matrix(X, X, gamma)
    np.fill_diagonal(Q, 1.0)

    lipschitz = float(np.linalg.eigvalsh(Q)[-1])
    step = 1.0 / max(lipschitz, 1e-12)

    alpha = _project_capped_simplex(np.full(n, 1.0 / n), box)
    y = alpha.copy()
    t = 1.0
    obj = 0.5 * float(alpha @ Q @ alpha)
    for it in range(max_iter):
        grad_y = Q @ y
        alpha_new = _project_capped_simplex(y - step * grad_y, box)
        obj_new = 0.5 * float(alpha_new @ Q @ alpha_new)
        if obj_new > obj:
            # Monotone restart: drop momentum, retry from the current point.
            y = alpha.copy()
            t = 1.0
            alpha_new = _project_capped_simplex(alpha - step * (Q @ alpha), box)
            obj_new = 0.5 * float(alpha_new @ Q @ alpha_new)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = alpha_new + ((t - 1.0) / t_new) * (alpha_new - alpha)
        alpha, t, obj = alpha_new, t_new, obj_new
        if it % 8 == 0:
            grad = Q @ alpha
            if _kkt_gap(alpha, grad, box) < tol:
                break
    grad = Q @ alpha
    gap = _kkt_gap(alpha, grad, box)
    if gap >= tol:
        raise ConvergenceError(
            f"reference QP stalled at gap {gap:.3e} (tol {tol})",
            model=_build_model(X, alpha, grad, box, nu, gamma),
            residual=gap,
        )
    # Snap near-bound coordinates so support-vector pruning matches SMO.
    alpha = np.where(alpha <= 1e-12 * box, 0.0, alpha)
    alpha = np.where(alpha >= box * (1.0 - 1e-12), box, alpha)
    grad = Q @ alpha
    return _build_model(X, alpha, grad, box, nu, gamma)


def decision_values(model: TrainedModel, X) -> np.ndarray:
    """Vectorized decision function over the rows of X."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.dim:
        raise ValueError(
            f"dimension mismatch: model expects {model.dim} features, got {X.shape[1]}"
        )
    k = _kernel_matrix(X, model.support_vectors, model.gamma)
    return k @ model.alphas - model.offset_b


def decision_value(model: TrainedModel, x) -> float:
    """sum_i a_i K(s_i, x) - b for a single point."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(decision_values(model, x)[0])


def classify(model: TrainedModel, x) -> int:
    """+1 (normal) iff the decision value is >= 0, else -1 (outlier)."""
    return 1 if decision_value(model, x) >= 0.0 else -1


# --- serialization ---------------------------------------------------------

MODEL_FORMAT_VERSION = 1

_MODEL_FIELDS = (
    "gamma",
    "nu",
    "offset_b",
    "alphas",
    "support_vectors",
    "feature_mask",
    "normalizer",
    "format_version",
)


def model_to_dict(model: TrainedModel) -> dict:
    norm = model.normalizer.to_dict() if model.normalizer is not None else None
    return {
        "gamma": model.gamma,
        "nu": model.nu,
        "offset_b": model.offset_b,
        "alphas": [float(a) for a in model.alphas],
        "support_vectors": [[float(v) for v in row] for row in model.support_vectors],
        "feature_mask": list(model.feature_mask),
        "normalizer": norm,
        "format_version": MODEL_FORMAT_VERSION,
    }


def model_from_dict(doc: dict) -> TrainedModel:
    if not isinstance(doc, dict):
        raise DataError("model document must be a JSON object")
    missing = [k for k in _MODEL_FIELDS if k not in doc]
    if missing:
        raise DataError(f"model document missing fields: {', '.join(missing)}")
    if doc["format_version"] != MODEL_FORMAT_VERSION:
        raise DataError(f"unsupported model format_version {doc['format_version']!r}")
    normalizer = None
    if doc["normalizer"] is not None:
        from .dataset import Normalizer

        normalizer = Normalizer.from_dict(doc["normalizer"])
    try:
        return TrainedModel(
            support_vectors=np.asarray(doc["support_vectors"], dtype=np.float64),
            alphas=np.asarray(doc["alphas"], dtype=np.float64),
            offset_b=float(doc["offset_b"]),
            gamma=float(doc["gamma"]),
            nu=float(doc["nu"]),
            feature_mask=tuple(doc["feature_mask"]),
            normalizer=normalizer,
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid model document: {exc}") from exc


def save_model(model: TrainedModel, path) -> None:
    """Write the model JSON atomically (temp file + rename)."""
    payload = json.dumps(model_to_dict(model), indent=2)
    atomic_write_text(path, payload + "\n")


def load_model(path) -> TrainedModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(doc)
