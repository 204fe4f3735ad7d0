"""Fairness similarity metrics: evaluation, learning from data, and sound
linearisation into per-pair difference constraints."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .model import FeatureSchema, NeuralNet, load_model, save_model

__all__ = [
    "MetricError",
    "WeightedLp",
    "Mahalanobis",
    "Embedded",
    "FairnessMetric",
    "EigenDecomposition",
    "PairConstraint",
    "PairConstraintSet",
    "SoftmaxModel",
    "eval_metric",
    "eigendecompose",
    "pair_constraints",
    "learn_mahalanobis",
    "fit_softmax",
    "load_metric",
    "save_metric",
]

# Eigenvalues below this are treated as fully sensitive directions (the
# projector's null space); matches the clamping tolerance of eigendecompose.
ZERO_EIG_TOL = 1e-8


class MetricError(ValueError):
    """Raised for invalid metric parameters or inputs."""


@dataclass(frozen=True)
class WeightedLp:
    """Weighted l_p metric: (sum_i theta_i |d_i|^p)^(1/p); p=inf means max_i theta_i |d_i|.

    Sensitive coordinates conventionally get theta = 0 and are then free.
    """

    p: float
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if theta.ndim != 1:
            raise MetricError("theta must be a vector")
        if np.any(theta < 0) or not np.all(np.isfinite(theta)):
            raise MetricError("theta entries must be finite and >= 0")
        if not (self.p >= 1.0):
            raise MetricError(f"p must be >= 1 (or inf), got {self.p}")

    @property
    def dim(self) -> int:
        return self.theta.size


@dataclass(frozen=True)
class Mahalanobis:
    """Mahalanobis metric sqrt((x'-x'')^T S (x'-x'')) for symmetric PSD S."""

    S: np.ndarray

    def __post_init__(self):
        S = np.array(self.S, dtype=np.float64)
        S.setflags(write=False)
        object.__setattr__(self, "S", S)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise MetricError("S must be square")
        if not np.all(np.isfinite(S)):
            raise MetricError("S contains non-finite entries")
        if np.max(np.abs(S - S.T)) > 1e-9:
            raise MetricError("S is not symmetric (tolerance 1e-9)")

    @property
    def dim(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True)
class Embedded:
    """Metric evaluated on a network embedding: d(phi(x'), phi(x''))."""

    inner: Union[WeightedLp, Mahalanobis]
    phi: NeuralNet
    phi_path: str | None = None

    def __post_init__(self):
        if self.phi.output_dim != self.inner.dim:
            raise MetricError(
                f"embedding outputs {self.phi.output_dim} values but the inner "
                f"metric has dimension {self.inner.dim}"
            )

    @property
    def dim(self) -> int:
        return self.phi.input_dim


FairnessMetric = Union[WeightedLp, Mahalanobis, Embedded]


def eval_metric(m: FairnessMetric, x1, x2) -> float:
    """Evaluate the metric; symmetric, non-negative, zero at x1 == x2."""
    a = np.asarray(x1, dtype=np.float64)
    b = np.asarray(x2, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if isinstance(m, Embedded):
        if a.shape != (m.phi.input_dim,):
            raise MetricError(f"expected vectors of length {m.phi.input_dim}")
        return eval_metric(m.inner, m.phi.apply(a), m.phi.apply(b))
    if a.shape != (m.dim,):
        raise MetricError(f"expected vectors of length {m.dim}")
    d = a - b
    if isinstance(m, WeightedLp):
        if math.isinf(m.p):
            return float(np.max(m.theta * np.abs(d), initial=0.0))
        return float(np.sum(m.theta * np.abs(d) ** m.p) ** (1.0 / m.p))
    q = float(d @ m.S @ d)
    return math.sqrt(max(q, 0.0))


# ---------------------------------------------------------------------------
# Eigendecomposition (cyclic Jacobi)


@dataclass(frozen=True)
class EigenDecomposition:
    """U columns are eigenvectors; lam the matching eigenvalues (ascending)."""

    U: np.ndarray
    lam: np.ndarray


def eigendecompose(S: np.ndarray, max_sweeps: int = 100) -> EigenDecomposition:
    """Cyclic Jacobi rotations until the largest off-diagonal entry is <= 1e-10.

    Eigenvalues within -1e-8 of zero are clamped to 0; more negative values
    mean the input was not PSD and raise.
    """
    A = np.array(S, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise MetricError("matrix must be square")
    n = A.shape[0]
    if np.max(np.abs(A - A.T)) > 1e-9:
        raise MetricError("matrix is not symmetric (tolerance 1e-9)")
    A = 0.5 * (A + A.T)
    U = np.eye(n)
    if n == 1:
        lam = A[0, 0]
        if lam < -ZERO_EIG_TOL:
            raise MetricError(f"matrix is not PSD (eigenvalue {lam})")
        return EigenDecomposition(U=U, lam=np.array([max(lam, 0.0)]))

    tol = 1e-10
    for _ in range(max_sweeps):
        off = np.max(np.abs(A - np.diag(np.diag(A))))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= tol * 1e-2:
                    continue
                theta = 0.5 * math.atan2(2.0 * apq, A[q, q] - A[p, p])
                c, s = math.cos(theta), math.sin(theta)
                # Rotate rows/columns p and q of A, and columns of U.
                col_p = A[:, p].copy()
                col_q = A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                ucol_p = U[:, p].copy()
                U[:, p] = c * ucol_p - s * U[:, q]
                U[:, q] = s * ucol_p + c * U[:, q]
    else:
        raise MetricError(f"Jacobi did not converge within {max_sweeps} sweeps")
    lam = np.diag(A).copy()
    if np.any(lam < -ZERO_EIG_TOL):
        raise MetricError(f"matrix is not PSD (min eigenvalue {lam.min():.3e})")
    lam = np.maximum(lam, 0.0)
    order = np.argsort(lam, kind="stable")
    return EigenDecomposition(U=U[:, order], lam=lam[order])


# ---------------------------------------------------------------------------
# Linearised pair constraints


@dataclass(frozen=True)
class PairConstraint:
    """lo <= c . (x' - x'') <= hi over input or embedding coordinates."""

    coeffs: np.ndarray
    lo: float
    hi: float


@dataclass(frozen=True)
class PairConstraintSet:
    """Sound linear over-approximation of {(x', x''): d_fair(x', x'') <= eps}.

    `space` is "input" for direct metrics and "embedding" when the
    constraints apply to the outputs of the embedding network `embed`.
    """

    constraints: tuple[PairConstraint, ...]
    space: str = "input"
    embed: NeuralNet | None = None

    def satisfied(self, x1, x2, tol: float = 1e-9) -> bool:
        a = np.asarray(x1, dtype=np.float64)
        b = np.asarray(x2, dtype=np.float64)
        if self.space == "embedding":
            a, b = self.embed.apply(a), self.embed.apply(b)
        d = a - b
        return all(c.lo - tol <= float(c.coeffs @ d) <= c.hi + tol for c in self.constraints)


def pair_constraints(m: FairnessMetric, eps: float) -> PairConstraintSet:
    """Convert the eps-ball of the metric into box-style linear constraints.

    Every pair within metric distance eps satisfies all returned constraints.
    Directions the metric does not see (zero weights, zero eigenvalues) stay
    unconstrained and are limited only by the input domain.
    """
    if eps < 0:
        raise MetricError(f"eps must be >= 0, got {eps}")
    if isinstance(m, Embedded):
        inner = pair_constraints(m.inner, eps)
        return PairConstraintSet(constraints=inner.constraints, space="embedding", embed=m.phi)
    cons: list[PairConstraint] = []
    if isinstance(m, WeightedLp):
        for i, th in enumerate(m.theta):
            if th <= 0.0:
                continue
            bound = eps / th if math.isinf(m.p) else eps / th ** (1.0 / m.p)
            e = np.zeros(m.dim)
            e[i] = 1.0
            cons.append(PairConstraint(coeffs=e, lo=-bound, hi=bound))
        return PairConstraintSet(constraints=tuple(cons))
    eig = eigendecompose(m.S)
    for i in range(m.dim):
        lam = float(eig.lam[i])
        if lam <= ZERO_EIG_TOL:
            continue
        bound = eps / math.sqrt(lam)
        cons.append(PairConstraint(coeffs=eig.U[:, i].copy(), lo=-bound, hi=bound))
    return PairConstraintSet(constraints=tuple(cons))


# ---------------------------------------------------------------------------
# Metric learning (sensitive-subspace projector)


@dataclass(frozen=True)
class SoftmaxModel:
    """Multinomial logistic model: p(class k) ~ exp(a_k . x + b_k)."""

    a: np.ndarray  # (K, n_features)
    b: np.ndarray  # (K,)

    @property
    def num_classes(self) -> int:
        return self.a.shape[0]

    def probabilities(self, X: np.ndarray) -> np.ndarray:
        logits = X @ self.a.T + self.b
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)


def fit_softmax(
    X: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    lr: float = 0.1,
    iters: int = 2000,
    l2: float = 1e-3,
) -> SoftmaxModel:
    """Full-batch gradient-descent softmax regression with L2 penalty."""
    rows, nf = X.shape
    onehot = np.zeros((rows, num_classes))
    onehot[np.arange(rows), labels] = 1.0
    a = np.zeros((num_classes, nf))
    b = np.zeros(num_classes)
    for _ in range(iters):
        model = SoftmaxModel(a=a, b=b)
        p = model.probabilities(X)
        g = (p - onehot) / rows  # (rows, K)
        grad_a = g.T @ X + l2 * a
        grad_b = g.sum(axis=0)
        a = a - lr * grad_a
        b = b - lr * grad_b
    return SoftmaxModel(a=a, b=b)


def _orthonormal_rows(A: np.ndarray, drop_tol: float = 1e-10) -> np.ndarray:
    """Modified Gram-Schmidt basis of the row span, dropping dependent rows."""
    basis: list[np.ndarray] = []
    for row in A:
        v = row.astype(np.float64).copy()
        for q in basis:
            v -= (q @ v) * q
        # Re-orthogonalise once for numerical hygiene.
        for q in basis:
            v -= (q @ v) * q
        norm = float(np.linalg.norm(v))
        if norm > drop_tol:
            basis.append(v / norm)
    if not basis:
        return np.empty((0, A.shape[1]))
    return np.vstack(basis)


def learn_mahalanobis(data: np.ndarray, schema: FeatureSchema) -> Mahalanobis:
    """Learn S = I - P where P projects onto the learned sensitive subspace.

    Each sensitive feature is predicted from the non-sensitive columns
    (softmax regression over a one-hot group, least squares for continuous
    features); the fitted directions, together with the sensitive coordinate
    axes themselves, span the subspace that the metric ignores.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise MetricError("data must be a non-empty rows x features matrix")
    n = X.shape[1]
    if n != schema.dim:
        raise MetricError(f"data has {n} columns but schema describes {schema.dim}")
    sens_idx = schema.sensitive_indices()
    if not sens_idx:
        raise MetricError("schema marks no sensitive features")
    nonsens_idx = [i for i in range(n) if i not in set(sens_idx)]
    if not nonsens_idx:
        raise MetricError("all features are sensitive; nothing to regress on")

    # Drop constant predictor columns; their regression weight is meaningless.
    pred_idx = [i for i in nonsens_idx if np.ptp(X[:, i]) > 1e-12]
    Xp = X[:, pred_idx]

    directions: list[np.ndarray] = []

    def embed(weights: np.ndarray) -> np.ndarray:
        full = np.zeros(n)
        full[pred_idx] = weights
        return full

    groups = schema.groups()
    sensitive_groups = []
    covered: set[int] = set()
    for gid, idx in groups.items():
        if any(i in set(sens_idx) for i in idx):
            sensitive_groups.append((gid, idx))
            covered.update(idx)

    for _, idx in sensitive_groups:
        labels = np.argmax(X[:, idx], axis=1)
        if Xp.shape[1] > 0 and np.unique(labels).size > 1:
            sm = fit_softmax(Xp, labels, num_classes=len(idx))
            for k in range(sm.num_classes):
                directions.append(embed(sm.a[k]))

    for i in sens_idx:
        if i in covered:
            continue
        y = X[:, i]
        if Xp.shape[1] > 0 and np.ptp(y) > 1e-12:
            A = np.hstack([Xp, np.ones((X.shape[0], 1))])
            coef, *_ = np.linalg.lstsq(A, y, rcond=None)
            directions.append(embed(coef[:-1]))

    # Exact changes of a sensitive coordinate must also have zero distance.
    for i in sens_idx:
        e = np.zeros(n)
        e[i] = 1.0
        directions.append(e)

    A = np.vstack(directions)
    Q = _orthonormal_rows(A)
    S = np.eye(n) - Q.T @ Q
    S = 0.5 * (S + S.T)
    return Mahalanobis(S=S)


# ---------------------------------------------------------------------------
# File format


def metric_to_json(m: FairnessMetric) -> dict:
    if isinstance(m, WeightedLp):
        return {
            "type": "weighted_lp",
            "p": "inf" if math.isinf(m.p) else m.p,
            "theta": m.theta.tolist(),
        }
    if isinstance(m, Mahalanobis):
        return {"type": "mahalanobis", "S": m.S.tolist()}
    return {
        "type": "embedded",
        "inner": metric_to_json(m.inner),
        "model_path": m.phi_path,
    }


def _metric_from_json(obj: dict, base: Path) -> FairnessMetric:
    kind = obj.get("type")
    if kind == "weighted_lp":
        p = obj["p"]
        p = math.inf if p in ("inf", "infinity") else float(p)
        return WeightedLp(p=p, theta=np.asarray(obj["theta"], dtype=np.float64))
    if kind == "mahalanobis":
        return Mahalanobis(S=np.asarray(obj["S"], dtype=np.float64))
    if kind == "embedded":
        inner = _metric_from_json(obj["inner"], base)
        if not isinstance(inner, (WeightedLp, Mahalanobis)):
            raise MetricError("embedded metrics cannot nest")
        rel = obj["model_path"]
        path = Path(rel) if Path(rel).is_absolute() else base / rel
        phi = load_model(path, allow_multi_output=True)
        return Embedded(inner=inner, phi=phi, phi_path=str(rel))
    raise MetricError(f"unknown metric type {kind!r}")


def load_metric(path) -> FairnessMetric:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return _metric_from_json(obj, path.parent)


def save_metric(m: FairnessMetric, path) -> None:
    path = Path(path)
    if isinstance(m, Embedded) and m.phi_path is None:
        rel = path.stem + "_embedding.json"
        save_model(m.phi, path.parent / rel)
        m = Embedded(inner=m.inner, phi=m.phi, phi_path=rel)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metric_to_json(m), fh)
