"""Closed-form flow quantities and matching losses.

A "flow" for class c is the direction from the mean feature of class-c
samples toward the mean feature of all other samples. It equals, up to
the positive scalar (C-1)/C^2 that is deliberately dropped here, the
c-th row of the batch cross-entropy gradient w.r.t. a zero linear head:

    grad row c   = (1/B) [ (1/C) * sum_all phi  -  sum_{y=c} phi ]
    flow  row c  = mean_{y!=c} phi - mean_{y=c} phi

Cosine distances are scale-free, so dropping the scalar is exact, not an
approximation. All reductions run in float64 regardless of input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

# A FlowMatrix is a plain (C, F) ndarray of per-class flows.
FlowMatrix = np.ndarray


@dataclass
class LinearHead:
    """Bias-free linear classifier used by gradient matching.

    mode "random" resamples W per step, "fixed" keeps the first draw,
    "analytic" uses no W at all (the expected-gradient form).
    """

    mode: str
    init_sigma: float = 0.01
    weight: np.ndarray | None = None  # (C, F)

    def __post_init__(self):
        if self.mode not in ("random", "fixed", "analytic"):
            raise ValidationError(f"unknown head mode {self.mode!r}")
        if self.mode == "analytic":
            self.weight = None
        elif self.weight is None:
            raise ValidationError(f"{self.mode} head requires a weight matrix")


def make_linear_head(num_classes: int, feature_dim: int, mode: str = "random",
                     sigma: float = 0.01, seed: int = 0) -> LinearHead:
    if mode == "analytic":
        return LinearHead(mode="analytic", init_sigma=sigma)
    rng = np.random.default_rng(np.random.SeedSequence([0x11EAD, seed]))
    w = rng.normal(0.0, sigma, size=(num_classes, feature_dim))
    return LinearHead(mode=mode, init_sigma=sigma, weight=w)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValidationError("labels out of range for one_hot")
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rejects NaN input."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"logits must be (B, C), got shape {z.shape}")
    if not np.isfinite(z).all():
        raise ValidationError("non-finite value in logits")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_onehot(labels_onehot: np.ndarray, batch: int) -> np.ndarray:
    y = np.asarray(labels_onehot, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] != batch:
        raise ShapeError("one-hot labels must be (B, C)")
    if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=1) == 1.0).all()):
        raise ValidationError("labels must be exactly one-hot")
    return y


def ce_linear_gradient(features: np.ndarray, labels_onehot: np.ndarray,
                       head: LinearHead) -> np.ndarray:
    """Batch-mean CE gradient w.r.t. the linear head weights:
    (1/B) sum_i (p_i - y_i) phi_i^T, with p_i = softmax(W phi_i)."""
    phi = np.asarray(features, dtype=np.float64)
    if phi.ndim != 2:
        raise ShapeError("features must be (B, F)")
    y = _check_onehot(labels_onehot, phi.shape[0])
    if head.mode == "analytic":
        raise ValidationError("analytic head carries no W; use analytic_flow")
    w = np.asarray(head.weight, dtype=np.float64)
    if w.shape != (y.shape[1], phi.shape[1]):
        raise ShapeError(
            f"head weight {w.shape} does not match (C={y.shape[1]}, F={phi.shape[1]})"
        )
    p = softmax_probs(phi @ w.T)
    return (p - y).T @ phi / phi.shape[0]


def ce_linear_gradient_feature_vjp(features, labels_onehot, head, upstream):
    """Backpropagate a (C, F) cotangent on the CE gradient to the features.

    With G = (1/B) sum (p_i - y_i) phi_i^T and M the cotangent:
        d/dphi_i = (1/B) [ M^T (p_i - y_i) + W^T (diag(p_i) - p_i p_i^T) M phi_i ]
    """
    phi = np.asarray(features, dtype=np.float64)
    y = _check_onehot(labels_onehot, phi.shape[0])
    if head.mode == "analytic":
        raise ValidationError("analytic head carries no W")
    w = np.asarray(head.weight, dtype=np.float64)
    m = np.asarray(upstream, dtype=np.float64)
    p = softmax_probs(phi @ w.T)
    term1 = (p - y) @ m
    q = phi @ m.T  # (B, C), rows M phi_i
    r = p * q - p * (p * q).sum(axis=1, keepdims=True)
    return (term1 + r @ w) / phi.shape[0]


def class_aggregate(features: np.ndarray, labels_onehot: np.ndarray,
                    target_coef: float, nontarget_coef: float) -> FlowMatrix:
    """Per-class combination a*mean(phi|y_c=1) + b*mean(phi|y_c=0).

    analytic_flow is (a, b) = (-1, +1); the target-only and
    nontarget-only ablation losses use (1, 0) and (0, 1).
    """
    phi = np.asarray(features, dtype=np.float64)
    if phi.ndim != 2:
        raise ShapeError("features must be (B, F)")
    y = _check_onehot(labels_onehot, phi.shape[0])
    b = phi.shape[0]
    counts = y.sum(axis=0)
    if (counts < 1).any():
        missing = int(np.argmin(counts))
        raise ValidationError(f"class {missing} has no members in the batch")
    if (counts >= b).any() and nontarget_coef != 0.0:
        full = int(np.argmax(counts))
        raise ValidationError(f"class {full} covers the whole batch")
    sums = y.T @ phi  # (C, F)
    total = phi.sum(axis=0, keepdims=True)
    out = np.zeros_like(sums)
    if target_coef != 0.0:
        out += target_coef * sums / counts[:, None]
    if nontarget_coef != 0.0:
        out += nontarget_coef * (total - sums) / (b - counts)[:, None]
    return out


def class_aggregate_vjp(labels_onehot: np.ndarray, target_coef: float,
                        nontarget_coef: float, upstream: np.ndarray) -> np.ndarray:
    """Adjoint of class_aggregate: (C, F) cotangent -> (B, F) feature grads.

    Sample i receives, for every class c, the coefficient
    a/n_c if y_ic = 1 else b/(B - n_c), times upstream row c.
    """
    y = np.asarray(labels_onehot, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    b = y.shape[0]
    counts = y.sum(axis=0)
    coef = np.zeros_like(y)
    if target_coef != 0.0:
        coef += target_coef * y / counts[None, :]
    if nontarget_coef != 0.0:
        coef += nontarget_coef * (1.0 - y) / (b - counts)[None, :]
    return coef @ g


def analytic_flow(features: np.ndarray, labels_onehot: np.ndarray) -> FlowMatrix:
    """Per-class flow of a batch: non-target mean minus target mean."""
    return class_aggregate(features, labels_onehot, -1.0, 1.0)


def _flat_cos(a: np.ndarray, b: np.ndarray):
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine undefined for a zero vector")
    return float(a.ravel() @ b.ravel() / (na * nb)), na, nb


def cosine_distance(a: np.ndarray, b: np.ndarray,
                    aggregation: str = "flatten") -> float:
    """1 - cosine similarity, in [0, 2].

    "flatten" takes one cosine over the vectorized matrices; for
    "per_class_mean" each row contributes its own 1 - cos and the rows
    are averaged.
    """
    val, _ = cosine_distance_with_grad(a, b, aggregation)
    return val


def cosine_distance_with_grad(a: np.ndarray, b: np.ndarray,
                              aggregation: str = "flatten"):
    """Returns (distance, gradient w.r.t. b). a is treated as constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if aggregation == "flatten":
        cos, na, nb = _flat_cos(a, b)
        grad = (cos * b / nb**2) - a / (na * nb)
        return 1.0 - cos, grad
    if aggregation == "per_class_mean":
        if a.ndim != 2:
            raise ShapeError("per_class_mean needs (C, F) matrices")
        c = a.shape[0]
        total = 0.0
        grad = np.empty_like(b)
        for i in range(c):
            cos, na, nb = _flat_cos(a[i], b[i])
            total += 1.0 - cos
            grad[i] = ((cos * b[i] / nb**2) - a[i] / (na * nb)) / c
        return total / c, grad
    raise ValidationError(f"unknown aggregation {aggregation!r}")


def per_class_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarities between two (C, F) matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValidationError("cosine undefined for a zero row")
    return (a * b).sum(axis=1) / (na * nb)
