"""Pick-and-compensate weight pruning under a local quadratic model.

Given a PSD curvature matrix H (an expected Gauss-Newton matrix) and a
weight vector, each step zeroes the single weight whose removal costs the
least under d(delta) = delta^T H delta / 2 subject to delta_p = -theta_p,
then applies the compensating update to the surviving weights. Previously
pruned coordinates are hard-constrained to stay at zero: the compensation
solve runs on the unpruned support only, since the unconstrained update
could otherwise resurrect them.

Instances are desk scale (at most a few thousand weights), so the restricted
inverse is simply recomputed per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["QuadraticModel", "PruneStep", "PruneResult", "prune_step", "obs_prune"]


@dataclass(frozen=True)
class QuadraticModel:
    curvature: np.ndarray  # symmetric PSD, one row/column per weight
    theta: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.curvature, dtype=np.float64)
        t = np.asarray(self.theta, dtype=np.float64).ravel()
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ValueError("curvature must be square")
        if t.shape[0] != h.shape[0]:
            raise ValueError("theta length must match curvature size")
        if not np.allclose(h, h.T, atol=1e-10 * max(1.0, float(np.abs(h).max()))):
            raise ValueError("curvature must be symmetric")
        floor = -1e-10 * max(1.0, float(np.trace(h)) / h.shape[0])
        if float(np.linalg.eigvalsh(h).min()) < floor:
            raise ValueError("curvature must be positive semi-definite")
        object.__setattr__(self, "curvature", h)
        object.__setattr__(self, "theta", t)

    @property
    def size(self) -> int:
        return self.theta.shape[0]


@dataclass(frozen=True)
class PruneStep:
    index: int          # coordinate chosen for removal
    delta: np.ndarray   # full-length compensating update, zero off support
    loss: float         # quadratic cost of this step
    dual: float         # multiplier of the zeroing constraint


@dataclass(frozen=True)
class PruneResult:
    theta: np.ndarray
    order: list[int]      # pruned coordinates in removal order
    losses: np.ndarray


def _ridge(h: np.ndarray) -> float:
    return 1e-8 * float(np.trace(h)) / h.shape[0]


def prune_step(model: QuadraticModel, support=None, theta=None) -> PruneStep:
    """Cheapest single coordinate to zero, with its compensating update.

    ``support`` restricts both the candidate set and the compensation to the
    given coordinates (all by default); ``theta`` overrides the model's
    weight vector so sequential pruning can reuse one curvature matrix.
    """
    t = model.theta if theta is None else np.asarray(theta, dtype=np.float64)
    sup = (np.arange(model.size) if support is None
           else np.asarray(sorted(support), dtype=np.int64))
    if sup.size == 0:
        raise ValueError("support is empty, nothing left to prune")
    h = model.curvature[np.ix_(sup, sup)] + _ridge(model.curvature) * np.eye(sup.size)
    try:
        inv = np.linalg.inv(h)
    except np.linalg.LinAlgError as exc:
        raise ValueError("curvature is singular even after regularization") from exc
    diag = np.diag(inv)
    t_sup = t[sup]
    losses = 0.5 * t_sup ** 2 / diag
    j = int(np.argmin(losses))
    dual = -t_sup[j] / diag[j]
    delta = np.zeros(model.size)
    delta[sup] = dual * inv[:, j]
    delta[sup[j]] = -t_sup[j]  # exact zeroing, no roundoff residue
    return PruneStep(index=int(sup[j]), delta=delta,
                     loss=float(losses[j]), dual=float(dual))


def obs_prune(model: QuadraticModel, prune_count: int) -> PruneResult:
    """Prune ``prune_count`` weights sequentially, compensating each step.

    The curvature matrix is held fixed across steps; pruned coordinates are
    projected back to exact zero after every compensation.
    """
    if not 0 <= prune_count < model.size:
        raise ValueError("prune count must lie in [0, total weights)")
    theta = model.theta.copy()
    support = set(range(model.size))
    order, losses = [], []
    for _ in range(prune_count):
        step = prune_step(model, support=support, theta=theta)
        # delta is exactly zero off the support, so earlier prunes stay zero
        theta = theta + step.delta
        theta[step.index] = 0.0
        support.remove(step.index)
        order.append(step.index)
        losses.append(step.loss)
    return PruneResult(theta=theta, order=order, losses=np.asarray(losses))
