"""Central finite-difference check of the full DFAN objective.

Runs in float64 on a toy instance. For each parameter group the error is
``max|analytic - numeric| / max(max|numeric|, floor)``, i.e. the worst
deviation relative to the group's gradient scale.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import ClassSplit, SemanticMatrix
from .model import DfanParams, compute_losses, forward
from .tensor import no_grad

TOLERANCE = 1e-4
STEP = 1e-3


@dataclass
class GroupResult:
    name: str
    max_rel_error: float
    size: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


@dataclass
class GradcheckResult:
    groups: list[GroupResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def table(self) -> str:
        lines = [f"{'group':<16}{'size':>6}  {'max_rel_err':>12}  status"]
        for g in self.groups:
            lines.append(f"{g.name:<16}{g.size:>6}  {g.max_rel_error:>12.3e}  {'pass' if g.passed else 'FAIL'}")
        return "\n".join(lines)


def toy_problem(N=6, D=8, M=4, n_seen=3, n_unseen=1, batch=2, seed=0):
    """Random toy instance: (Z, p, y, semantic matrix, split)."""
    rng = np.random.default_rng(seed)
    C = n_seen + n_unseen
    sm = SemanticMatrix(rng.uniform(0.0, 1.0, (C, M)), tuple(f"c{i}" for i in range(C)))
    split = ClassSplit(tuple(range(n_seen)), tuple(range(n_seen, C)))
    Z = rng.standard_normal((batch, N, D))
    p = Z.mean(axis=1)
    y = rng.integers(0, n_seen, batch)
    return Z, p, y, sm, split


def relu_margin(params: DfanParams, Z, p, attention_axis="region") -> float:
    """Smallest |pre-activation| over every ReLU in the bias learner."""
    if params.phi is None:
        return np.inf
    with no_grad():
        out = forward(params, Z, p, attention_axis)
    inputs = [np.swapaxes(out.attr_features.data, -1, -2), np.asarray(p)]
    (w1, b1), (w2, b2), _ = params.phi
    margin = np.inf
    for h in inputs:
        pre1 = h @ w1.data + b1.data
        pre2 = np.maximum(pre1, 0) @ w2.data + b2.data
        margin = min(margin, np.abs(pre1).min(), np.abs(pre2).min())
    return float(margin)


def smooth_instance(N, D, M, n_seen, attention_axis, seed, margin, max_tries=10_000):
    """First toy instance (from ``seed`` upward) whose ReLU pre-activations
    all clear zero by ``margin``, so central differences never straddle a kink."""
    for k in range(seed, seed + max_tries):
        Z, p, y, sm, split = toy_problem(N, D, M, n_seen, seed=k)
        params = DfanParams.init(D, M, seed=k + 1, dtype=np.float64)
        if relu_margin(params, Z, p, attention_axis) > margin:
            return Z, p, y, sm, split, params
    raise RuntimeError(f"no kink-free toy instance within {max_tries} seeds")


def gradient_check(
    N=6,
    D=8,
    M=4,
    n_seen=3,
    lam=0.1,
    attention_axis="region",
    seed=0,
    step=STEP,
    corrupt: str | None = None,
) -> GradcheckResult:
    """Compare analytic gradients of the total loss with central differences.

    ``corrupt`` names a parameter group whose analytic gradient is perturbed
    before comparison; it exists to prove the harness can fail.
    """
    start = time.perf_counter()
    Z, p, y, sm, split, params = smooth_instance(N, D, M, n_seen, attention_axis, seed, 10 * step)

    def loss_value():
        return float(compute_losses(params, Z, p, y, sm, split, lam, attention_axis).total.item())

    parts = compute_losses(params, Z, p, y, sm, split, lam, attention_axis)
    for t in params.groups().values():
        t.grad = None
    parts.total.backward()
    analytic = {k: t.grad.copy() for k, t in params.groups().items()}
    if corrupt is not None:
        if corrupt not in analytic:
            raise KeyError(f"unknown parameter group {corrupt!r}; known: {', '.join(analytic)}")
        analytic[corrupt].flat[0] += 1.0 + abs(analytic[corrupt].flat[0])

    results = []
    for name, t in params.groups().items():
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value()
            flat[i] = orig - step
            down = loss_value()
            flat[i] = orig
            numeric.flat[i] = (up - down) / (2 * step)
        scale = max(np.abs(numeric).max(), 1e-8)
        err = float(np.abs(analytic[name] - numeric).max() / scale)
        results.append(GroupResult(name, err, t.data.size))
    return GradcheckResult(results, time.perf_counter() - start)

