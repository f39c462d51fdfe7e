"""(mu/mu_w, lambda)-CMA-ES for black-box minimization.

Follows the standard formulation: log-rank recombination weights, cumulative
step-size adaptation, rank-one and rank-mu covariance updates, and a fresh
eigendecomposition every generation.  All randomness comes from one seeded
``numpy.random.Generator`` so a run is reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BadConfig, BadDimension

PENALTY = 1e12


@dataclass(frozen=True)
class CmaConfig:
    population_size: Optional[int] = None  # None -> 4 + floor(3 ln n)
    sigma0: float = 0.3
    max_evals: int = 10_000
    target_f: float = -math.inf
    seed: int = 0
    tol_x: float = 1e-12
    max_condition: float = 1e14

    def resolved_population(self, n: int) -> int:
        if self.population_size is not None:
            return int(self.population_size)
        return 4 + int(math.floor(3 * math.log(n)))


@dataclass
class CmaResult:
    best_x: np.ndarray
    best_f: float
    evaluations: int
    converged: bool
    history: list = field(default_factory=list)
    stop_reason: str = ""
    generations: int = 0
    best_evaluation: int = 1  # evaluation count at which best_f was first reached


@dataclass
class CmaState:
    """Snapshot handed to the per-generation callback."""

    generation: int
    mean: np.ndarray
    sigma: float
    C: np.ndarray
    evaluations: int
    best_f: float


def _check(x0, config: CmaConfig):
    x0 = np.array(x0, dtype=float).reshape(-1)
    n = x0.size
    if n < 1:
        raise BadDimension("CMA-ES needs at least one dimension")
    if not np.all(np.isfinite(x0)):
        raise BadDimension("starting point must be finite")
    lam = config.resolved_population(n)
    if lam < 4:
        raise BadConfig(f"population_size must be >= 4, got {lam}")
    if config.max_evals <= 0:
        raise BadConfig("max_evals must be positive")
    if not (config.sigma0 > 0 and math.isfinite(config.sigma0)):
        raise BadConfig("sigma0 must be a positive finite number")
    return x0, n, lam


def minimize(objective: Callable, x0, config: CmaConfig = CmaConfig(), *,
             vectorized: bool = False,
             callback: Optional[Callable[[CmaState], None]] = None) -> CmaResult:
    """Minimize ``objective`` starting from ``x0``.

    With ``vectorized=True`` the objective receives a (lambda, n) array and
    must return lambda values; otherwise it is called once per candidate.
    Non-finite objective values are replaced by a large finite penalty.
    """
    x0, n, lam = _check(x0, config)
    rng = np.random.default_rng(config.seed)

    def evaluate(X):
        if vectorized:
            f = np.asarray(objective(X), dtype=float).reshape(-1)
        else:
            f = np.array([objective(x) for x in X], dtype=float)
        return np.where(np.isfinite(f), f, PENALTY)

    mu = lam // 2
    w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / np.sum(w ** 2)
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chin = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n ** 2))

    mean = x0.copy()
    sigma = float(config.sigma0)
    C = np.eye(n)
    B = np.eye(n)
    D = np.ones(n)
    pc = np.zeros(n)
    ps = np.zeros(n)

    f0 = evaluate(x0[None, :])[0]
    evals = 1
    best_x, best_f = x0.copy(), float(f0)
    history = []
    converged, reason = False, "max_evals"
    gen = 0
    best_eval = 1

    if best_f <= config.target_f:
        return CmaResult(best_x, best_f, evals, True, history, "target_f", 0, 1)

    while evals + lam <= config.max_evals:
        Z = rng.standard_normal((lam, n))
        Y = (Z * D) @ B.T
        X = mean + sigma * Y
        f = evaluate(X)
        evals += lam
        gen += 1

        order = np.argsort(f, kind="stable")
        if f[order[0]] < best_f:
            best_f = float(f[order[0]])
            best_x = X[order[0]].copy()
            best_eval = evals - lam + 1 + int(order[0])
        history.append(best_f)

        y_sel = Y[order[:mu]]
        y_w = w @ y_sel
        mean = mean + sigma * y_w

        inv_sqrt_C_yw = B @ ((B.T @ y_w) / D)
        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * inv_sqrt_C_yw
        ps_norm = float(np.linalg.norm(ps))
        hsig = ps_norm / math.sqrt(1 - (1 - cs) ** (2 * gen)) / chin < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + (math.sqrt(cc * (2 - cc) * mueff) * y_w if hsig else 0.0)

        rank_mu = (y_sel * w[:, None]).T @ y_sel
        C = ((1 - c1 - cmu) * C
             + c1 * (np.outer(pc, pc) + (0.0 if hsig else cc * (2 - cc)) * C)
             + cmu * rank_mu)
        C = 0.5 * (C + C.T)
        sigma *= math.exp((cs / damps) * (ps_norm / chin - 1))

        evals_c, B = np.linalg.eigh(C)
        evals_c = np.maximum(evals_c, 1e-300)
        D = np.sqrt(evals_c)

        if callback is not None:
            callback(CmaState(gen, mean.copy(), sigma, C.copy(), evals, best_f))

        if best_f <= config.target_f:
            converged, reason = True, "target_f"
            break
        if sigma * math.sqrt(float(np.max(np.diag(C)))) < config.tol_x:
            converged, reason = True, "tol_x"
            break
        if evals_c[-1] / evals_c[0] > config.max_condition:
            reason = "condition"
            break
        if not math.isfinite(sigma) or sigma > 1e100:
            reason = "diverged"
            break

    return CmaResult(best_x, best_f, evals, converged, history, reason, gen, best_eval)
