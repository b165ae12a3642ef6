"""(mu/mu_w, lambda)-CMA-ES with an ask/tell interface.

Minimization throughout. Strategy parameters follow Hansen's minimal
reference implementation (``purecma``) with positive recombination weights.
The eigendecomposition of C is refreshed after every ``tell``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from gdfo import checkpoint
from gdfo.errors import ConfigError, ContractError, FitnessWarning, ProtocolError


@dataclass(frozen=True)
class StrategyParams:
    dim: int
    popsize: int
    mu: int
    weights: np.ndarray
    mueff: float
    cc: float
    cs: float
    c1: float
    cmu: float
    damps: float
    chi_n: float

    @classmethod
    def default(cls, dim: int, popsize: int) -> "StrategyParams":
        n, lam = dim, popsize
        mu = lam // 2
        raw = np.array([math.log(lam / 2 + 0.5) - math.log(i + 1) if i < mu else 0.0 for i in range(lam)])
        weights = raw / raw[:mu].sum()
        mueff = weights[:mu].sum() ** 2 / (weights[:mu] ** 2).sum()
        cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        cs = (mueff + 2) / (n + mueff + 5)
        c1 = 2 / ((n + 1.3) ** 2 + mueff)
        cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        damps = 2 * mueff / lam + 0.3 + cs
        chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))
        return cls(n, lam, mu, weights, mueff, cc, cs, c1, cmu, damps, chi_n)


class CmaState:
    """Mutable CMA-ES state. Create with :func:`init`."""

    def __init__(self, dim: int, sigma0: float, popsize: int, seed: int):
        if dim < 1:
            raise ConfigError(f"CMA-ES dimension must be >= 1, got {dim}")
        if not sigma0 > 0:
            raise ConfigError(f"sigma0 must be positive, got {sigma0}")
        if popsize < 2:
            raise ConfigError(f"population size must be >= 2, got {popsize}")
        self.params = StrategyParams.default(dim, popsize)
        self.dim = dim
        self.mean = np.zeros(dim)
        self.sigma = float(sigma0)
        self.C = np.eye(dim)
        self.B = np.eye(dim)
        self.D = np.ones(dim)  # sqrt of eigenvalues of C
        self.p_sigma = np.zeros(dim)
        self.p_c = np.zeros(dim)
        self.generation = 0
        self.evaluations = 0
        self.eigen_repairs = 0
        self.best_x: np.ndarray | None = None
        self.best_f = math.inf
        self.rng = np.random.default_rng(seed)
        self._pending: np.ndarray | None = None
        self._rng_before_ask: dict | None = None

    @property
    def population_size(self) -> int:
        return self.params.popsize

    @property
    def weights(self) -> np.ndarray:
        return self.params.weights

    @property
    def awaiting_tell(self) -> bool:
        return self._pending is not None

    def _sample(self, count: int) -> np.ndarray:
        z = self.rng.standard_normal((count, self.dim))
        return self.mean + self.sigma * (z * self.D) @ self.B.T

    def ask(self) -> list[np.ndarray]:
        if self._pending is not None:
            raise ProtocolError("ask called twice without an intervening tell")
        self._rng_before_ask = self.rng.bit_generator.state
        self._pending = self._sample(self.params.popsize)
        return [x.copy() for x in self._pending]

    def cancel_ask(self) -> None:
        """Withdraw the outstanding ask as if it never happened."""
        if self._pending is None:
            raise ProtocolError("no outstanding ask to cancel")
        self.rng.bit_generator.state = self._rng_before_ask
        self._pending = None

    def tell(self, candidates, fitnesses) -> None:
        if self._pending is None:
            raise ProtocolError("tell called without an outstanding ask")
        X = np.asarray(candidates, dtype=np.float64)
        f = np.asarray(fitnesses, dtype=np.float64)
        if X.shape != self._pending.shape or f.shape != (X.shape[0],):
            raise ContractError(f"tell expects {self.params.popsize} candidates and fitnesses, "
                                f"got {X.shape} and {f.shape}")
        bad = ~np.isfinite(f)
        if bad.any():
            warnings.warn(f"{int(bad.sum())} non-finite fitness value(s) ranked worst", FitnessWarning,
                          stacklevel=2)
            f = np.where(bad, np.inf, f)
        self._pending = None
        self._update(X, f)

    def _update(self, X: np.ndarray, f: np.ndarray) -> None:
        par = self.params
        n = self.dim
        self.generation += 1
        self.evaluations += len(f)
        order = np.argsort(f, kind="stable")
        if f[order[0]] < self.best_f:
            self.best_f = float(f[order[0]])
            self.best_x = X[order[0]].copy()

        old = self.mean
        w = par.weights[: par.mu]
        selected = X[order[: par.mu]]
        self.mean = w @ selected
        y = (self.mean - old) / self.sigma

        inv_sqrt = (self.B / self.D) @ self.B.T
        self.p_sigma = (1 - par.cs) * self.p_sigma + math.sqrt(par.cs * (2 - par.cs) * par.mueff) * (inv_sqrt @ y)
        ps_norm = float(np.linalg.norm(self.p_sigma))
        hsig = ps_norm / math.sqrt(1 - (1 - par.cs) ** (2 * self.generation)) < (1.4 + 2 / (n + 1)) * par.chi_n
        self.p_c = (1 - par.cc) * self.p_c + hsig * math.sqrt(par.cc * (2 - par.cc) * par.mueff) * y

        c1a = par.c1 * (1 - (1 - hsig**2) * par.cc * (2 - par.cc))
        steps = (selected - old) / self.sigma
        rank_mu = (steps * w[:, None]).T @ steps
        self.C = ((1 - c1a - par.cmu * w.sum()) * self.C
                  + par.c1 * np.outer(self.p_c, self.p_c)
                  + par.cmu * rank_mu)
        self.sigma *= math.exp(min(1.0, (par.cs / par.damps) * (ps_norm / par.chi_n - 1)))
        self._refresh_eigen()

    def _refresh_eigen(self) -> None:
        self.C = (self.C + self.C.T) / 2
        evals, B = np.linalg.eigh(self.C)
        floor = 1e-14 * max(float(evals.max()), 1e-300)
        if evals.min() <= floor:
            self.eigen_repairs += 1
            evals = np.maximum(evals, floor)
            self.C = (B * evals) @ B.T
            self.C = (self.C + self.C.T) / 2
        self.B, self.D = B, np.sqrt(evals)

    # snapshot / restore

    def to_checkpoint(self) -> tuple[dict, dict]:
        if self._pending is not None:
            raise ProtocolError("cannot snapshot between ask and tell")
        scalars = {
            "dim": self.dim,
            "popsize": self.params.popsize,
            "sigma": self.sigma,
            "generation": self.generation,
            "evaluations": self.evaluations,
            "eigen_repairs": self.eigen_repairs,
            "best_f": self.best_f if math.isfinite(self.best_f) else None,
            "rng_state": json.dumps(self.rng.bit_generator.state, sort_keys=True),
        }
        tensors = {"mean": self.mean, "C": self.C, "p_sigma": self.p_sigma, "p_c": self.p_c}
        if self.best_x is not None:
            tensors["best_x"] = self.best_x
        return scalars, tensors

    @classmethod
    def from_checkpoint(cls, scalars: dict, tensors: dict) -> "CmaState":
        state = cls(int(scalars["dim"]), float(scalars["sigma"]), int(scalars["popsize"]), seed=0)
        state.generation = int(scalars["generation"])
        state.evaluations = int(scalars["evaluations"])
        state.eigen_repairs = int(scalars["eigen_repairs"])
        state.best_f = math.inf if scalars["best_f"] is None else float(scalars["best_f"])
        state.rng.bit_generator.state = json.loads(scalars["rng_state"])
        state.mean = np.array(tensors["mean"])
        state.C = np.array(tensors["C"])
        state.p_sigma = np.array(tensors["p_sigma"])
        state.p_c = np.array(tensors["p_c"])
        state.best_x = np.array(tensors["best_x"]) if "best_x" in tensors else None
        state._refresh_eigen()
        return state

    def save(self, path) -> str:
        scalars, tensors = self.to_checkpoint()
        return checkpoint.save(path, "cmaes", scalars, tensors)

    @classmethod
    def load(cls, path) -> "CmaState":
        ckpt = checkpoint.load(path, kind="cmaes")
        return cls.from_checkpoint(ckpt.scalars, ckpt.tensors)


def init(dim: int, sigma0: float = 1.0, population_size: int = 8, seed: int = 0) -> CmaState:
    return CmaState(dim, sigma0, population_size, seed)


def ask(state: CmaState) -> list[np.ndarray]:
    return state.ask()


def tell(state: CmaState, candidates, fitnesses) -> None:
    state.tell(candidates, fitnesses)


def minimize(fn, dim: int, sigma0: float = 1.0, population_size: int = 8, seed: int = 0,
             max_evals: int = 10_000, target: float = -math.inf) -> CmaState:
    """Run ask/tell until ``max_evals`` evaluations or ``best_f <= target``."""
    state = init(dim, sigma0, population_size, seed)
    while state.evaluations + population_size <= max_evals and state.best_f > target:
        xs = state.ask()
        state.tell(xs, [fn(x) for x in xs])
    return state
