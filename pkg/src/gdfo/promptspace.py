"""Prompt algebra: initial prompt, random projection and the fused prompt.

The final prompt mixes a gradient-trained prompt with a derivative-free one::

    p = alpha * p_gd + (1 - alpha) * (p0 + A @ z)
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from gdfo.errors import ConfigError, ContractError, DimensionError, NumericError
from gdfo.models import ModelParams

ROLES = ("p0", "p_gd", "az", "combined", "random_pr")


@dataclass(frozen=True)
class PromptVector:
    values: np.ndarray
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown prompt role {self.role!r}")
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DimensionError(f"prompt must be a flat vector, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericError(f"{self.role} prompt has non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


@dataclass(frozen=True)
class ProjectionMatrix:
    """Fixed random D x d matrix with i.i.d. Normal(0, scale^2) entries."""

    values: np.ndarray
    scale: float
    seed: int
    distribution: str = "normal"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_checksum", _digest(values))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def checksum(self) -> str:
        return _digest(self.values)

    def verify(self) -> None:
        if self.checksum() != self._checksum:
            raise ContractError("projection matrix changed after creation")

    def project(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.values.shape[1]:
            raise DimensionError(f"z has width {z.shape[-1]}, projection expects {self.values.shape[1]}")
        return z @ self.values.T


def sample_prompt_tokens(vocab_size: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(vocab_size, size=n)


def sample_initial_prompt(params: ModelParams, n: int, seed: int, role: str = "p0") -> PromptVector:
    """Concatenate the embeddings of ``n`` uniformly drawn vocabulary tokens."""
    if n != params.n_prompt_tokens:
        raise DimensionError(f"n={n} differs from the model's {params.n_prompt_tokens} prompt tokens")
    return prompt_from_table(params.embeddings, n, seed, role)


def prompt_from_table(embeddings: np.ndarray, n: int, seed: int, role: str = "p0") -> PromptVector:
    """Same draw as :func:`sample_initial_prompt`, given only the embedding table."""
    ids = sample_prompt_tokens(embeddings.shape[0], n, np.random.default_rng(seed))
    return PromptVector(embeddings[ids].reshape(-1), role)


def make_projection(D: int, d: int, seed: int, scale: float | None = None) -> ProjectionMatrix:
    """Random projection; ``scale`` defaults to 1/sqrt(d)."""
    if d < 1 or D < d:
        raise ConfigError(f"projection needs D >= d >= 1, got D={D}, d={d}")
    scale = 1.0 / np.sqrt(d) if scale is None else float(scale)
    if not scale > 0:
        raise ConfigError("projection scale must be positive")
    values = np.random.default_rng(seed).normal(0.0, scale, size=(D, d))
    return ProjectionMatrix(values, scale, seed)


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")


def combine_values(p_gd: np.ndarray, p0: np.ndarray, A: ProjectionMatrix, z, alpha: float) -> np.ndarray:
    """Array form of :func:`combine`; ``p_gd`` may carry a leading batch axis."""
    _check_alpha(alpha)
    p_gd = np.asarray(p_gd, dtype=np.float64)
    az = A.project(z)
    if p_gd.shape[-1] != p0.shape[-1] or az.shape[-1] != p0.shape[-1]:
        raise ContractError(f"prompt widths differ: p_gd {p_gd.shape}, p0 {p0.shape}, Az {az.shape}")
    # endpoints are exact: no 0 * x terms that could turn -0.0 or inf into noise
    if alpha == 1.0:
        return p_gd.copy()
    if alpha == 0.0:
        return np.broadcast_to(p0 + az, np.broadcast_shapes(p_gd.shape, az.shape)).copy()
    return alpha * p_gd + (1.0 - alpha) * (p0 + az)


def combine(p_gd: PromptVector, p0: PromptVector, A: ProjectionMatrix, z, alpha: float) -> PromptVector:
    return PromptVector(combine_values(p_gd.values, p0.values, A, z, alpha), "combined")
