"""
Estimação de covariâncias fatoradas em Kronecker (algoritmo flip-flop).
"""
import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import linalg

from core import (
    KroneckerCovariance,
    SpdError,
    DegenerateInputError,
    DimensionError,
    ConvergenceWarning,
    as_matrix,
    ensure_spd,
    logdet_spd,
)

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100


@dataclass
class FlipFlopReport:
    iterations: int = 0
    converged: bool = False
    loglik_trace: List[float] = field(default_factory=list)


def _stack(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray) and samples.ndim == 3:
        S = np.asarray(samples, dtype=np.float64)
    else:
        S = np.stack([as_matrix(s, "sample") for s in samples])
    if S.ndim != 3:
        raise DimensionError("amostras devem formar uma pilha (n, L, J)")
    if not np.all(np.isfinite(S)):
        raise ValueError("amostras contêm NaN/Inf")
    return S


def _cho(S: np.ndarray, name: str):
    try:
        return linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError as e:
        raise SpdError(
            f"fator {name} singular (amostras insuficientes ou dados degenerados)"
        ) from e


def loglik_kron(samples, temporal, spatial) -> float:
    """
    Log-verossimilhança normal matricial somada sobre as amostras:

        -(nLJ/2)·ln(2π) - (n/2)[J·ln|Σᵗ| + L·ln|Σˢ|] - ½ Σᵢ Tr(Σᵗ⁻¹ Nᵢ Σˢ⁻¹ Nᵢᵀ)

    A constante aditiva é a da densidade gaussiana completa.
    """
    S = _stack(samples)
    n, L, J = S.shape
    t = as_matrix(temporal, "temporal")
    s = as_matrix(spatial, "spatial")
    if t.shape != (L, L) or s.shape != (J, J):
        raise DimensionError(f"fatores {t.shape}, {s.shape} incompatíveis com amostras {S.shape}")

    ct = _cho(t, "temporal")
    cs = _cho(s, "spatial")

    # Tr(Σᵗ⁻¹ N Σˢ⁻¹ Nᵀ) = <Σᵗ⁻¹ N, N Σˢ⁻¹>
    left = linalg.cho_solve(ct, S.transpose(1, 0, 2).reshape(L, n * J)).reshape(L, n, J).transpose(1, 0, 2)
    right = linalg.cho_solve(cs, S.transpose(2, 0, 1).reshape(J, n * L)).reshape(J, n, L).transpose(1, 2, 0)
    quad = float(np.sum(left * right))

    return (
        -0.5 * n * L * J * np.log(2.0 * np.pi)
        - 0.5 * n * (J * logdet_spd(t) + L * logdet_spd(s))
        - 0.5 * quad
    )


def _temporal_step(S: np.ndarray, spatial: np.ndarray) -> np.ndarray:
    n, L, J = S.shape
    inv_s = linalg.cho_solve(_cho(spatial, "spatial"), np.eye(J))
    t = np.einsum("nij,jk,nlk->il", S, inv_s, S) / (n * J)
    return 0.5 * (t + t.T)


def _spatial_step(S: np.ndarray, temporal: np.ndarray) -> np.ndarray:
    n, L, J = S.shape
    inv_t = linalg.cho_solve(_cho(temporal, "temporal"), np.eye(L))
    s = np.einsum("nji,jk,nkl->il", S, inv_t, S) / (n * L)
    return 0.5 * (s + s.T)


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(old), np.finfo(float).tiny))


def flip_flop(
    samples,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> Tuple[KroneckerCovariance, FlipFlopReport]:
    """
    MLE alternado dos fatores (Σᵗ, Σˢ) a partir de amostras centradas.

    Parte de Σˢ = I, renormaliza trace(Σᵗ) = L a cada varredura e para quando a
    variação relativa (Frobenius) dos dois fatores fica abaixo de `tol`.

    Returns:
        (covariância normalizada, relatório com o traço da log-verossimilhança
        após cada meia-iteração)
    """
    S = _stack(samples)
    n, L, J = S.shape

    if n < 2:
        raise DegenerateInputError("flip-flop exige ao menos 2 amostras")
    if n * J <= L or n * L <= J:
        raise DegenerateInputError(
            f"n={n} amostras não identificam fatores {L}x{L} e {J}x{J} (exige nJ > L e nL > J)"
        )

    report = FlipFlopReport()
    spatial = np.eye(J)
    temporal = np.eye(L)

    for it in range(1, max_iter + 1):
        new_t = _temporal_step(S, spatial)
        report.loglik_trace.append(loglik_kron(S, new_t, spatial))

        new_s = _spatial_step(S, new_t)
        report.loglik_trace.append(loglik_kron(S, new_t, new_s))

        c = L / np.trace(new_t)
        new_t, new_s = new_t * c, new_s / c

        dt = _rel_change(new_t, temporal)
        ds = _rel_change(new_s, spatial)
        temporal, spatial = new_t, new_s
        report.iterations = it

        logger.debug("flip-flop it=%d Δt=%.3e Δs=%.3e ll=%.6f", it, dt, ds, report.loglik_trace[-1])

        if dt < tol and ds < tol:
            report.converged = True
            break

    if not report.converged:
        msg = f"flip-flop não convergiu em {max_iter} iterações"
        logger.warning(msg)
        warnings.warn(msg, ConvergenceWarning)

    cov = KroneckerCovariance.normalized(ensure_spd(temporal, "temporal"), ensure_spd(spatial, "spatial"))
    return cov, report


def regularize_spd(S, gamma: float) -> np.ndarray:
    """Encolhimento (1-γ)·S + γ·(Tr(S)/dim)·I."""
    S = as_matrix(S, "S")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma deve estar em [0, 1], recebido {gamma}")
    dim = S.shape[0]
    return (1.0 - gamma) * S + gamma * (np.trace(S) / dim) * np.eye(dim)


def center_samples(samples: Sequence[np.ndarray]) -> np.ndarray:
    """Remove a média entre amostras (responsabilidade de quem chama o flip-flop)."""
    S = _stack(samples)
    return S - S.mean(axis=0, keepdims=True)
