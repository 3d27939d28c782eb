"""
Filtragem espacial por PCA: projeção dos dados, do lead-field e do ruído
sobre os J primeiros eixos principais do espaço de sensores.
"""
import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import linalg

from core import DegenerateInputError, DimensionError, TrialSet, as_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpatialFilter:
    basis: np.ndarray      # J₀ × J, colunas ortonormais
    inertia: np.ndarray    # fração de inércia por componente

    @property
    def total_inertia(self) -> float:
        return float(np.sum(self.inertia))

    @property
    def n_channels(self) -> int:
        return self.basis.shape[0]

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    @classmethod
    def identity(cls, n_channels: int) -> "SpatialFilter":
        return cls(np.eye(n_channels), np.full(n_channels, 1.0 / n_channels))


def _pooled(trials: Union[TrialSet, Sequence[np.ndarray], np.ndarray]) -> np.ndarray:
    if isinstance(trials, TrialSet):
        return trials.pooled()
    if isinstance(trials, np.ndarray) and trials.ndim == 2:
        return as_matrix(trials, "trials")
    return np.vstack([as_matrix(t, "trial") for t in trials])


def fit_spatial_pca(trials, n_components: int) -> SpatialFilter:
    """
    PCA do segundo momento (média removida) dos vetores de sensores, agrupando
    todos os ensaios e instantes.

    Convenção de sinal: a maior entrada (em módulo) de cada coluna é positiva.
    """
    X = _pooled(trials)
    n_channels = X.shape[1]
    if not 1 <= n_components <= n_channels:
        raise DimensionError(f"n_components={n_components} fora de [1, {n_channels}]")

    X = X - X.mean(axis=0, keepdims=True)
    C = X.T @ X / X.shape[0]
    total = np.trace(C)
    if total <= 0:
        raise DegenerateInputError("dados nulos: PCA sem inércia")

    w, V = linalg.eigh(C)
    order = np.argsort(w)[::-1]
    w = np.clip(w[order], 0.0, None)
    V = V[:, order[:n_components]]

    pivot = np.argmax(np.abs(V), axis=0)
    V = V * np.sign(V[pivot, np.arange(n_components)])

    f = SpatialFilter(V, w[:n_components] / total)
    logger.info("PCA espacial: %d componentes, inércia capturada %.4f", n_components, f.total_inertia)
    return f


def apply_filter(M, f: SpatialFilter) -> np.ndarray:
    """M (linhas × J₀) → M·basis (linhas × J)"""
    M = as_matrix(M, "M")
    if M.shape[1] != f.n_channels:
        raise DimensionError(f"M tem {M.shape[1]} canais, filtro espera {f.n_channels}")
    return M @ f.basis


def reduce_leadfield(G0, f: SpatialFilter) -> np.ndarray:
    """G₀ (J₀ × K) → basisᵀ·G₀ (J × K)"""
    G0 = as_matrix(G0, "G0")
    if G0.shape[0] != f.n_channels:
        raise DimensionError(f"G0 tem {G0.shape[0]} sensores, filtro espera {f.n_channels}")
    return f.basis.T @ G0
