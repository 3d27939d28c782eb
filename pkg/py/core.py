"""
Álgebra densa e de produtos de Kronecker usada por todos os módulos.

Convenção de vetorização: vec(M) empilha as LINHAS de M (z = vec(Zᵀ) no
sentido usual de empilhar colunas). Com essa convenção,
(A ⊗ B)·vec(M) = vec(A·M·Bᵀ), e nenhuma rotina deste pacote materializa a
matriz de Kronecker completa.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12

NORMALIZATION_TRACE = "trace"
NORMALIZATION_NONE = "none"


class DimensionError(ValueError):
    pass


class SpdError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class ConvergenceWarning(UserWarning):
    pass


def as_matrix(M, name: str = "M") -> np.ndarray:
    """Converte para ndarray float64 2-D e exige entradas finitas."""
    arr = np.asarray(M, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} deve ser 2-D, recebido shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contém NaN/Inf")
    return arr


def vec(M) -> np.ndarray:
    M = as_matrix(M)
    return M.reshape(-1).copy()


def unvec(v, rows: int, cols: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size != rows * cols:
        raise DimensionError(f"vetor de tamanho {v.size} não forma {rows}x{cols}")
    return v.reshape(rows, cols).copy()


def _check_square(A: np.ndarray, name: str) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"{name} deve ser quadrada, recebido shape {A.shape}")


def is_symmetric(S: np.ndarray, tol: float = SYMMETRY_TOL) -> bool:
    scale = max(1.0, float(np.max(np.abs(S))) if S.size else 1.0)
    return bool(np.max(np.abs(S - S.T), initial=0.0) <= tol * scale)


def ensure_spd(S, name: str = "S") -> np.ndarray:
    """Valida simetria (tolerância relativa) e positividade via Cholesky."""
    S = as_matrix(S, name)
    _check_square(S, name)
    if not is_symmetric(S):
        raise SpdError(f"{name} não é simétrica")
    try:
        linalg.cholesky(S, lower=True)
    except linalg.LinAlgError as e:
        raise SpdError(f"{name} não é definida positiva: {e}") from e
    return 0.5 * (S + S.T)


def kron_apply(A, B, M) -> np.ndarray:
    """(A ⊗ B)·vec(M) devolvido em forma matricial, isto é A·M·Bᵀ."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    M = as_matrix(M, "M")
    _check_square(A, "A")
    _check_square(B, "B")
    if M.shape != (A.shape[0], B.shape[0]):
        raise DimensionError(
            f"M {M.shape} incompatível com A {A.shape} e B {B.shape}"
        )
    return A @ M @ B.T


def trace_quad(U, A, B) -> float:
    """Tr(Uᵀ·A·U·B)."""
    U = as_matrix(U, "U")
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    _check_square(A, "A")
    _check_square(B, "B")
    if U.shape != (A.shape[0], B.shape[0]):
        raise DimensionError(
            f"U {U.shape} incompatível com A {A.shape} e B {B.shape}"
        )
    return float(np.sum(U * (A @ U @ B)))


def matrix_exp(S) -> np.ndarray:
    """Exponencial de matriz simétrica via decomposição espectral."""
    S = as_matrix(S, "S")
    _check_square(S, "S")
    if not is_symmetric(S):
        raise SpdError("matrix_exp exige entrada simétrica")
    w, V = linalg.eigh(0.5 * (S + S.T))
    E = (V * np.exp(w)) @ V.T
    return 0.5 * (E + E.T)


def logdet_spd(S: np.ndarray) -> float:
    c, _ = linalg.cho_factor(S, lower=True)
    return float(2.0 * np.sum(np.log(np.diag(c))))


@dataclass(frozen=True)
class KroneckerCovariance:
    """Covariância temporal ⊗ espacial; por padrão trace(temporal) = L."""

    temporal: np.ndarray
    spatial: np.ndarray
    normalization: str = NORMALIZATION_TRACE

    def __post_init__(self):
        t = ensure_spd(self.temporal, "temporal")
        s = ensure_spd(self.spatial, "spatial")
        if self.normalization not in (NORMALIZATION_TRACE, NORMALIZATION_NONE):
            raise ValueError(f"normalização desconhecida: {self.normalization}")
        if self.normalization == NORMALIZATION_TRACE:
            L = t.shape[0]
            if abs(np.trace(t) - L) > 1e-9 * L:
                raise ValueError(
                    f"trace(temporal) = {np.trace(t):.6g}, esperado {L}"
                )
        object.__setattr__(self, "temporal", t)
        object.__setattr__(self, "spatial", s)

    @classmethod
    def normalized(cls, temporal, spatial) -> "KroneckerCovariance":
        """Resolve a ambiguidade (cΣᵗ, Σˢ/c) fixando trace(Σᵗ) = L."""
        t = as_matrix(temporal, "temporal")
        s = as_matrix(spatial, "spatial")
        c = t.shape[0] / np.trace(t)
        return cls(t * c, s / c, NORMALIZATION_TRACE)

    @property
    def shape(self):
        return self.temporal.shape[0], self.spatial.shape[0]

    def dense(self) -> np.ndarray:
        return np.kron(self.temporal, self.spatial)


def sample_matrix_normal(mean, cov: KroneckerCovariance, rng, size: Optional[int] = None) -> np.ndarray:
    """
    Amostra mean + Cₜ·Z·Cₛᵀ, Z com entradas N(0,1) i.i.d.

    Args:
        rng: gerador com `standard_normal(shape)` (ex.: numpy.random.Generator)
        size: se informado, devolve uma pilha (size, L, J)
    """
    mean = as_matrix(mean, "mean")
    if mean.shape != cov.shape:
        raise DimensionError(f"mean {mean.shape} incompatível com covariância {cov.shape}")
    try:
        ct = linalg.cholesky(cov.temporal, lower=True)
        cs = linalg.cholesky(cov.spatial, lower=True)
    except linalg.LinAlgError as e:
        raise SpdError(f"fatoração falhou: {e}") from e

    if size is None:
        Z = np.asarray(rng.standard_normal(mean.shape), dtype=np.float64)
        return mean + ct @ Z @ cs.T

    Z = np.asarray(rng.standard_normal((size,) + mean.shape), dtype=np.float64)
    return mean[None] + np.einsum("ij,njk,lk->nil", ct, Z, cs)


@dataclass
class TrialSet:
    """Coleção de ensaios, cada um (tempo × canais), com taxa de amostragem."""

    trials: List[np.ndarray] = field(default_factory=list)
    sfreq: float = 1.0

    def __post_init__(self):
        self.trials = [as_matrix(t, "trial") for t in self.trials]
        if self.trials:
            n_channels = {t.shape[1] for t in self.trials}
            if len(n_channels) != 1:
                raise DimensionError(f"ensaios com números de canais diferentes: {n_channels}")

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def n_channels(self) -> int:
        return self.trials[0].shape[1] if self.trials else 0

    def stacked(self) -> np.ndarray:
        return np.stack(self.trials)

    def pooled(self) -> np.ndarray:
        """Todas as amostras (ensaios × tempo) empilhadas em linhas."""
        return np.vstack(self.trials)

    def mean(self) -> np.ndarray:
        return np.mean(self.stacked(), axis=0)


def spread_seeds(master_seed: int, n: int) -> List[int]:
    """Sementes por ensaio derivadas de forma determinística da semente mestre."""
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def as_index_array(values: Sequence[int]) -> np.ndarray:
    return np.asarray(list(values), dtype=np.int64)
