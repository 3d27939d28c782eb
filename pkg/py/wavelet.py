"""
Transformada wavelet ortonormal (Daubechies, periodizada) aplicada canal a canal,
máscara de efeitos de borda e seleção a priori dos coeficientes.

Layout dos coeficientes (comprimento N = padded_length, L níveis):
    [a_L, d_L, d_{L-1}, ..., d_1], com |a_L| = |d_L| = N/2^L e |d_j| = N/2^j.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.special import comb

from core import DimensionError, as_matrix

logger = logging.getLogger(__name__)

MASK_TOL = 1e-12


def next_pow2(n: int) -> int:
    if n < 1:
        return 1
    return 1 << (int(n) - 1).bit_length()


@lru_cache(maxsize=None)
def _daubechies(taps: int) -> tuple:
    p = taps // 2

    # P(y) = Σ_{k<p} C(p-1+k, k)·y^k com y = -(z-1)²/(4z); multiplicado por z^(p-1)
    poly = np.zeros(2 * p - 1)
    for k in range(p):
        term = np.array([1.0])
        for _ in range(2 * k):
            term = np.convolve(term, [1.0, -1.0])
        term = comb(p - 1 + k, k, exact=True) * (-0.25) ** k * term
        term = np.concatenate([term, np.zeros(p - 1 - k)])
        poly[len(poly) - len(term):] += term

    roots = np.roots(poly) if len(poly) > 1 else np.array([])
    inside = roots[np.abs(roots) < 1.0]
    q = np.real(np.atleast_1d(np.poly(inside)))

    h = q
    for _ in range(p):
        h = np.convolve(h, [1.0, 1.0])
    h = h * (np.sqrt(2.0) / h.sum())
    return tuple(float(c) for c in h)


def daubechies_filter(taps: int) -> np.ndarray:
    """
    Filtro passa-baixas ortonormal de Daubechies com `taps` coeficientes
    (taps/2 momentos nulos), obtido por fatoração espectral.
    """
    if taps < 2 or taps % 2:
        raise ValueError(f"número de coeficientes do filtro deve ser par e ≥ 2, recebido {taps}")
    return np.array(_daubechies(int(taps)))


def quadrature_mirror(h: np.ndarray) -> np.ndarray:
    """g[n] = (-1)^n · h[F-1-n]"""
    F = len(h)
    return ((-1.0) ** np.arange(F)) * h[::-1]


@dataclass(frozen=True)
class WaveletConfig:
    taps: int = 6
    levels: Optional[int] = None
    padded_length: int = 256

    def __post_init__(self):
        N = self.padded_length
        if N < 1 or N & (N - 1):
            raise ValueError(f"padded_length deve ser potência de 2, recebido {N}")
        if self.taps < 2 or self.taps % 2:
            raise ValueError(f"taps deve ser par e ≥ 2, recebido {self.taps}")
        max_levels = int(np.log2(N))
        if self.levels is not None and not 0 <= self.levels <= max_levels:
            raise ValueError(f"levels deve estar em [0, {max_levels}], recebido {self.levels}")

    @classmethod
    def for_length(cls, n_samples: int, taps: int = 6, levels: Optional[int] = None) -> "WaveletConfig":
        return cls(taps=taps, levels=levels, padded_length=next_pow2(n_samples))

    @property
    def depth(self) -> int:
        return int(np.log2(self.padded_length)) if self.levels is None else self.levels

    def band_sizes(self):
        """Tamanhos das bandas na ordem do layout."""
        N, L = self.padded_length, self.depth
        return [N >> L] + [N >> j for j in range(L, 0, -1)]


def _pad(x: np.ndarray, N: int) -> np.ndarray:
    if x.shape[0] > N:
        raise DimensionError(f"sinal com {x.shape[0]} amostras excede padded_length={N}")
    if x.shape[0] == N:
        return x.copy()
    pad = np.zeros((N - x.shape[0],) + x.shape[1:])
    return np.concatenate([x, pad], axis=0)


def _analysis_step(x: np.ndarray, h: np.ndarray, g: np.ndarray):
    n = x.shape[0]
    idx = (2 * np.arange(n // 2)[:, None] + np.arange(len(h))[None, :]) % n
    blocks = x[idx]
    return np.tensordot(h, blocks, axes=([0], [1])), np.tensordot(g, blocks, axes=([0], [1]))


def _synthesis_step(cA: np.ndarray, cD: np.ndarray, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = cA.shape[0]
    n = 2 * half
    idx = (2 * np.arange(half)[:, None] + np.arange(len(h))[None, :]) % n
    out = np.zeros((n,) + cA.shape[1:])
    contrib = h[None, :, None] * cA[:, None, :] + g[None, :, None] * cD[:, None, :]
    np.add.at(out, idx, contrib)
    return out


def _as_columns(x) -> tuple:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise DimensionError(f"esperado vetor ou matriz (tempo × canais), recebido shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("sinal contém NaN/Inf")
    return (arr[:, None], True) if arr.ndim == 1 else (arr, False)


def dwt_forward(signal, cfg: WaveletConfig) -> np.ndarray:
    """
    Zero-padding até cfg.padded_length e transformada piramidal periodizada.
    Aceita vetor ou matriz (tempo × canais); canais são transformados de forma independente.
    """
    x, flat = _as_columns(signal)
    N = cfg.padded_length
    x = _pad(x, N)

    h = daubechies_filter(cfg.taps)
    g = quadrature_mirror(h)

    details = []
    approx = x
    for _ in range(cfg.depth):
        approx, detail = _analysis_step(approx, h, g)
        details.append(detail)

    out = np.concatenate([approx] + details[::-1], axis=0)
    return out[:, 0] if flat else out


def dwt_inverse(coeffs, cfg: WaveletConfig) -> np.ndarray:
    c, flat = _as_columns(coeffs)
    N = cfg.padded_length
    if c.shape[0] != N:
        raise DimensionError(f"esperado {N} coeficientes, recebido {c.shape[0]}")

    h = daubechies_filter(cfg.taps)
    g = quadrature_mirror(h)

    sizes = cfg.band_sizes()
    approx = c[:sizes[0]]
    offset = sizes[0]
    for size in sizes[1:]:
        detail = c[offset:offset + size]
        approx = _synthesis_step(approx, detail, h, g)
        offset += size

    return approx[:, 0] if flat else approx


def _band_offsets(cfg: WaveletConfig) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(cfg.band_sizes())[:-1]])


def boundary_mask(n_samples: int, cfg: WaveletConfig) -> np.ndarray:
    """
    Marca os coeficientes cuja função de base toca a região de zero-padding
    [n_samples, N) ou dá a volta periodicamente no fim da grade.
    """
    N = cfg.padded_length
    if not 0 <= n_samples <= N:
        raise DimensionError(f"n_samples={n_samples} fora de [0, {N}]")

    basis = np.abs(dwt_inverse(np.eye(N), cfg))
    padded = np.zeros(N)
    padded[n_samples:] = 1.0
    mask = basis.T @ padded > MASK_TOL

    # mesma base numa grade 2N: suporte que alcança [N, 2N) dá a volta na grade N
    wide = WaveletConfig(taps=cfg.taps, levels=cfg.depth, padded_length=2 * N)
    sizes = np.asarray(cfg.band_sizes())
    band = np.repeat(np.arange(len(sizes)), sizes)
    pos = np.arange(N) - _band_offsets(cfg)[band]
    wide_index = 2 * _band_offsets(cfg)[band] + pos

    unit = np.zeros((2 * N, N))
    unit[wide_index, np.arange(N)] = 1.0
    wide_basis = np.abs(dwt_inverse(unit, wide))
    wraps = np.any(wide_basis[N:] > MASK_TOL, axis=0)

    return mask | wraps


@dataclass(frozen=True)
class CoefficientSelection:
    indices: np.ndarray
    padded_length: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise ValueError("índices selecionados repetidos")
        if idx.size and (idx.min() < 0 or idx.max() >= self.padded_length):
            raise ValueError(f"índices fora de [0, {self.padded_length})")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)


def coefficient_energy(coeff_trials) -> np.ndarray:
    """Energia média por posição (média sobre ensaios e canais)."""
    arr = np.asarray(coeff_trials, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :, None]
    elif arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"esperado (ensaios, N, canais), recebido shape {arr.shape}")
    return np.mean(arr ** 2, axis=(0, 2))


def select_coefficients(coeff_trials, mask, n_coeffs: int) -> CoefficientSelection:
    """
    Seleciona as `n_coeffs` posições não mascaradas de maior energia média;
    empates resolvidos pelo menor índice. Índices devolvidos em ordem crescente.
    """
    energy = coefficient_energy(coeff_trials)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != energy.shape:
        raise DimensionError(f"máscara {mask.shape} incompatível com coeficientes {energy.shape}")

    candidates = np.flatnonzero(~mask)
    if n_coeffs < 1 or n_coeffs > len(candidates):
        raise ValueError(
            f"n_coeffs={n_coeffs} inválido: {len(candidates)} posições disponíveis fora da máscara"
        )

    order = np.lexsort((candidates, -energy[candidates]))
    chosen = np.sort(candidates[order[:n_coeffs]])

    logger.debug("Coeficientes selecionados: %s", chosen.tolist())
    return CoefficientSelection(chosen, len(energy))


def embed_coefficients(selected, sel: CoefficientSelection) -> np.ndarray:
    W = as_matrix(selected, "selected")
    if W.shape[0] != len(sel):
        raise DimensionError(f"{W.shape[0]} linhas para {len(sel)} posições selecionadas")
    full = np.zeros((sel.padded_length, W.shape[1]))
    full[sel.indices] = W
    return full


def extract_coefficients(full, sel: CoefficientSelection) -> np.ndarray:
    C = as_matrix(full, "full")
    if C.shape[0] != sel.padded_length:
        raise DimensionError(f"esperado {sel.padded_length} linhas, recebido {C.shape[0]}")
    return C[sel.indices].copy()


@dataclass(frozen=True)
class TimeBasis:
    """Redução temporal completa: padding, DWT e seleção (e o caminho inverso)."""

    cfg: WaveletConfig
    selection: CoefficientSelection
    n_samples: int

    @property
    def size(self) -> int:
        return len(self.selection)

    def reduce(self, Z) -> np.ndarray:
        """(T₀ × canais) → (L × canais)"""
        Z = as_matrix(Z, "Z")
        if Z.shape[0] != self.n_samples:
            raise DimensionError(f"esperado {self.n_samples} amostras, recebido {Z.shape[0]}")
        return extract_coefficients(dwt_forward(Z, self.cfg), self.selection)

    def synthesize(self, W) -> np.ndarray:
        """(L × K) → (T₀ × K)"""
        full = embed_coefficients(W, self.selection)
        return dwt_inverse(full, self.cfg)[: self.n_samples]


def build_time_basis(trials: Sequence[np.ndarray], cfg: WaveletConfig, n_coeffs: int) -> TimeBasis:
    """Ajusta a seleção de coeficientes sobre os ensaios (tempo × canais)."""
    if not trials:
        raise ValueError("nenhum ensaio para selecionar coeficientes")
    n_samples = trials[0].shape[0]
    coeffs = np.stack([dwt_forward(t, cfg) for t in trials])
    mask = boundary_mask(n_samples, cfg)
    logger.info(
        "Máscara de borda: %d de %d coeficientes excluídos", int(mask.sum()), cfg.padded_length
    )
    sel = select_coefficients(coeffs, mask, n_coeffs)
    return TimeBasis(cfg, sel, n_samples)
