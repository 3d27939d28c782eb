"""
Estudo de simulação: geração de ensaios sintéticos, métricas (ι, κ, AUC, AUC
restrita) e agregação no formato critérios × estágios.
"""
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from core import (
    DegenerateInputError,
    DimensionError,
    KroneckerCovariance,
    as_matrix,
    sample_matrix_normal,
)
from cortex import CortexGraph, grow_patch
from matrix_io import read_csv_vector, write_csv_matrix

logger = logging.getLogger(__name__)

BUILTIN_SLOWWAVE = "builtin:slowwave"

METRICS = ["iota", "auc", "auc_restricted"]
STATISTICS = ["mean", "median", "std"]
STAGE_ORDER = ["G", "GM", "uGM"]


# ---------------------------------------------------------------------------
# Perfil temporal
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeProfile:
    samples: np.ndarray
    sfreq: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(s)):
            raise ValueError("perfil temporal contém NaN/Inf")
        if not np.any(s):
            raise DegenerateInputError("perfil temporal nulo")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def slow_wave(cls, sfreq: float = 50.0, duration: float = 4.0) -> "TimeProfile":
        """Lobo de cosseno de 1 Hz amortecido, centrado no meio da janela."""
        n = int(round(duration * sfreq))
        t = np.arange(n) / sfreq
        center = duration / 2.0
        phi = -np.cos(2.0 * np.pi * (t - center)) * np.exp(-(((t - center) / 0.5) ** 2))
        return cls(phi, sfreq)

    @classmethod
    def from_csv(cls, path: Union[str, Path], sfreq: float) -> "TimeProfile":
        return cls(read_csv_vector(path), sfreq)

    def to_csv(self, path: Union[str, Path]) -> Path:
        return write_csv_matrix(path, self.samples)


def load_profile(source: str, sfreq: float, duration: float) -> TimeProfile:
    if source == BUILTIN_SLOWWAVE:
        return TimeProfile.slow_wave(sfreq, duration)
    return TimeProfile.from_csv(source, sfreq)


# ---------------------------------------------------------------------------
# Lead-field sintético e fontes de ruído
# ---------------------------------------------------------------------------

def sensor_positions(vertices, n_sensors: int, rng, radius_factor: float = 1.2) -> np.ndarray:
    """Sensores sorteados uniformemente numa esfera que envolve a malha."""
    V = np.asarray(vertices, dtype=np.float64)
    center = V.mean(axis=0)
    radius = radius_factor * np.max(np.linalg.norm(V - center, axis=1))
    d = rng.standard_normal((n_sensors, V.shape[1]))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return center + radius * d


def synthetic_leadfield(vertices, sensors, width: Optional[float] = None) -> np.ndarray:
    """
    G₀[i, k] = exp(-‖sᵢ - v_k‖² / (2·w²)): cada sensor é uma soma gaussiana
    ponderada dos vértices.
    """
    V = np.asarray(vertices, dtype=np.float64)
    S = np.asarray(sensors, dtype=np.float64)
    if width is None:
        width = 0.5 * np.max(np.linalg.norm(V - V.mean(axis=0), axis=1))
    d2 = cdist(S, V, "sqeuclidean")
    return np.exp(-d2 / (2.0 * width ** 2))


def sensor_noise_covariance(n_samples: int, sensors, ar: float = 0.7, length: float = 0.5) -> KroneckerCovariance:
    """Fator temporal AR(1) ar^|i-j| e fator espacial exp(-dist/length) sobre os sensores."""
    if not -1.0 < ar < 1.0:
        raise ValueError(f"ar deve estar em (-1, 1), recebido {ar}")
    lags = np.abs(np.subtract.outer(np.arange(n_samples), np.arange(n_samples)))
    temporal = ar ** lags
    spatial = np.exp(-cdist(sensors, sensors) / length)
    return KroneckerCovariance.normalized(temporal, spatial)


class MatrixNormalNoise:
    """Ruído normal matricial com fatores de Kronecker conhecidos."""

    def __init__(self, cov: KroneckerCovariance):
        self.cov = cov

    @property
    def shape(self):
        return self.cov.shape

    def draw(self, rng) -> Tuple[Optional[int], np.ndarray]:
        return None, sample_matrix_normal(np.zeros(self.cov.shape), self.cov, rng)


class RecordedNoise:
    """Conjunto de registros sem sinal; cada realização sorteia um deles."""

    def __init__(self, recordings: Sequence[np.ndarray]):
        if not recordings:
            raise ValueError("nenhum registro de ruído")
        self.recordings = [as_matrix(r, "recording") for r in recordings]
        shapes = {r.shape for r in self.recordings}
        if len(shapes) != 1:
            raise DimensionError(f"registros de ruído com shapes diferentes: {shapes}")

    @property
    def shape(self):
        return self.recordings[0].shape

    def __len__(self) -> int:
        return len(self.recordings)

    def draw(self, rng) -> Tuple[Optional[int], np.ndarray]:
        i = int(rng.integers(len(self.recordings)))
        return i, self.recordings[i].copy()


def scale_noise_to_snr(signal, noise, snr_db: float) -> np.ndarray:
    """
    Reescala o ruído para que 20·log10(‖signal‖/‖ruído‖) = snr_db (razão de amplitudes).
    snr_db = +inf devolve ruído nulo; sinal nulo devolve o ruído inalterado.
    """
    signal = as_matrix(signal, "signal")
    noise = as_matrix(noise, "noise")
    n_norm = np.linalg.norm(noise)
    if n_norm == 0.0:
        raise DegenerateInputError("ruído nulo não pode ser reescalado")
    if np.isposinf(snr_db):
        return np.zeros_like(noise)

    s_norm = np.linalg.norm(signal)
    if s_norm == 0.0:
        return noise.copy()
    return noise * (s_norm / (n_norm * 10.0 ** (snr_db / 20.0)))


# ---------------------------------------------------------------------------
# Ensaios simulados
# ---------------------------------------------------------------------------

@dataclass
class SimulatedTrial:
    Z: np.ndarray
    j0: np.ndarray
    patch: np.ndarray
    snr_db: float
    seed_vertex: int
    noise_index: Optional[int] = None


def source_matrix(profile: TimeProfile, patch, n_vertices: int) -> np.ndarray:
    """j₀ (T₀ × K): φ nas colunas do patch, zero nas demais."""
    j0 = np.zeros((len(profile), n_vertices))
    j0[:, np.asarray(patch, dtype=np.int64)] = profile.samples[:, None]
    return j0


def simulate_trial(
    g: CortexGraph,
    G0,
    profile: TimeProfile,
    patch_size: int,
    snr_db: float,
    noise,
    rng,
    patch: Optional[np.ndarray] = None,
    seed_vertex: Optional[int] = None,
) -> SimulatedTrial:
    """
    Patch conexo em torno de um vértice sorteado, propagação pelo lead-field e
    adição de ruído reescalado para o SNR pedido. `patch` permite reaproveitar a
    mesma fonte entre realizações de ruído.
    """
    G0 = as_matrix(G0, "G0")
    if G0.shape[1] != g.n_vertices:
        raise DimensionError(f"lead-field com {G0.shape[1]} colunas para {g.n_vertices} vértices")
    if noise.shape != (len(profile), G0.shape[0]):
        raise DimensionError(f"ruído {noise.shape}, esperado {(len(profile), G0.shape[0])}")

    if patch is None:
        seed_vertex = int(rng.integers(g.n_vertices))
        patch = grow_patch(g, seed_vertex, patch_size, rng)

    j0 = source_matrix(profile, patch, g.n_vertices)
    clean = j0 @ G0.T
    noise_index, raw = noise.draw(rng)
    Z = clean + scale_noise_to_snr(clean, raw, snr_db)

    return SimulatedTrial(Z, j0, np.asarray(patch, dtype=np.int64), snr_db, int(seed_vertex or 0), noise_index)


# ---------------------------------------------------------------------------
# Métricas
# ---------------------------------------------------------------------------

def iota_index(j0, j_rec) -> float:
    """Produto interno normalizado entre fontes verdadeiras e reconstruídas."""
    j0 = as_matrix(j0, "j0")
    j_rec = as_matrix(j_rec, "j_rec")
    if j0.shape != j_rec.shape:
        raise DimensionError(f"j0 {j0.shape} e j_rec {j_rec.shape} incompatíveis")
    e0, er = float(np.sum(j0 * j0)), float(np.sum(j_rec * j_rec))
    if e0 == 0.0 or er == 0.0:
        raise DegenerateInputError("ι indefinido para fontes de norma nula")
    return float(np.clip(np.sum(j0 * j_rec) / np.sqrt(e0 * er), -1.0, 1.0))


def kappa_scores(j_rec, profile: Union[TimeProfile, np.ndarray], signed: bool = False) -> np.ndarray:
    """
    Correlação temporal normalizada de cada vértice com o perfil. Por padrão em
    módulo (faixa [0, 1]); vértices com curva nula recebem 0.
    """
    phi = profile.samples if isinstance(profile, TimeProfile) else np.asarray(profile, dtype=np.float64)
    j_rec = as_matrix(j_rec, "j_rec")
    if j_rec.shape[0] != len(phi):
        raise DimensionError(f"j_rec com {j_rec.shape[0]} amostras, perfil com {len(phi)}")
    phi_energy = float(phi @ phi)
    if phi_energy == 0.0:
        raise DegenerateInputError("perfil nulo")

    energies = np.sum(j_rec * j_rec, axis=0)
    dots = phi @ j_rec
    scores = np.zeros(j_rec.shape[1])
    ok = energies > 0
    scores[ok] = dots[ok] / np.sqrt(energies[ok] * phi_energy)
    scores = np.clip(scores, -1.0, 1.0)
    return scores if signed else np.abs(scores)


def roc_auc(scores, labels) -> float:
    """Estatística de Mann-Whitney: P(score_pos > score_neg) com empates valendo ½."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if scores.shape != labels.shape:
        raise DimensionError(f"{len(scores)} scores para {len(labels)} rótulos")

    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("AUC exige rótulos positivos e negativos")

    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def restricted_auc(scores, labels, rng, resamples: int = 20) -> float:
    """AUC média sobre subamostras de negativos do mesmo tamanho que os positivos."""
    if resamples < 1:
        raise ValueError(f"resamples deve ser ≥ 1, recebido {resamples}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    pos = np.flatnonzero(labels)
    neg = np.flatnonzero(~labels)
    if len(neg) < len(pos):
        raise DegenerateInputError(f"{len(neg)} negativos para {len(pos)} positivos")
    if len(neg) == len(pos):
        return roc_auc(scores, labels)

    values = []
    for _ in range(resamples):
        sub = np.concatenate([pos, rng.choice(neg, size=len(pos), replace=False)])
        values.append(roc_auc(scores[sub], labels[sub]))
    return float(np.mean(values))


@dataclass
class MetricsRow:
    trial: int
    realization: int
    stage: str
    snr_db: float
    iota: float
    auc: float
    auc_restricted: float


def evaluate_reconstruction(
    j0, j_rec, patch, profile: TimeProfile, rng, resamples: int = 20, signed: bool = False
) -> dict:
    labels = np.zeros(j_rec.shape[1], dtype=bool)
    labels[np.asarray(patch, dtype=np.int64)] = True
    scores = kappa_scores(j_rec, profile, signed)
    return {
        "iota": iota_index(j0, j_rec),
        "auc": roc_auc(scores, labels),
        "auc_restricted": restricted_auc(scores, labels, rng, resamples),
    }


def source_principal_component(j_rec) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Componente principal das fontes reconstruídas (tempo × vértices).

    Returns:
        (carga temporal unitária, carga espacial, fração de inércia). A maior
        carga temporal em módulo é positiva.
    """
    j_rec = as_matrix(j_rec, "j_rec")
    U, s, Vt = np.linalg.svd(j_rec, full_matrices=False)
    total = float(np.sum(s ** 2))
    if total == 0.0:
        raise DegenerateInputError("fontes nulas")

    time_loading, space_loading = U[:, 0], s[0] * Vt[0]
    if time_loading[np.argmax(np.abs(time_loading))] < 0:
        time_loading, space_loading = -time_loading, -space_loading
    return time_loading, space_loading, float(s[0] ** 2 / total)


# ---------------------------------------------------------------------------
# Agregação
# ---------------------------------------------------------------------------

def _as_frame(rows: Union[pd.DataFrame, Iterable[MetricsRow]]) -> pd.DataFrame:
    if isinstance(rows, pd.DataFrame):
        return rows.copy()
    return pd.DataFrame([asdict(r) for r in rows])


def average_over_noise(rows) -> pd.DataFrame:
    """Média das métricas sobre as realizações de ruído de cada ensaio fonte."""
    df = _as_frame(rows)
    if df.empty:
        raise ValueError("nenhuma linha de métricas")
    if "snr_db" not in df.columns:
        df["snr_db"] = np.nan
    return (
        df.groupby(["snr_db", "stage", "trial"], dropna=False, sort=True)[METRICS]
        .mean()
        .reset_index()
    )


def aggregate_report(rows) -> pd.DataFrame:
    """
    Média, mediana e desvio padrão amostral (n-1) por critério e estágio, depois
    da média sobre as realizações de ruído. Com mais de um SNR, uma coluna por
    par (SNR, estágio).
    """
    df = average_over_noise(rows)

    multi_snr = df["snr_db"].nunique(dropna=False) > 1
    stage_rank = {s: i for i, s in enumerate(STAGE_ORDER)}
    df["column"] = df["stage"]
    if multi_snr:
        df["column"] = df["stage"] + "@" + df["snr_db"].map(lambda v: f"{v:g}dB")

    long = df.melt(id_vars=["column", "snr_db", "stage"], value_vars=METRICS, var_name="criterion")
    stats = long.groupby(["criterion", "column"])["value"].agg(STATISTICS)
    stats["std"] = stats["std"].fillna(0.0)

    table = stats.stack().unstack("column")
    table.index = table.index.set_names(["criterion", "statistic"])

    columns = (
        df[["column", "snr_db", "stage"]]
        .drop_duplicates()
        .assign(rank=lambda d: d["stage"].map(lambda s: stage_rank.get(s, len(stage_rank))))
        .sort_values(["snr_db", "rank", "stage"])["column"]
        .tolist()
    )
    index = pd.MultiIndex.from_product([METRICS, STATISTICS], names=["criterion", "statistic"])
    table = table.reindex(index=index, columns=columns)
    table.columns.name = None
    return table.reset_index()
