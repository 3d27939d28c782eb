"""
Núcleo MEM: modelo de referência em mistura gaussiana por parcela, energia livre
𝒟(Λ) e seu gradiente na forma matricial, reconstrução das fontes e o pipeline
de estágios G → GM → uGM.

    𝒟(Λ) = Tr(DᵀΛ) - ½·Tr(ΛᵀΣ_Nᵗ Λ Σ_Nˢ) - Σ_p F_p(Λ·G_p)

com F_p = ln(α_p·exp F_p1 + (1-α_p)·exp F_p0). O ruído entra apenas pelo termo
quadrático; as concatenações [W, N] e [G; I] nunca são montadas.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import expit, logsumexp

from core import (
    DegenerateInputError,
    DimensionError,
    KroneckerCovariance,
    SpdError,
    as_matrix,
    ensure_spd,
    trace_quad,
    unvec,
)
from cortex import ParcelSet
from covariance import regularize_spd
from optimizer import OptimizerConfig, OptimizeReport, maximize
from wavelet import TimeBasis

logger = logging.getLogger(__name__)

STAGE_G = "G"
STAGE_GM = "GM"
STAGE_UGM = "uGM"
STAGES = (STAGE_G, STAGE_GM, STAGE_UGM)

VARIANCE_FLOOR = 1e-12
CLOSED_FORM_TOL = 1e-8


@dataclass(frozen=True)
class ParcelPrior:
    alpha: float
    variance: float
    mean: np.ndarray        # Ω_p, L × K_p
    temporal: np.ndarray    # Σ_pᵗ, L × L
    spatial: np.ndarray     # Σ_pˢ, K_p × K_p

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha deve estar em [0, 1], recebido {self.alpha}")
        if not self.variance > 0:
            raise ValueError(f"variância do estado silencioso deve ser > 0, recebido {self.variance}")
        mean = as_matrix(self.mean, "mean")
        t = ensure_spd(self.temporal, "temporal")
        s = ensure_spd(self.spatial, "spatial")
        if mean.shape != (t.shape[0], s.shape[0]):
            raise DimensionError(f"Ω {mean.shape} incompatível com Σᵗ {t.shape} e Σˢ {s.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "temporal", t)
        object.__setattr__(self, "spatial", s)

    @classmethod
    def gaussian(cls, alpha: float, variance: float, n_coeffs: int, size: int) -> "ParcelPrior":
        """Configuração do estágio G: Ω = 0, Σᵗ = v·I, Σˢ = I."""
        return cls(alpha, variance, np.zeros((n_coeffs, size)), variance * np.eye(n_coeffs), np.eye(size))

    @property
    def size(self) -> int:
        return self.mean.shape[1]

    def gaussian_variance(self) -> Optional[float]:
        """Variância v se a mistura se reduz a N(0, v·I); None caso contrário."""
        if self.alpha == 0.0:
            return self.variance
        if np.any(self.mean != 0.0):
            return None
        t, s = self.temporal, self.spatial
        ct, cs = t[0, 0], s[0, 0]
        if not (np.array_equal(t, ct * np.eye(len(t))) and np.array_equal(s, cs * np.eye(len(s)))):
            return None
        if abs(ct * cs - self.variance) > 1e-12 * self.variance:
            return None
        return self.variance


@dataclass(frozen=True)
class MemModel:
    leadfield: np.ndarray                     # G, J × K
    noise: KroneckerCovariance                # (Σ_Nᵗ, Σ_Nˢ)
    parcels: ParcelSet
    priors: Tuple[ParcelPrior, ...]
    spatial_kernels: Optional[Tuple[np.ndarray, ...]] = None
    time_basis: Optional[TimeBasis] = None

    def __post_init__(self):
        G = as_matrix(self.leadfield, "leadfield")
        object.__setattr__(self, "leadfield", G)
        object.__setattr__(self, "priors", tuple(self.priors))
        if self.spatial_kernels is not None:
            object.__setattr__(self, "spatial_kernels", tuple(self.spatial_kernels))

        L, J = self.noise.shape
        if G.shape[0] != J:
            raise DimensionError(f"lead-field com {G.shape[0]} linhas, ruído espacial {J}×{J}")
        if self.parcels.n_vertices != G.shape[1]:
            raise DimensionError(
                f"parcelas cobrem {self.parcels.n_vertices} vértices, lead-field tem {G.shape[1]} colunas"
            )
        if len(self.priors) != len(self.parcels):
            raise DimensionError(f"{len(self.priors)} priors para {len(self.parcels)} parcelas")
        for p, (prior, idx) in enumerate(zip(self.priors, self.parcels)):
            if prior.mean.shape != (L, len(idx)):
                raise DimensionError(f"prior da parcela {p} tem shape {prior.mean.shape}, esperado {(L, len(idx))}")
        if self.spatial_kernels is not None:
            for p, (k, idx) in enumerate(zip(self.spatial_kernels, self.parcels)):
                if k.shape != (len(idx), len(idx)):
                    raise DimensionError(f"núcleo espacial da parcela {p} com shape {k.shape}")
        if self.time_basis is not None and self.time_basis.size != L:
            raise DimensionError(f"base temporal com {self.time_basis.size} coeficientes, ruído com L={L}")

    @classmethod
    def gaussian(
        cls,
        leadfield,
        noise: KroneckerCovariance,
        parcels: ParcelSet,
        alpha: Union[float, Sequence[float]],
        variance: Union[float, Sequence[float]],
        spatial_kernels=None,
        time_basis: Optional[TimeBasis] = None,
    ) -> "MemModel":
        P = len(parcels)
        alphas = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (P,))
        variances = np.broadcast_to(np.asarray(variance, dtype=np.float64), (P,))
        L = noise.shape[0]
        priors = tuple(
            ParcelPrior.gaussian(float(a), float(v), L, len(idx))
            for a, v, idx in zip(alphas, variances, parcels)
        )
        return cls(leadfield, noise, parcels, priors, spatial_kernels, time_basis)

    def with_priors(self, priors: Sequence[ParcelPrior]) -> "MemModel":
        return replace(self, priors=tuple(priors))

    def gaussian_reference(self) -> "MemModel":
        """Mesmo modelo com priors do estágio G (α e v preservados)."""
        L = self.n_coeffs
        return self.with_priors(
            ParcelPrior.gaussian(pr.alpha, pr.variance, L, pr.size) for pr in self.priors
        )

    @property
    def n_coeffs(self) -> int:
        return self.noise.shape[0]

    @property
    def n_components(self) -> int:
        return self.noise.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.leadfield.shape[1]

    def block(self, p: int) -> np.ndarray:
        return self.leadfield[:, self.parcels[p]]


@dataclass
class SourceEstimate:
    W_hat: np.ndarray                      # L × K
    alpha_post: np.ndarray                 # P
    lambda_star: np.ndarray                # L × J
    time_courses: Optional[np.ndarray] = None   # T₀ × K


# ---------------------------------------------------------------------------
# Funções de log-partição
# ---------------------------------------------------------------------------

def logpart_silent(U, variance: float) -> float:
    """F_p0(U) = (v/2)·Tr(UᵀU)"""
    U = np.asarray(U, dtype=np.float64)
    return 0.5 * variance * float(np.sum(U * U))


def logpart_active(U, prior: ParcelPrior) -> float:
    """F_p1(U) = Tr(UᵀΩ) + ½·Tr(UᵀΣᵗUΣˢ)"""
    U = as_matrix(U, "U")
    if U.shape != prior.mean.shape:
        raise DimensionError(f"U {U.shape} incompatível com Ω {prior.mean.shape}")
    return float(np.sum(U * prior.mean)) + 0.5 * trace_quad(U, prior.temporal, prior.spatial)


def mixture_logpart(f1: float, f0: float, alpha: float) -> float:
    """ln(α·e^F1 + (1-α)·e^F0) sem overflow; α = 0 e α = 1 exatos."""
    if alpha <= 0.0:
        return float(f0)
    if alpha >= 1.0:
        return float(f1)
    return float(logsumexp([f1, f0], b=[alpha, 1.0 - alpha]))


def posterior_activity(f1: float, f0: float, alpha: float) -> float:
    """α̃ = α / (α + (1-α)·e^(F0-F1)), como logística de F1 - F0 + logit(α)."""
    if alpha <= 0.0:
        return 0.0
    if alpha >= 1.0:
        return 1.0
    return float(expit(f1 - f0 + np.log(alpha) - np.log1p(-alpha)))


# ---------------------------------------------------------------------------
# Energia livre
# ---------------------------------------------------------------------------

@dataclass
class _ParcelTerms:
    logpart: float
    alpha_post: float
    W_hat: np.ndarray


def _parcel_terms(Lam: np.ndarray, model: MemModel) -> List[_ParcelTerms]:
    # F1, F0 calculados uma vez por parcela e compartilhados entre 𝒟 e ∇𝒟
    terms = []
    for p, prior in enumerate(model.priors):
        U = Lam @ model.block(p)
        f0 = logpart_silent(U, prior.variance)
        cov_term = prior.temporal @ U @ prior.spatial
        f1 = float(np.sum(U * prior.mean)) + 0.5 * float(np.sum(U * cov_term))
        a = posterior_activity(f1, f0, prior.alpha)
        W = a * (prior.mean + cov_term) + (1.0 - a) * prior.variance * U
        terms.append(_ParcelTerms(mixture_logpart(f1, f0, prior.alpha), a, W))
    return terms


def _check_dual(Lam, model: MemModel, D=None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    Lam = as_matrix(Lam, "Lambda")
    if Lam.shape != model.noise.shape:
        raise DimensionError(f"Λ {Lam.shape} incompatível com o modelo {model.noise.shape}")
    if D is not None:
        D = as_matrix(D, "D")
        if D.shape != Lam.shape:
            raise DimensionError(f"D {D.shape} incompatível com Λ {Lam.shape}")
    return Lam, D


def _noise_term(Lam: np.ndarray, model: MemModel) -> np.ndarray:
    return model.noise.temporal @ Lam @ model.noise.spatial


def value_and_gradient(Lam, model: MemModel, D) -> Tuple[float, np.ndarray]:
    Lam, D = _check_dual(Lam, model, D)
    terms = _parcel_terms(Lam, model)
    noise = _noise_term(Lam, model)

    value = float(np.sum(D * Lam)) - 0.5 * float(np.sum(Lam * noise)) - sum(t.logpart for t in terms)

    grad = D - noise
    for p, t in enumerate(terms):
        grad -= t.W_hat @ model.block(p).T
    return value, grad


def free_energy(Lam, model: MemModel, D) -> float:
    Lam, D = _check_dual(Lam, model, D)
    logparts = sum(t.logpart for t in _parcel_terms(Lam, model))
    return (
        float(np.sum(D * Lam))
        - 0.5 * trace_quad(Lam, model.noise.temporal, model.noise.spatial)
        - logparts
    )


def free_energy_gradient(Lam, model: MemModel, D) -> np.ndarray:
    return value_and_gradient(Lam, model, D)[1]


def reconstruct(Lam, model: MemModel) -> SourceEstimate:
    """Ŵ_p = α̃_p·[Ω_p + Σ_pᵗ Λ G_p Σ_pˢ] + (1-α̃_p)·v_p·Λ·G_p, montado por parcela."""
    Lam, _ = _check_dual(Lam, model)
    terms = _parcel_terms(Lam, model)

    W = np.zeros((model.n_coeffs, model.n_vertices))
    for idx, t in zip(model.parcels, terms):
        W[:, idx] = t.W_hat
    alpha_post = np.array([t.alpha_post for t in terms])

    time_courses = model.time_basis.synthesize(W) if model.time_basis is not None else None
    return SourceEstimate(W, alpha_post, Lam.copy(), time_courses)


# ---------------------------------------------------------------------------
# Solução fechada do modelo gaussiano
# ---------------------------------------------------------------------------

def solve_gaussian_reference(model: MemModel, D) -> np.ndarray:
    """
    Resolve D = Σ_Nᵗ·Λ·Σ_Nˢ + Λ·M, M = Σ_p v_p·G_p·G_pᵀ.

    Com Σ_Nᵗ = V·diag(θ)·Vᵀ, cada linha i de VᵀΛ resolve o sistema J×J
    (θᵢ·Σ_Nˢ + M)·x = (VᵀD)ᵢ.
    """
    D = as_matrix(D, "D")
    if D.shape != model.noise.shape:
        raise DimensionError(f"D {D.shape} incompatível com o modelo {model.noise.shape}")

    J = model.n_components
    M = np.zeros((J, J))
    for p, prior in enumerate(model.priors):
        v = prior.gaussian_variance()
        if v is None:
            raise ValueError(f"prior da parcela {p} não é gaussiano (exige Ω = 0 e Σᵗ⊗Σˢ = v·I)")
        Gp = model.block(p)
        M += v * (Gp @ Gp.T)

    theta, V = linalg.eigh(model.noise.temporal)
    Dt = V.T @ D
    X = np.empty_like(Dt)
    for i, th in enumerate(theta):
        try:
            factor = linalg.cho_factor(th * model.noise.spatial + M, lower=True)
        except linalg.LinAlgError as e:
            raise SpdError(f"sistema da linha {i} singular: modelo degenerado") from e
        X[i] = linalg.cho_solve(factor, Dt[i])
    return V @ X


# ---------------------------------------------------------------------------
# Estimação de parâmetros e pipeline de estágios
# ---------------------------------------------------------------------------

def default_variance(D, leadfield, noise: KroneckerCovariance, snr_factor: float = 1.0) -> float:
    """v = snr_factor·‖D‖² / (J·Tr(Σ_Nᵗ)/L·‖G‖²) (escala heurística)."""
    D = as_matrix(D, "D")
    G = as_matrix(leadfield, "leadfield")
    L, J = noise.shape
    d2 = float(np.sum(D * D))
    g2 = float(np.sum(G * G))
    if d2 == 0.0 or g2 == 0.0:
        raise DegenerateInputError("dados ou lead-field nulos: variância de referência indefinida")
    return snr_factor * d2 / (J * np.trace(noise.temporal) / L * g2)


def estimate_parameters(W_prelim, model: MemModel, shrinkage: float = 0.05) -> Tuple[ParcelPrior, ...]:
    """
    Por parcela: Ω_p = bloco de W_prelim; Σ_pᵗ = segundo momento empírico das
    colunas do bloco (vértices como amostras), encolhido por γ e somado a um piso
    de variância; Σ_pˢ = núcleo de difusão do modelo; α_p e v_p inalterados.
    """
    W = as_matrix(W_prelim, "W_prelim")
    if W.shape != (model.n_coeffs, model.n_vertices):
        raise DimensionError(f"W_prelim {W.shape}, esperado {(model.n_coeffs, model.n_vertices)}")
    if model.spatial_kernels is None:
        raise ValueError("modelo sem núcleos espaciais das parcelas")

    L = model.n_coeffs
    priors = []
    for idx, prior, kernel in zip(model.parcels, model.priors, model.spatial_kernels):
        block = W[:, idx]
        S = regularize_spd(block @ block.T / block.shape[1], shrinkage)
        scale = float(np.mean(np.diag(S)))
        floor = VARIANCE_FLOOR * (scale if scale > 0 else prior.variance)
        priors.append(ParcelPrior(prior.alpha, prior.variance, block.copy(), S + floor * np.eye(L), kernel))
    return tuple(priors)


@dataclass
class StageDiagnostics:
    stage: str
    iterations: int
    grad_norm: float
    free_energy: float
    start_free_energy: float
    converged: bool
    message: str = ""


@dataclass
class StageResult:
    estimate: SourceEstimate
    diagnostics: StageDiagnostics
    model: MemModel = field(repr=False, default=None)


def _optimize(D, model: MemModel, start: np.ndarray, opt: OptimizerConfig) -> Tuple[np.ndarray, OptimizeReport]:
    L, J = model.noise.shape

    def objective(x):
        return value_and_gradient(unvec(x, L, J), model, D)

    x, report = maximize(objective, start.reshape(-1), opt)
    return unvec(x, L, J), report


def run_stages(
    D,
    model: MemModel,
    last_stage: str = STAGE_UGM,
    opt: OptimizerConfig = OptimizerConfig(),
    shrinkage: float = 0.05,
) -> Dict[str, StageResult]:
    """
    G: solução fechada; GM: parâmetros estimados de Ŵ_G e maximização a partir
    de Λ_G; uGM: repete a partir do resultado GM.
    """
    if last_stage not in STAGES:
        raise ValueError(f"estágio desconhecido: {last_stage} (use {', '.join(STAGES)})")
    D = as_matrix(D, "D")

    results: Dict[str, StageResult] = {}

    g_model = model.gaussian_reference()
    lam = solve_gaussian_reference(g_model, D)
    value, grad = value_and_gradient(lam, g_model, D)
    gnorm = float(np.linalg.norm(grad))
    results[STAGE_G] = StageResult(
        reconstruct(lam, g_model),
        StageDiagnostics(
            STAGE_G, 0, gnorm, value, 0.0,
            bool(gnorm <= CLOSED_FORM_TOL * (1.0 + np.linalg.norm(D))),
            "solução fechada",
        ),
        g_model,
    )
    logger.info("Estágio G: 𝒟=%.6g |∇𝒟|=%.3e", value, gnorm)

    previous = results[STAGE_G]
    for stage in STAGES[1:STAGES.index(last_stage) + 1]:
        stage_model = model.with_priors(estimate_parameters(previous.estimate.W_hat, model, shrinkage))
        start = previous.estimate.lambda_star
        start_value = free_energy(start, stage_model, D)

        lam, report = _optimize(D, stage_model, start, opt)
        results[stage] = StageResult(
            reconstruct(lam, stage_model),
            StageDiagnostics(
                stage, report.iterations, report.grad_norm, report.objective,
                start_value, report.converged, report.message,
            ),
            stage_model,
        )
        logger.info(
            "Estágio %s: 𝒟 %.6g → %.6g em %d iterações (|∇𝒟|=%.3e)",
            stage, start_value, report.objective, report.iterations, report.grad_norm,
        )
        previous = results[stage]

    return results


def invert(
    D,
    model: MemModel,
    stage: str = STAGE_UGM,
    opt: OptimizerConfig = OptimizerConfig(),
    shrinkage: float = 0.05,
) -> StageResult:
    return run_stages(D, model, stage, opt, shrinkage)[stage]
