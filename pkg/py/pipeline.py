"""
Orquestração do estudo sobre diretórios: simulação, estimação do modelo de
ruído, inversão e avaliação. Cada etapa lê o manifesto da anterior.

Layout do diretório de simulação:
    manifest.yaml, mesh.off, leadfield.kmm, sensors.kmm, profile.csv,
    noise/noise_XXXX.kmm, trials/trial_XXXX.kmm
Layout do diretório de modelo:
    manifest.yaml, filter.kmm, noise_temporal.kmm, noise_spatial.kmm
Layout do diretório de estimativas:
    manifest.yaml, <estágio>/W_XXXX.kmm, <estágio>/alpha_XXXX.csv
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from core import DimensionError, KroneckerCovariance, sample_matrix_normal, spread_seeds
from cortex import graph_from_mesh, load_mesh, parcel_covariances, parcellate, save_mesh
from covariance import center_samples, flip_flop, regularize_spd
from matrix_io import read_csv_vector, read_kmm, read_manifest, write_csv_matrix, write_kmm, write_manifest
from mem import STAGES, MemModel, default_variance, run_stages
from optimizer import OptimizerConfig
from reduction import SpatialFilter, apply_filter, fit_spatial_pca, reduce_leadfield
from simstudy import (
    MetricsRow,
    RecordedNoise,
    TimeProfile,
    evaluate_reconstruction,
    load_profile,
    sensor_noise_covariance,
    sensor_positions,
    simulate_trial,
    source_matrix,
    synthetic_leadfield,
)
from wavelet import CoefficientSelection, TimeBasis, WaveletConfig, build_time_basis

logger = logging.getLogger(__name__)

MANIFEST = "manifest.yaml"
SYNTHETIC = "synthetic"

PathLike = Union[str, Path]


def _trial_name(i: int) -> str:
    return f"trial_{i:04d}.kmm"


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

@dataclass
class SimulationSettings:
    mesh: str = "builtin:icosphere:3"
    leadfield: str = SYNTHETIC
    sensors: int = 40
    trials: int = 100
    noise_realizations: int = 30
    noise_recordings: int = 40
    patch_min: int = 20
    patch_max: int = 80
    snr_db: float = 6.0206
    profile: str = "builtin:slowwave"
    sfreq: float = 50.0
    duration: float = 4.0
    noise_ar: float = 0.7
    noise_length: float = 0.5
    seed: int = 0

    @classmethod
    def from_settings(cls, **overrides) -> "SimulationSettings":
        from config_loader import config

        values = {name: config.get(f"simulation.{name}", default) for name, default in cls().__dict__.items()}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def simulate_dataset(out_dir: PathLike, settings: SimulationSettings) -> Path:
    """Gera malha, lead-field, registros de ruído e ensaios (fonte × realização)."""
    out = Path(out_dir)
    if settings.patch_min > settings.patch_max:
        raise ValueError(f"patch_min={settings.patch_min} > patch_max={settings.patch_max}")

    seeds = spread_seeds(settings.seed, 3)
    setup_rng = np.random.default_rng(seeds[0])
    noise_rng = np.random.default_rng(seeds[1])

    g = graph_from_mesh(load_mesh(settings.mesh))
    profile = load_profile(settings.profile, settings.sfreq, settings.duration)
    n_samples = len(profile)

    if settings.leadfield == SYNTHETIC:
        sensors = sensor_positions(g.vertices, settings.sensors, setup_rng)
        G0 = synthetic_leadfield(g.vertices, sensors)
    else:
        G0 = read_kmm(settings.leadfield)
        # posições substitutas, usadas só no fator espacial do ruído
        sensors = sensor_positions(g.vertices, G0.shape[0], setup_rng)
    if G0.shape[1] != g.n_vertices:
        raise DimensionError(f"lead-field com {G0.shape[1]} colunas, malha com {g.n_vertices} vértices")

    noise_cov = sensor_noise_covariance(n_samples, sensors, settings.noise_ar, settings.noise_length)
    recordings = sample_matrix_normal(
        np.zeros(noise_cov.shape), noise_cov, noise_rng, size=settings.noise_recordings
    )
    noise = RecordedNoise(list(recordings))

    save_mesh(out / "mesh.off", g)
    write_kmm(out / "leadfield.kmm", G0)
    write_kmm(out / "sensors.kmm", sensors)
    profile.to_csv(out / "profile.csv")
    for i, rec in enumerate(noise.recordings):
        write_kmm(out / "noise" / f"noise_{i:04d}.kmm", rec)

    entries = []
    trial_seeds = spread_seeds(seeds[2], settings.trials)
    for source, seed in enumerate(trial_seeds):
        rng = np.random.default_rng(seed)
        size = int(rng.integers(settings.patch_min, settings.patch_max + 1))
        first = simulate_trial(g, G0, profile, size, settings.snr_db, noise, rng)
        sims = [first] + [
            simulate_trial(
                g, G0, profile, size, settings.snr_db, noise, rng,
                patch=first.patch, seed_vertex=first.seed_vertex,
            )
            for _ in range(settings.noise_realizations - 1)
        ]
        for realization, sim in enumerate(sims):
            name = _trial_name(len(entries))
            write_kmm(out / "trials" / name, sim.Z)
            entries.append({
                "file": name,
                "source": source,
                "realization": realization,
                "noise_index": sim.noise_index,
                "seed_vertex": sim.seed_vertex,
                "patch": sim.patch,
            })

    manifest = {
        "kind": "simulation",
        "mesh": "mesh.off",
        "mesh_source": settings.mesh,
        "leadfield": "leadfield.kmm",
        "leadfield_source": settings.leadfield,
        "profile": "profile.csv",
        "n_samples": n_samples,
        "sfreq": settings.sfreq,
        "snr_db": settings.snr_db,
        "seed": settings.seed,
        "n_vertices": g.n_vertices,
        "n_sensors": G0.shape[0],
        "noise": [f"noise/noise_{i:04d}.kmm" for i in range(len(noise))],
        "trials": entries,
    }
    write_manifest(out / MANIFEST, manifest)
    logger.info(
        "Simulação gravada em %s: %d ensaios (%d fontes × %d realizações)",
        out, len(entries), settings.trials, settings.noise_realizations,
    )
    return out


def load_trials(sim_dir: PathLike) -> List[np.ndarray]:
    sim_dir = Path(sim_dir)
    manifest = read_manifest(sim_dir / MANIFEST)
    return [read_kmm(sim_dir / "trials" / t["file"]) for t in manifest.get("trials", [])]


def load_noise_recordings(sim_dir: PathLike) -> List[np.ndarray]:
    sim_dir = Path(sim_dir)
    manifest = read_manifest(sim_dir / MANIFEST)
    return [read_kmm(sim_dir / f) for f in manifest.get("noise", [])]


# ---------------------------------------------------------------------------
# estimate-noise
# ---------------------------------------------------------------------------

def estimate_noise_model(
    sim_dir: PathLike,
    out_dir: PathLike,
    taps: int = 6,
    coeffs: int = 62,
    components: int = 15,
    levels: Optional[int] = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    shrinkage: float = 0.0,
) -> Path:
    """
    Seleção de coeficientes e PCA ajustadas sobre os ensaios com sinal (ou, na
    falta deles, sobre os registros de ruído); flip-flop sobre os registros de
    ruído reduzidos e centrados.
    """
    sim_dir, out = Path(sim_dir), Path(out_dir)
    recordings = load_noise_recordings(sim_dir)
    trials = load_trials(sim_dir) or recordings
    if not recordings:
        raise ValueError(f"{sim_dir}: nenhum registro de ruído para o flip-flop")

    n_samples = trials[0].shape[0]
    cfg = WaveletConfig.for_length(n_samples, taps, levels)
    basis = build_time_basis(trials, cfg, coeffs)

    reduced = [basis.reduce(t) for t in trials]
    spatial_filter = fit_spatial_pca(reduced, components)
    if spatial_filter.total_inertia < 0.98:
        logger.warning("Inércia capturada %.4f abaixo de 0.98", spatial_filter.total_inertia)

    noise_reduced = center_samples([apply_filter(basis.reduce(r), spatial_filter) for r in recordings])
    cov, report = flip_flop(noise_reduced, tol=tol, max_iter=max_iter)
    if shrinkage > 0:
        cov = KroneckerCovariance.normalized(
            regularize_spd(cov.temporal, shrinkage), regularize_spd(cov.spatial, shrinkage)
        )

    write_kmm(out / "filter.kmm", spatial_filter.basis)
    write_kmm(out / "noise_temporal.kmm", cov.temporal)
    write_kmm(out / "noise_spatial.kmm", cov.spatial)
    write_manifest(out / MANIFEST, {
        "kind": "model",
        "source": str(sim_dir.resolve()),
        "wavelet": {
            "taps": cfg.taps,
            "levels": cfg.depth,
            "padded_length": cfg.padded_length,
            "n_samples": n_samples,
            "selection": basis.selection.indices,
        },
        "reduction": {
            "components": components,
            "inertia": spatial_filter.inertia,
            "total_inertia": spatial_filter.total_inertia,
        },
        "noise": {
            "temporal": "noise_temporal.kmm",
            "spatial": "noise_spatial.kmm",
            "recordings": len(recordings),
            "shrinkage": shrinkage,
            "flip_flop": {
                "iterations": report.iterations,
                "converged": report.converged,
                "loglik": report.loglik_trace[-1] if report.loglik_trace else None,
            },
        },
        "filter": "filter.kmm",
    })
    logger.info(
        "Modelo de ruído gravado em %s (L=%d, J=%d, flip-flop em %d iterações)",
        out, len(basis.selection), components, report.iterations,
    )
    return out


@dataclass
class NoiseModel:
    time_basis: TimeBasis
    spatial_filter: SpatialFilter
    noise: KroneckerCovariance
    manifest: Dict[str, Any]


def load_noise_model(model_dir: PathLike) -> NoiseModel:
    model_dir = Path(model_dir)
    m = read_manifest(model_dir / MANIFEST)
    w = m["wavelet"]
    cfg = WaveletConfig(taps=int(w["taps"]), levels=int(w["levels"]), padded_length=int(w["padded_length"]))
    basis = TimeBasis(cfg, CoefficientSelection(np.asarray(w["selection"]), cfg.padded_length), int(w["n_samples"]))
    spatial_filter = SpatialFilter(read_kmm(model_dir / m["filter"]), np.asarray(m["reduction"]["inertia"]))
    noise = KroneckerCovariance.normalized(
        read_kmm(model_dir / m["noise"]["temporal"]), read_kmm(model_dir / m["noise"]["spatial"])
    )
    return NoiseModel(basis, spatial_filter, noise, m)


# ---------------------------------------------------------------------------
# invert
# ---------------------------------------------------------------------------

@dataclass
class InversionSettings:
    stage: str = "uGM"
    alpha: float = 0.25
    rho: float = 0.3
    parcels: int = 156
    snr_factor: float = 1.0
    variance: Optional[float] = None
    shrinkage: float = 0.05
    average: bool = False
    workers: int = 1
    seed: int = 0
    optimizer: OptimizerConfig = OptimizerConfig()


def worker_count(requested: int) -> int:
    """Processos efetivos: entre 1 e os núcleos disponíveis."""
    return max(1, min(int(requested), os.cpu_count() or 1))


def _invert_one(D, base: MemModel, variance: Optional[float], settings: InversionSettings):
    v = variance if variance is not None else default_variance(D, base.leadfield, base.noise, settings.snr_factor)
    model = MemModel.gaussian(
        base.leadfield, base.noise, base.parcels, settings.alpha, v, base.spatial_kernels, base.time_basis
    )
    results = run_stages(D, model, settings.stage, settings.optimizer, settings.shrinkage)
    return v, {
        stage: (r.estimate.W_hat, r.estimate.alpha_post, r.diagnostics)
        for stage, r in results.items()
    }


def invert_dataset(data_dir: PathLike, model_dir: PathLike, out_dir: PathLike, settings: InversionSettings) -> Path:
    """Inverte cada ensaio (ou a média dos ensaios) até o estágio pedido."""
    data_dir, out = Path(data_dir), Path(out_dir)
    sim = read_manifest(data_dir / MANIFEST)
    nm = load_noise_model(model_dir)

    g = graph_from_mesh(load_mesh(data_dir / sim["mesh"]))
    G = reduce_leadfield(read_kmm(data_dir / sim["leadfield"]), nm.spatial_filter)
    parcels = parcellate(g, settings.parcels, np.random.default_rng(settings.seed))
    kernels = parcel_covariances(g, parcels, settings.rho)

    base = MemModel.gaussian(G, nm.noise, parcels, settings.alpha, 1.0, kernels, nm.time_basis)

    trials = load_trials(data_dir)
    if not trials:
        raise ValueError(f"{data_dir}: nenhum ensaio para inverter")
    if settings.average:
        trials = [np.mean(np.stack(trials), axis=0)]
    data = [apply_filter(nm.time_basis.reduce(Z), nm.spatial_filter) for Z in trials]

    workers = worker_count(min(settings.workers, len(data)))
    if workers < settings.workers:
        logger.info("workers=%d reduzido para %d (núcleos e ensaios disponíveis)", settings.workers, workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(
                _invert_one, data, [base] * len(data), [settings.variance] * len(data), [settings] * len(data)
            ))
    else:
        outputs = [_invert_one(D, base, settings.variance, settings) for D in data]

    stages = list(STAGES[: STAGES.index(settings.stage) + 1])
    entries = []
    for i, (variance, per_stage) in enumerate(outputs):
        diagnostics = {}
        for stage, (W, alpha_post, diag) in per_stage.items():
            write_kmm(out / stage / f"W_{i:04d}.kmm", W)
            write_csv_matrix(out / stage / f"alpha_{i:04d}.csv", alpha_post)
            diagnostics[stage] = {
                "iterations": diag.iterations,
                "grad_norm": diag.grad_norm,
                "free_energy": diag.free_energy,
                "start_free_energy": diag.start_free_energy,
                "converged": diag.converged,
            }
        entry = {"index": i, "variance": variance, "diagnostics": diagnostics}
        if not settings.average:
            entry["trial"] = sim["trials"][i]["file"]
        entries.append(entry)

    write_manifest(out / MANIFEST, {
        "kind": "estimate",
        "data": str(data_dir.resolve()),
        "model": str(Path(model_dir).resolve()),
        "stages": stages,
        "average": settings.average,
        "parameters": {
            "alpha": settings.alpha,
            "rho": settings.rho,
            "parcels": settings.parcels,
            "snr_factor": settings.snr_factor,
            "variance": settings.variance,
            "shrinkage": settings.shrinkage,
            "grad_tol": settings.optimizer.grad_tol,
            "seed": settings.seed,
        },
        "parcel_labels": parcels.labels,
        "estimates": entries,
    })
    logger.info("Estimativas gravadas em %s: %d inversões, estágios %s", out, len(entries), stages)
    return out


# ---------------------------------------------------------------------------
# evaluate / report
# ---------------------------------------------------------------------------

def evaluate_dataset(
    truth_dir: PathLike,
    estimate_dir: PathLike,
    resamples: int = 20,
    signed: bool = False,
    seed: int = 0,
) -> pd.DataFrame:
    """Uma linha de métricas por (ensaio, estágio)."""
    truth_dir, est_dir = Path(truth_dir), Path(estimate_dir)
    sim = read_manifest(truth_dir / MANIFEST)
    est = read_manifest(est_dir / MANIFEST)
    if est.get("average"):
        raise ValueError("estimativa da média dos ensaios não tem verdade por ensaio")

    nm = load_noise_model(est["model"])
    profile = TimeProfile(read_csv_vector(truth_dir / sim["profile"]), sim["sfreq"])
    n_vertices = int(sim["n_vertices"])
    by_file = {t["file"]: t for t in sim["trials"]}

    rows = []
    seeds = spread_seeds(seed, len(est["estimates"]))
    for entry, trial_seed in zip(est["estimates"], seeds):
        truth = by_file[entry["trial"]]
        j0 = source_matrix(profile, truth["patch"], n_vertices)
        rng = np.random.default_rng(trial_seed)
        for stage in est["stages"]:
            W = read_kmm(est_dir / stage / f"W_{entry['index']:04d}.kmm")
            j_rec = nm.time_basis.synthesize(W)
            metrics = evaluate_reconstruction(j0, j_rec, truth["patch"], profile, rng, resamples, signed)
            rows.append(MetricsRow(
                trial=int(truth["source"]),
                realization=int(truth["realization"]),
                stage=stage,
                snr_db=float(sim["snr_db"]),
                **metrics,
            ))

    logger.info("Avaliação: %d linhas de métricas", len(rows))
    return pd.DataFrame([asdict(r) for r in rows])


def write_metrics(df: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.17g")
    return path


def read_metrics(paths: Sequence[PathLike]) -> pd.DataFrame:
    frames = [pd.read_csv(p, float_precision="round_trip") for p in paths]
    if not frames:
        raise ValueError("nenhum arquivo de métricas")
    return pd.concat(frames, ignore_index=True)
