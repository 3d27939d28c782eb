"""
kronmem - linha de comando do estudo de simulação wMEM.

    kronmem simulate       --out sim/
    kronmem estimate-noise --noise-trials sim/ --out model/
    kronmem invert         --data sim/ --model model/ --stage uGM --out est/
    kronmem evaluate       --truth sim/ --estimate est/ --out metrics.csv
    kronmem report         --metrics metrics.csv --out table.csv

Valores padrão vêm de config/settings.yaml (ou variáveis KRONMEM_*).
"""
import argparse
import logging
import sys
import traceback
from typing import List, Optional

from config_loader import config

logger = logging.getLogger("kronmem")


def _cmd_simulate(args) -> None:
    from pipeline import SimulationSettings, simulate_dataset

    settings = SimulationSettings.from_settings(
        mesh=args.mesh,
        leadfield=args.leadfield,
        sensors=args.sensors,
        trials=args.trials,
        noise_realizations=args.noise_realizations,
        noise_recordings=args.noise_recordings,
        patch_min=args.patch_min,
        patch_max=args.patch_max,
        snr_db=args.snr_db,
        profile=args.profile,
        seed=args.seed,
    )
    simulate_dataset(args.out, settings)


def _cmd_estimate_noise(args) -> None:
    from pipeline import estimate_noise_model

    estimate_noise_model(
        args.noise_trials,
        args.out,
        taps=args.wavelet_taps,
        coeffs=args.coeffs,
        components=args.components,
        levels=args.levels,
        tol=args.tol,
        max_iter=args.max_iter,
        shrinkage=args.shrinkage,
    )


def _cmd_invert(args) -> None:
    from optimizer import OptimizerConfig
    from pipeline import InversionSettings, invert_dataset

    settings = InversionSettings(
        stage=args.stage,
        alpha=args.alpha,
        rho=args.rho,
        parcels=args.parcels,
        snr_factor=args.snr_factor,
        variance=args.variance,
        shrinkage=args.shrinkage,
        average=args.average,
        workers=args.workers,
        seed=args.seed,
        optimizer=OptimizerConfig.from_settings(grad_tol=args.grad_tol, max_iter=args.max_iter),
    )
    invert_dataset(args.data, args.model, args.out, settings)


def _cmd_evaluate(args) -> None:
    from pipeline import evaluate_dataset, write_metrics

    df = evaluate_dataset(args.truth, args.estimate, args.resamples, args.signed, args.seed)
    write_metrics(df, args.out)


def _cmd_report(args) -> None:
    from pipeline import read_metrics
    from report_export import write_report
    from simstudy import aggregate_report

    write_report(aggregate_report(read_metrics(args.metrics)), args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kronmem", description="wMEM com covariâncias de Kronecker")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING...")
    parser.add_argument("--debug", action="store_true", help="mostra traceback completo em caso de erro")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="gera ensaios sintéticos")
    p.add_argument("--mesh", default=config.get("simulation.mesh"))
    p.add_argument("--leadfield", default="synthetic", help="arquivo KMM1 ou 'synthetic'")
    p.add_argument("--sensors", type=int, default=config.get("simulation.sensors"))
    p.add_argument("--trials", type=int, default=config.get("simulation.trials"))
    p.add_argument("--noise-realizations", type=int, default=config.get("simulation.noise_realizations"))
    p.add_argument("--noise-recordings", type=int, default=config.get("simulation.noise_recordings"))
    p.add_argument("--patch-min", type=int, default=config.get("simulation.patch_min"))
    p.add_argument("--patch-max", type=int, default=config.get("simulation.patch_max"))
    p.add_argument("--snr-db", type=float, default=config.get("simulation.snr_db"))
    p.add_argument("--profile", default=config.get("simulation.profile"))
    p.add_argument("--seed", type=int, default=config.get("simulation.seed"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("estimate-noise", help="seleção wavelet, PCA e flip-flop do ruído")
    p.add_argument("--noise-trials", required=True, help="diretório gerado por simulate")
    p.add_argument("--wavelet-taps", type=int, default=config.get("wavelet.taps", 6))
    p.add_argument("--levels", type=int, default=config.get("wavelet.levels"))
    p.add_argument("--coeffs", type=int, default=config.get("wavelet.coeffs", 62))
    p.add_argument("--components", type=int, default=config.get("reduction.components", 15))
    p.add_argument("--tol", type=float, default=config.get("covariance.tol", 1e-8))
    p.add_argument("--max-iter", type=int, default=config.get("covariance.max_iter", 100))
    p.add_argument("--shrinkage", type=float, default=config.get("covariance.noise_shrinkage", 0.0))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_estimate_noise)

    p = sub.add_parser("invert", help="inversão G → GM → uGM")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--stage", choices=["G", "GM", "uGM"], default="uGM")
    p.add_argument("--alpha", type=float, default=config.get("mem.alpha", 0.25))
    p.add_argument("--rho", type=float, default=config.get("cortex.rho", 0.3))
    p.add_argument("--parcels", type=int, default=config.get("cortex.parcels", 156))
    p.add_argument("--grad-tol", type=float, default=config.get("optimizer.grad_tol", 1e-8))
    p.add_argument("--max-iter", type=int, default=config.get("optimizer.max_iter", 500))
    p.add_argument("--snr-factor", type=float, default=config.get("mem.snr_factor", 1.0))
    p.add_argument("--variance", type=float, default=config.get("mem.variance"))
    p.add_argument("--shrinkage", type=float, default=config.get("covariance.parcel_shrinkage", 0.05))
    p.add_argument("--average", action="store_true", help="inverte a média dos ensaios")
    p.add_argument("--workers", type=int, default=config.get("execution.workers", 1))
    p.add_argument("--seed", type=int, default=config.get("simulation.seed", 0))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_invert)

    p = sub.add_parser("evaluate", help="métricas ι, AUC e AUC restrita")
    p.add_argument("--truth", required=True)
    p.add_argument("--estimate", required=True)
    p.add_argument("--resamples", type=int, default=config.get("evaluation.resamples", 20))
    p.add_argument("--signed", action="store_true", default=config.get("evaluation.signed_kappa", False))
    p.add_argument("--seed", type=int, default=config.get("simulation.seed", 0))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="tabela critérios × estágios")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out", required=True, help=".csv ou .xlsx")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    config.setup_logging(args.log_level)
    debug = args.debug or config.is_debug_mode()
    logger.debug("Comando: %s", args.command)

    try:
        args.func(args)
    except Exception as e:
        print(f"Erro: {e}", file=sys.stderr)
        if debug:
            traceback.print_exc()
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
