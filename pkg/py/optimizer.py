"""
Maximização sem restrições de funções côncavas suaves (L-BFGS com busca de Wolfe).
"""
import logging
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np
from scipy.optimize import line_search

from core import NumericalError

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]

CURVATURE_EPS = 1e-12
MIN_STEP = 1e-20
STALL_RTOL = 4.0 * np.finfo(np.float64).eps
STALL_PATIENCE = 10


@dataclass(frozen=True)
class OptimizerConfig:
    grad_tol: float = 1e-8
    max_iter: int = 500
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError(f"exige 0 < c1 < c2 < 1, recebido c1={self.c1}, c2={self.c2}")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol deve ser positivo")
        if self.max_iter < 0 or self.memory < 1:
            raise ValueError("max_iter ≥ 0 e memory ≥ 1")

    @classmethod
    def from_settings(cls, **overrides) -> "OptimizerConfig":
        from config_loader import config

        values = {
            "grad_tol": float(config.get("optimizer.grad_tol", cls.grad_tol)),
            "max_iter": int(config.get("optimizer.max_iter", cls.max_iter)),
            "memory": int(config.get("optimizer.memory", cls.memory)),
            "c1": float(config.get("optimizer.c1", cls.c1)),
            "c2": float(config.get("optimizer.c2", cls.c2)),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class OptimizeReport:
    iterations: int = 0
    objective: float = 0.0
    grad_norm: float = 0.0
    converged: bool = False
    trace: List[float] = field(default_factory=list)
    message: str = ""


class _Cached:
    """Avalia o objetivo uma vez por ponto; a busca linha pede valor e gradiente separados."""

    def __init__(self, objective: Objective):
        self._objective = objective
        self._key = None
        self._value = None

    def __call__(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        key = x.tobytes()
        if key != self._key:
            f, g = self._objective(x)
            f = float(f)
            g = np.asarray(g, dtype=np.float64).reshape(-1)
            if np.isnan(f) or np.any(np.isnan(g)):
                raise NumericalError("objetivo ou gradiente retornou NaN")
            self._key, self._value = key, (f, g)
        return self._value

    def neg_value(self, x):
        return -self(x)[0]

    def neg_grad(self, x):
        return -self(x)[1]


def _two_loop(g: np.ndarray, pairs) -> np.ndarray:
    """Direção de subida H·g a partir dos pares (s, y) do problema de minimização de -f."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * s.dot(q)
        q -= a * y
        alphas.append(a)

    if pairs:
        s, y, _ = pairs[-1]
        q *= s.dot(y) / y.dot(y)

    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * y.dot(q)
        q += (a - b) * s
    return q


def _backtrack(cached: _Cached, x, f, g, d, c1) -> Tuple[float, np.ndarray]:
    slope = g.dot(d)
    t = 1.0
    while t > MIN_STEP:
        x_new = x + t * d
        f_new, _ = cached(x_new)
        if f_new >= f + c1 * t * slope:
            return t, x_new
        t *= 0.5
    return 0.0, x


def maximize(objective: Objective, x0, cfg: OptimizerConfig = OptimizerConfig()) -> Tuple[np.ndarray, OptimizeReport]:
    """
    Subida quasi-Newton de memória limitada.

    Para quando ‖∇f(x)‖ ≤ grad_tol·(1 + |f(x)|) ou após max_iter iterações. A
    sequência de valores do objetivo é não decrescente. Falha da busca linear, ou
    STALL_PATIENCE passos seguidos sem ganho em f nem em ‖∇f‖, devolve o melhor
    iterado com converged=False.
    """
    cached = _Cached(objective)
    x = np.array(x0, dtype=np.float64).reshape(-1)
    f, g = cached(x)

    report = OptimizeReport(trace=[f])
    pairs = deque(maxlen=cfg.memory)
    stalls = 0
    best_gnorm = float(np.linalg.norm(g))

    for it in range(cfg.max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        report.iterations, report.objective, report.grad_norm = it, f, gnorm

        if gnorm <= cfg.grad_tol * (1.0 + abs(f)):
            report.converged = True
            report.message = "gradiente abaixo da tolerância"
            break
        if stalls >= STALL_PATIENCE:
            report.message = "sem progresso"
            break
        if it == cfg.max_iter:
            report.message = f"max_iter={cfg.max_iter} atingido"
            break

        d = _two_loop(g, list(pairs))
        if d.dot(g) <= 0:
            pairs.clear()
            d = g.copy()

        with warnings.catch_warnings():
            # LineSearchWarning é subclasse de RuntimeWarning
            warnings.simplefilter("ignore", RuntimeWarning)
            step, *_ = line_search(
                cached.neg_value, cached.neg_grad, x, d,
                gfk=-g, old_fval=-f, old_old_fval=None,
                c1=cfg.c1, c2=cfg.c2,
            )

        if step is not None:
            x_new = x + step * d
        else:
            logger.debug("busca de Wolfe falhou na iteração %d; recuando com Armijo", it)
            step, x_new = _backtrack(cached, x, f, g, d, cfg.c1)
            if step == 0.0:
                report.message = "falha da busca linear"
                break

        f_new, g_new = cached(x_new)
        s = x_new - x
        y = g - g_new
        sy = s.dot(y)
        if sy > CURVATURE_EPS * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))

        # f parado na precisão de máquina e gradiente sem melhora
        flat = f_new - f <= STALL_RTOL * (1.0 + abs(f))
        tiny = np.linalg.norm(s) <= STALL_RTOL * (1.0 + np.linalg.norm(x))
        gnorm_new = float(np.linalg.norm(g_new))
        stalls = stalls + 1 if (flat or tiny) and gnorm_new >= 0.9 * best_gnorm else 0
        best_gnorm = min(best_gnorm, gnorm_new)

        x, f, g = x_new, f_new, g_new
        report.trace.append(f)
        logger.debug("L-BFGS it=%d f=%.10g |g|=%.3e passo=%.3g", it + 1, f, np.linalg.norm(g), step)

    if not report.converged:
        logger.warning(
            "Otimizador não convergiu (%s): |g|=%.3e após %d iterações",
            report.message, report.grad_norm, report.iterations,
        )
    return x, report
