import logging
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd
import yaml

from core import as_matrix, DimensionError

logger = logging.getLogger(__name__)

KMM_MAGIC = b"KMM1"
_HEADER = np.dtype([("rows", "<u4"), ("cols", "<u4")])

PathLike = Union[str, Path]


def write_kmm(path: PathLike, M) -> Path:
    """
    Grava matriz no formato KMM1: magic, (rows, cols) uint32 LE, float64 LE row-major.
    """
    M = as_matrix(M)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    header = np.array([(M.shape[0], M.shape[1])], dtype=_HEADER)
    with open(path, "wb") as f:
        f.write(KMM_MAGIC)
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(M, dtype="<f8").tobytes())
    return path


def read_kmm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()

    if raw[:4] != KMM_MAGIC:
        raise ValueError(f"{path}: magic inválido {raw[:4]!r}")
    if len(raw) < 4 + _HEADER.itemsize:
        raise ValueError(f"{path}: cabeçalho truncado")

    header = np.frombuffer(raw, dtype=_HEADER, count=1, offset=4)[0]
    rows, cols = int(header["rows"]), int(header["cols"])
    payload = raw[4 + _HEADER.itemsize:]

    if len(payload) != rows * cols * 8:
        raise ValueError(
            f"{path}: esperado {rows * cols * 8} bytes de dados, encontrado {len(payload)}"
        )

    M = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
    return as_matrix(M, str(path))


def write_csv_matrix(path: PathLike, M) -> Path:
    """CSV sem cabeçalho; vetores 1-D viram uma coluna."""
    arr = np.asarray(M, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionError(f"CSV aceita 1-D ou 2-D, recebido shape {arr.shape}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(arr).to_csv(path, header=False, index=False, float_format="%.17g")
    return path


def read_csv_matrix(path: PathLike) -> np.ndarray:
    df = pd.read_csv(path, header=None, float_precision="round_trip")
    return as_matrix(df.to_numpy(dtype=np.float64), str(path))


def read_csv_vector(path: PathLike) -> np.ndarray:
    M = read_csv_matrix(path)
    if 1 not in M.shape:
        raise DimensionError(f"{path}: esperado vetor, encontrado {M.shape}")
    return M.reshape(-1)


def _plain(value: Any) -> Any:
    # numpy -> tipos nativos para o YAML
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    return value


def write_manifest(path: PathLike, manifest: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(_plain(manifest), f, sort_keys=False, allow_unicode=True)
    return path


def read_manifest(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifesto não encontrado: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}
