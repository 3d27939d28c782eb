"""
Grafo da malha cortical: Laplaciano, parcelamento conexo, núcleos de difusão
por parcela e geração de patches conexos para as simulações.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import trimesh
from scipy import sparse
from scipy.sparse import csgraph

from core import DegenerateInputError, DimensionError, matrix_exp

logger = logging.getLogger(__name__)

BUILTIN_PREFIX = "builtin:icosphere:"


@dataclass(frozen=True)
class CortexGraph:
    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray
    adjacency: sparse.csr_matrix

    @property
    def n_vertices(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degree(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    @property
    def laplacian(self) -> sparse.csr_matrix:
        return (sparse.diags(self.degree) - self.adjacency).tocsr()

    def neighbors(self, v: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[v]:a.indptr[v + 1]]

    def hop_distances(self, sources: Sequence[int]) -> np.ndarray:
        """Distâncias em número de arestas, uma linha por fonte."""
        return csgraph.shortest_path(
            self.adjacency, unweighted=True, directed=False, indices=np.asarray(sources, dtype=np.int64)
        )


def build_graph(vertices, faces) -> CortexGraph:
    """Arestas = união das arestas dos triângulos, sem duplicatas; exige grafo conexo."""
    V = np.asarray(vertices, dtype=np.float64)
    F = np.asarray(faces)
    if V.ndim != 2:
        raise DimensionError(f"vértices devem ser (K, dim), recebido shape {V.shape}")
    if F.ndim != 2 or F.shape[1] != 3:
        raise DimensionError(f"faces devem ser (n, 3), recebido shape {F.shape}")
    F = F.astype(np.int64)

    K = V.shape[0]
    if F.size and (F.min() < 0 or F.max() >= K):
        raise ValueError(f"face referencia vértice fora de [0, {K})")

    pairs = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [0, 2]]])
    pairs = np.sort(pairs, axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    edges = np.unique(pairs, axis=0)

    ones = np.ones(len(edges))
    A = sparse.coo_matrix((ones, (edges[:, 0], edges[:, 1])), shape=(K, K))
    A = (A + A.T).tocsr()

    n_comp, _ = csgraph.connected_components(A, directed=False)
    if n_comp != 1:
        raise DegenerateInputError(f"malha desconexa: {n_comp} componentes")

    logger.debug("Grafo cortical: %d vértices, %d arestas", K, len(edges))
    return CortexGraph(V, F, edges, A)


def load_mesh(source: Union[str, Path]) -> trimesh.Trimesh:
    """Arquivo OFF ou `builtin:icosphere:N` (icosaedro subdividido N vezes)."""
    source = str(source)
    if source.startswith(BUILTIN_PREFIX):
        subdivisions = int(source[len(BUILTIN_PREFIX):])
        return trimesh.creation.icosphere(subdivisions=subdivisions)
    return trimesh.load_mesh(source, file_type="off", process=False)


def save_mesh(path: Union[str, Path], g: CortexGraph) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trimesh.Trimesh(vertices=g.vertices, faces=g.faces, process=False).export(str(path), file_type="off")
    return path


def graph_from_mesh(mesh: trimesh.Trimesh) -> CortexGraph:
    return build_graph(mesh.vertices, mesh.faces)


def is_connected(g: CortexGraph, vertex_set: Sequence[int]) -> bool:
    idx = np.asarray(vertex_set, dtype=np.int64)
    if idx.size <= 1:
        return True
    sub = g.adjacency[idx][:, idx]
    n_comp, _ = csgraph.connected_components(sub, directed=False)
    return n_comp == 1


@dataclass(frozen=True)
class ParcelSet:
    parcels: List[np.ndarray]
    n_vertices: int

    def __post_init__(self):
        parcels = [np.sort(np.asarray(p, dtype=np.int64)) for p in self.parcels]
        all_idx = np.concatenate(parcels) if parcels else np.array([], dtype=np.int64)
        if len(all_idx) != self.n_vertices or not np.array_equal(np.sort(all_idx), np.arange(self.n_vertices)):
            raise ValueError("parcelas não formam uma partição dos vértices")
        object.__setattr__(self, "parcels", parcels)

    def __len__(self) -> int:
        return len(self.parcels)

    def __iter__(self):
        return iter(self.parcels)

    def __getitem__(self, p: int) -> np.ndarray:
        return self.parcels[p]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(p) for p in self.parcels])

    @property
    def labels(self) -> np.ndarray:
        out = np.empty(self.n_vertices, dtype=np.int64)
        for i, p in enumerate(self.parcels):
            out[p] = i
        return out

    @classmethod
    def from_labels(cls, labels) -> "ParcelSet":
        labels = np.asarray(labels, dtype=np.int64)
        return cls([np.flatnonzero(labels == p) for p in np.unique(labels)], len(labels))


def farthest_point_seeds(g: CortexGraph, n_seeds: int, rng) -> np.ndarray:
    """Primeira semente sorteada; as seguintes maximizam a distância mínima às já escolhidas."""
    K = g.n_vertices
    seeds = [int(rng.integers(K))]
    nearest = g.hop_distances(seeds)[0]
    while len(seeds) < n_seeds:
        nxt = int(np.argmax(nearest))
        seeds.append(nxt)
        nearest = np.minimum(nearest, g.hop_distances([nxt])[0])
    return np.asarray(seeds, dtype=np.int64)


def assign_to_seeds(g: CortexGraph, seeds: Sequence[int]) -> ParcelSet:
    """
    Crescimento simultâneo a partir das sementes: cada vértice vai para a semente
    mais próxima; empate resolvido pela ordem da semente na lista.
    """
    dist = g.hop_distances(seeds)
    labels = np.argmin(dist, axis=0)
    parcels = [np.flatnonzero(labels == i) for i in range(len(seeds))]

    for i, p in enumerate(parcels):
        if not is_connected(g, p):
            raise DegenerateInputError(f"parcela {i} desconexa")
    return ParcelSet(parcels, g.n_vertices)


def parcellate(g: CortexGraph, n_parcels: int, rng) -> ParcelSet:
    K = g.n_vertices
    if not 1 <= n_parcels <= K:
        raise ValueError(f"n_parcels={n_parcels} fora de [1, {K}]")

    parcels = assign_to_seeds(g, farthest_point_seeds(g, n_parcels, rng))
    sizes = parcels.sizes
    logger.info(
        "Parcelamento: %d parcelas, tamanhos de %d a %d vértices", n_parcels, sizes.min(), sizes.max()
    )
    return parcels


def parcel_laplacian(g: CortexGraph, parcel: Sequence[int]) -> np.ndarray:
    """Laplaciano do subgrafo induzido pela parcela (denso)."""
    idx = np.asarray(parcel, dtype=np.int64)
    A = g.adjacency[idx][:, idx].toarray()
    return np.diag(A.sum(axis=1)) - A


def parcel_covariance(g: CortexGraph, parcel: Sequence[int], rho: float) -> np.ndarray:
    """Núcleo de difusão exp(-ρ·Δ_p) no subgrafo da parcela."""
    if rho < 0:
        raise ValueError(f"rho deve ser ≥ 0, recebido {rho}")
    if not is_connected(g, parcel):
        raise DegenerateInputError("parcela não induz subgrafo conexo")
    return matrix_exp(-rho * parcel_laplacian(g, parcel))


def parcel_covariances(g: CortexGraph, parcels: ParcelSet, rho: float) -> List[np.ndarray]:
    return [parcel_covariance(g, p, rho) for p in parcels]


def grow_patch(g: CortexGraph, seed: int, size: int, rng) -> np.ndarray:
    """
    Região conexa por busca em largura a partir de `seed`; dentro de cada camada
    os vértices entram em ordem sorteada por `rng`.
    """
    K = g.n_vertices
    if not 0 <= size <= K:
        raise ValueError(f"size={size} fora de [0, {K}]")
    if not 0 <= seed < K:
        raise ValueError(f"seed={seed} fora de [0, {K})")
    if size == 0:
        return np.array([], dtype=np.int64)

    visited = np.zeros(K, dtype=bool)
    visited[seed] = True
    patch = [int(seed)]
    layer = [int(seed)]

    while len(patch) < size:
        frontier = np.unique(np.concatenate([g.neighbors(v) for v in layer]))
        frontier = frontier[~visited[frontier]]
        if frontier.size == 0:
            raise DegenerateInputError("patch não pode crescer: componente esgotada")
        visited[frontier] = True
        frontier = rng.permutation(frontier)

        room = size - len(patch)
        patch.extend(int(v) for v in frontier[:room])
        layer = [int(v) for v in frontier]

    return np.sort(np.asarray(patch, dtype=np.int64))
