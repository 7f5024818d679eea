"""Dual-graph construction from hexahedral connectivity.

The node graph connects the 12 corner-node pairs of every element; the
element graph connects elements sharing a 4-node face.  Both carry a
rescaled symmetric-normalized Laplacian used as the spectral-filter
substrate of the recurrent graph cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConnectivityRangeError, DataValidationError, NonManifoldMeshError

# Corner numbering: nodes 0-3 are one face traversed counterclockwise,
# nodes 4-7 the opposite face in the same order.
HEX_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
)
HEX_FACES = (
    (0, 1, 2, 3), (4, 5, 6, 7),
    (0, 1, 5, 4), (1, 2, 6, 5),
    (2, 3, 7, 6), (3, 0, 4, 7),
)


@dataclass
class NodeGraph:
    """Undirected node adjacency stored as directed pairs (both ways)."""

    edges: np.ndarray    # [2M, 2], sorted row-major
    degrees: np.ndarray  # [N]
    n_nodes: int

    @property
    def n_undirected(self) -> int:
        return self.edges.shape[0] // 2


@dataclass
class ElementGraph:
    edges: np.ndarray    # [2M, 2], sorted row-major
    degrees: np.ndarray  # [E]
    n_elems: int

    @property
    def n_undirected(self) -> int:
        return self.edges.shape[0] // 2


@dataclass
class Incidence:
    """Element->corner-nodes map and its inverse node->elements map."""

    elem_nodes: np.ndarray            # [E, 8], connectivity order
    node_elems_offsets: np.ndarray    # [N+1]
    node_elems: np.ndarray            # flat, sorted per node
    n_nodes: int
    n_elems: int

    def elems_of_node(self, n: int) -> np.ndarray:
        return self.node_elems[self.node_elems_offsets[n] : self.node_elems_offsets[n + 1]]

    def node_counts(self) -> np.ndarray:
        """Number of incident elements per node."""
        return np.diff(self.node_elems_offsets)


@dataclass
class ScaledLaplacian:
    """Rescaled normalized Laplacian 2*L/lambda_max - I in CSR form."""

    matrix: sp.csr_matrix
    matrix_t: sp.csr_matrix
    lambda_max: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


@dataclass
class DualGraph:
    node_graph: NodeGraph
    element_graph: ElementGraph
    incidence: Incidence
    node_laplacian: ScaledLaplacian
    elem_laplacian: ScaledLaplacian


@dataclass
class BatchedGraph:
    """Block-diagonal merge of several cases' dual graphs."""

    graph: DualGraph
    node_offsets: np.ndarray  # [B+1]
    elem_offsets: np.ndarray  # [B+1]

    @property
    def n_cases(self) -> int:
        return len(self.node_offsets) - 1

    @property
    def node_case_index(self) -> np.ndarray:
        counts = np.diff(self.node_offsets)
        return np.repeat(np.arange(self.n_cases), counts)

    @property
    def elem_case_index(self) -> np.ndarray:
        counts = np.diff(self.elem_offsets)
        return np.repeat(np.arange(self.n_cases), counts)


def _validate_connectivity(connectivity: np.ndarray) -> np.ndarray:
    conn = np.asarray(connectivity)
    if conn.ndim != 2 or conn.shape[1] != 8 or conn.shape[0] < 1:
        raise DataValidationError(f"connectivity must be [E, 8], got {conn.shape}")
    if conn.min() < 0:
        raise ConnectivityRangeError("negative node index in connectivity")
    for e in range(conn.shape[0]):
        if len(set(conn[e].tolist())) != 8:
            raise DataValidationError(f"element {e} repeats a corner node")
    return conn.astype(np.int64)


def _dedup_directed(pairs: np.ndarray, n_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    """Given raw (i, j) pairs, return sorted directed edges and degrees."""
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    und = np.unique(np.stack([lo, hi], axis=1), axis=0)
    directed = np.concatenate([und, und[:, ::-1]], axis=0)
    order = np.lexsort((directed[:, 1], directed[:, 0]))
    directed = directed[order]
    degrees = np.bincount(directed[:, 0], minlength=n_vertices)
    return directed, degrees


def build_node_graph(connectivity: np.ndarray, n_nodes: int | None = None) -> NodeGraph:
    """Union of every element's 12 corner-pair edges, deduplicated."""
    conn = _validate_connectivity(connectivity)
    if n_nodes is None:
        n_nodes = int(conn.max()) + 1
    elif conn.max() >= n_nodes:
        raise ConnectivityRangeError(f"connectivity index outside [0, {n_nodes})")
    edge_idx = np.asarray(HEX_EDGES)
    pairs = np.stack(
        [conn[:, edge_idx[:, 0]].ravel(), conn[:, edge_idx[:, 1]].ravel()], axis=1
    )
    directed, degrees = _dedup_directed(pairs, n_nodes)
    return NodeGraph(edges=directed, degrees=degrees, n_nodes=n_nodes)


def build_element_graph(connectivity: np.ndarray) -> ElementGraph:
    """Connect elements that share a 4-node face."""
    conn = _validate_connectivity(connectivity)
    n_elems = conn.shape[0]
    face_owner: dict[tuple[int, ...], int] = {}
    pairs = []
    for e in range(n_elems):
        for face in HEX_FACES:
            key = tuple(sorted(conn[e, list(face)].tolist()))
            if key in face_owner:
                other = face_owner[key]
                if other < 0:
                    raise NonManifoldMeshError(
                        f"face {key} is shared by more than two elements"
                    )
                pairs.append((other, e))
                face_owner[key] = -1  # consumed; a third owner is non-manifold
            else:
                face_owner[key] = e
    if pairs:
        directed, degrees = _dedup_directed(np.asarray(pairs), n_elems)
    else:
        directed = np.zeros((0, 2), dtype=np.int64)
        degrees = np.zeros(n_elems, dtype=np.int64)
    return ElementGraph(edges=directed, degrees=degrees, n_elems=n_elems)


def build_incidence(connectivity: np.ndarray, n_nodes: int | None = None) -> Incidence:
    conn = _validate_connectivity(connectivity)
    if n_nodes is None:
        n_nodes = int(conn.max()) + 1
    n_elems = conn.shape[0]
    flat_nodes = conn.ravel()
    flat_elems = np.repeat(np.arange(n_elems), 8)
    order = np.lexsort((flat_elems, flat_nodes))
    counts = np.bincount(flat_nodes, minlength=n_nodes)
    offsets = np.zeros(n_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return Incidence(
        elem_nodes=conn,
        node_elems_offsets=offsets,
        node_elems=flat_elems[order],
        n_nodes=n_nodes,
        n_elems=n_elems,
    )


def _adjacency(edges: np.ndarray, n: int) -> sp.csr_matrix:
    data = np.ones(edges.shape[0], dtype=np.float64)
    return sp.csr_matrix((data, (edges[:, 0], edges[:, 1])), shape=(n, n))


def scaled_laplacian(
    graph: NodeGraph | ElementGraph, lambda_max_mode: str = "fixed"
) -> ScaledLaplacian:
    """Build 2*L/lambda_max - I with L = I - D^-1/2 A D^-1/2.

    Isolated vertices get identity rows in L.  ``lambda_max_mode`` is
    "fixed" (the spectral bound 2) or "power" (power-iteration estimate).
    """
    n = graph.n_nodes if isinstance(graph, NodeGraph) else graph.n_elems
    if n < 1:
        raise DataValidationError("empty graph")
    edges = graph.edges
    deg = np.asarray(graph.degrees, dtype=np.float64)
    with np.errstate(divide="ignore"):
        d_inv_sqrt = 1.0 / np.sqrt(deg)
    d_inv_sqrt[~np.isfinite(d_inv_sqrt)] = 0.0
    off_diag = -d_inv_sqrt[edges[:, 0]] * d_inv_sqrt[edges[:, 1]]
    if lambda_max_mode == "fixed":
        lam = 2.0
    elif lambda_max_mode == "power":
        adj = _adjacency(edges, n)
        d_half = sp.diags(d_inv_sqrt, format="csr")
        lap = sp.identity(n, format="csr") - d_half @ adj @ d_half
        lam = _power_iteration_lambda_max(lap)
    else:
        raise DataValidationError(f"unknown lambda_max_mode '{lambda_max_mode}'")
    # Assemble 2*L/lam - I in COO with an explicit diagonal so the pattern
    # stays "adjacency plus diagonal" even when the rescale zeroes it.
    scale = 2.0 / lam
    rows = np.concatenate([edges[:, 0], np.arange(n)])
    cols = np.concatenate([edges[:, 1], np.arange(n)])
    vals = np.concatenate([scale * off_diag, np.full(n, scale - 1.0)])
    rescaled = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    rescaled.sort_indices()
    matrix_t = rescaled.T.tocsr()
    matrix_t.sort_indices()
    return ScaledLaplacian(matrix=rescaled, matrix_t=matrix_t, lambda_max=lam)


def _power_iteration_lambda_max(lap: sp.csr_matrix, iters: int = 200) -> float:
    n = lap.shape[0]
    vec = np.random.default_rng(0).standard_normal(n)
    vec /= np.linalg.norm(vec)
    lam = 2.0
    for _ in range(iters):
        nxt = lap @ vec
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            return 1.0  # L is the zero map only if n == 0; identity rows give 1
        lam = float(vec @ nxt)
        vec = nxt / norm
    return max(lam, 1e-12)


def build_dual_graph(
    connectivity: np.ndarray,
    n_nodes: int | None = None,
    lambda_max_mode: str = "fixed",
) -> DualGraph:
    node_graph = build_node_graph(connectivity, n_nodes)
    element_graph = build_element_graph(connectivity)
    incidence = build_incidence(connectivity, node_graph.n_nodes)
    return DualGraph(
        node_graph=node_graph,
        element_graph=element_graph,
        incidence=incidence,
        node_laplacian=scaled_laplacian(node_graph, lambda_max_mode),
        elem_laplacian=scaled_laplacian(element_graph, lambda_max_mode),
    )


def merge_batch(graphs: list[DualGraph]) -> BatchedGraph:
    """Concatenate dual graphs with index offsets; no cross-case edges."""
    if not graphs:
        raise DataValidationError("cannot merge an empty batch")
    node_counts = [g.node_graph.n_nodes for g in graphs]
    elem_counts = [g.element_graph.n_elems for g in graphs]
    node_offsets = np.concatenate([[0], np.cumsum(node_counts)])
    elem_offsets = np.concatenate([[0], np.cumsum(elem_counts)])

    node_edges = np.concatenate(
        [g.node_graph.edges + off for g, off in zip(graphs, node_offsets[:-1])]
    )
    elem_edges_list = [
        g.element_graph.edges + off for g, off in zip(graphs, elem_offsets[:-1])
    ]
    elem_edges = (
        np.concatenate(elem_edges_list)
        if any(e.size for e in elem_edges_list)
        else np.zeros((0, 2), dtype=np.int64)
    )
    node_graph = NodeGraph(
        edges=node_edges,
        degrees=np.concatenate([g.node_graph.degrees for g in graphs]),
        n_nodes=int(node_offsets[-1]),
    )
    element_graph = ElementGraph(
        edges=elem_edges,
        degrees=np.concatenate([g.element_graph.degrees for g in graphs]),
        n_elems=int(elem_offsets[-1]),
    )
    conn = np.concatenate(
        [g.incidence.elem_nodes + off for g, off in zip(graphs, node_offsets[:-1])]
    )
    incidence = build_incidence(conn, node_graph.n_nodes)

    def merge_lap(attr: str) -> ScaledLaplacian:
        mats = [getattr(g, attr).matrix for g in graphs]
        merged = sp.block_diag(mats, format="csr")
        merged.sort_indices()
        merged_t = merged.T.tocsr()
        merged_t.sort_indices()
        return ScaledLaplacian(
            matrix=merged,
            matrix_t=merged_t,
            lambda_max=getattr(graphs[0], attr).lambda_max,
        )

    merged = DualGraph(
        node_graph=node_graph,
        element_graph=element_graph,
        incidence=incidence,
        node_laplacian=merge_lap("node_laplacian"),
        elem_laplacian=merge_lap("elem_laplacian"),
    )
    return BatchedGraph(
        graph=merged,
        node_offsets=node_offsets.astype(np.int64),
        elem_offsets=elem_offsets.astype(np.int64),
    )


def extract_case(batched: BatchedGraph, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Return the i-th case's node and element edge sets, re-based to 0."""
    n0, n1 = batched.node_offsets[i], batched.node_offsets[i + 1]
    e0, e1 = batched.elem_offsets[i], batched.elem_offsets[i + 1]
    ne = batched.graph.node_graph.edges
    ee = batched.graph.element_graph.edges
    node_mask = (ne[:, 0] >= n0) & (ne[:, 0] < n1)
    elem_mask = (ee[:, 0] >= e0) & (ee[:, 0] < e1) if ee.size else np.zeros(0, bool)
    return ne[node_mask] - n0, (ee[elem_mask] - e0 if ee.size else ee)


def mean_neighbor_matrix(graph: NodeGraph | ElementGraph) -> sp.csr_matrix:
    """Row-stochastic D^-1 A: row i averages the neighbors of vertex i."""
    n = graph.n_nodes if isinstance(graph, NodeGraph) else graph.n_elems
    deg = np.asarray(graph.degrees, dtype=np.float64)
    if np.any(deg == 0):
        raise DataValidationError("isolated vertex has no neighbor mean")
    adj = _adjacency(graph.edges, n)
    out = sp.diags(1.0 / deg, format="csr") @ adj
    out.sort_indices()
    return out


def structured_hex_grid(
    nx: int, ny: int, nz: int, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> tuple[np.ndarray, np.ndarray]:
    """Structured grid of nx*ny*nz hexes; returns (coords, connectivity).

    Node index = ix + iy*(nx+1) + iz*(nx+1)*(ny+1); corner order follows
    the standard brick convention (z-low face 0-3 counterclockwise, then
    the z-high face).
    """
    hx, hy, hz = spacing
    xs = np.arange(nx + 1) * hx
    ys = np.arange(ny + 1) * hy
    zs = np.arange(nz + 1) * hz
    gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def nid(ix, iy, iz):
        return ix + iy * (nx + 1) + iz * (nx + 1) * (ny + 1)

    cells = []
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                cells.append(
                    [
                        nid(ix, iy, iz),
                        nid(ix + 1, iy, iz),
                        nid(ix + 1, iy + 1, iz),
                        nid(ix, iy + 1, iz),
                        nid(ix, iy, iz + 1),
                        nid(ix + 1, iy, iz + 1),
                        nid(ix + 1, iy + 1, iz + 1),
                        nid(ix, iy + 1, iz + 1),
                    ]
                )
    return coords.astype(np.float64), np.asarray(cells, dtype=np.int64)


def graph_stats(connectivity: np.ndarray, n_nodes: int | None = None) -> dict:
    """Node/edge/degree summary used by the graph-stats CLI subcommand."""
    node_graph = build_node_graph(connectivity, n_nodes)
    element_graph = build_element_graph(connectivity)

    def histogram(degrees: np.ndarray) -> dict[str, int]:
        values, counts = np.unique(degrees, return_counts=True)
        return {str(int(v)): int(c) for v, c in zip(values, counts)}

    return {
        "n_nodes": node_graph.n_nodes,
        "n_elems": element_graph.n_elems,
        "node_edges_undirected": node_graph.n_undirected,
        "elem_edges_undirected": element_graph.n_undirected,
        "node_degree_histogram": histogram(node_graph.degrees),
        "elem_degree_histogram": histogram(element_graph.degrees),
    }
