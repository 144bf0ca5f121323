import hashlib
import logging
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, List, Optional, Tuple

import networkx as nx
import numpy as np

from errors import EdgeListParseError, GraphError
from models import CsbmParams
from services import numkit
from services.rng import stream

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-10
PROP_SYMMETRY_TOL = 1e-12
SIMPLE_EIGENVALUE_TOL = 1e-9


@dataclass(frozen=True)
class Graph:
    n: int
    edges: FrozenSet[Tuple[int, int]]

    def __post_init__(self):
        for i, j in self.edges:
            if i == j:
                raise GraphError(f"self-loop at node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise GraphError(f"edge ({i}, {j}) has an endpoint outside 0..{self.n - 1}")
            if i > j:
                raise GraphError(f"edge ({i}, {j}) is not stored as (min, max)")

    @classmethod
    def from_pairs(cls, n: int, pairs: Iterable[Tuple[int, int]]) -> "Graph":
        """Build from arbitrary undirected pairs, collapsing duplicates."""
        edges = set()
        for i, j in pairs:
            i, j = int(i), int(j)
            if i == j:
                raise GraphError(f"self-loop at node {i}")
            edges.add((min(i, j), max(i, j)))
        return cls(n=n, edges=frozenset(edges))

    @classmethod
    def from_networkx(cls, g: nx.Graph) -> "Graph":
        relabeled = nx.convert_node_labels_to_integers(g, ordering="sorted")
        return cls.from_pairs(relabeled.number_of_nodes(), relabeled.edges())

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return g

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        if self.edges:
            idx = np.array(sorted(self.edges))
            a[idx[:, 0], idx[:, 1]] = 1.0
            a[idx[:, 1], idx[:, 0]] = 1.0
        return a

    def degrees(self) -> np.ndarray:
        return self.adjacency().sum(axis=1)

    def sorted_edges(self) -> List[Tuple[int, int]]:
        return sorted(self.edges)


@dataclass(frozen=True)
class PropagationMatrix:
    p: np.ndarray = field(repr=False)
    lam: float
    eigenvalues: np.ndarray = field(repr=False)
    top_eigenvector_check: float
    divisor: float

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def gap(self) -> float:
        return 1.0 - self.lam

    def content_hash(self) -> str:
        return hashlib.sha256(self.p.astype("<f8").tobytes()).hexdigest()


@dataclass(frozen=True)
class CsbmSample:
    graph: Graph
    features: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    kept_nodes: np.ndarray = field(repr=False)
    n_drawn: int


def from_edge_list(text: str) -> Graph:
    """Parse "i j" lines (0-indexed, "#" comments) into an undirected graph.

    A "# n=N" header line fixes the node count so trailing isolated nodes survive.
    """
    pairs = []
    max_id = -1
    declared = None
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("# n="):
            try:
                declared = int(line[4:].split()[0])
            except (ValueError, IndexError):
                raise EdgeListParseError(f"bad header {line!r}", line_number)
            continue
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise EdgeListParseError(f"expected two node ids, got {line!r}", line_number)
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise EdgeListParseError(f"node ids must be integers, got {line!r}", line_number)
        if i < 0 or j < 0:
            raise EdgeListParseError(f"node ids must be nonnegative, got {line!r}", line_number)
        if i == j:
            raise GraphError(f"self-loop at node {i} (line {line_number})")
        pairs.append((i, j))
        max_id = max(max_id, i, j)
    n = max_id + 1 if declared is None else max(declared, max_id + 1)
    return Graph.from_pairs(n, pairs)


def to_edge_list(g: Graph) -> str:
    lines = [f"# n={g.n} edges={len(g.edges)}"]
    lines.extend(f"{i} {j}" for i, j in g.sorted_edges())
    return "\n".join(lines) + "\n"


def largest_component_nodes(g: Graph) -> np.ndarray:
    """Sorted original ids of the largest component (ties: smallest minimum id)."""
    if g.n == 0:
        raise GraphError("graph is empty")
    components = nx.connected_components(g.to_networkx())
    best = min(components, key=lambda c: (-len(c), min(c)))
    return np.array(sorted(best), dtype=np.int64)


def induced_subgraph(g: Graph, nodes: np.ndarray) -> Graph:
    """Subgraph on ``nodes`` relabeled 0..len(nodes)-1 in the given order."""
    index = {int(v): k for k, v in enumerate(nodes)}
    pairs = [(index[i], index[j]) for i, j in g.edges if i in index and j in index]
    return Graph.from_pairs(len(nodes), pairs)


def largest_component(g: Graph) -> Graph:
    return induced_subgraph(g, largest_component_nodes(g))


def is_connected(g: Graph) -> bool:
    return g.n > 0 and nx.is_connected(g.to_networkx())


def build_propagation(g: Graph, divisor_slack: float = 1.0, method: str = "lapack") -> PropagationMatrix:
    """P = Id - (D - A)/c with c = max degree + slack; symmetric, stochastic, nonnegative, with a simple top eigenvalue."""
    if divisor_slack <= 0:
        raise GraphError(f"divisor_slack must be positive, got {divisor_slack}")
    if g.n < 2:
        raise GraphError(f"propagation needs n >= 2, got {g.n}")

    a = g.adjacency()
    degrees = a.sum(axis=1)
    c = float(degrees.max()) + divisor_slack
    p = np.eye(g.n) - (np.diag(degrees) - a) / c

    asym = numkit.max_asymmetry(p)
    if asym > PROP_SYMMETRY_TOL:
        raise GraphError(f"propagation matrix is not symmetric (max asymmetry {asym:.3e})")
    row_err = float(np.max(np.abs(p.sum(axis=1) - 1.0)))
    if row_err > ROW_SUM_TOL:
        raise GraphError(f"propagation rows do not sum to 1 (max error {row_err:.3e})")
    if np.any(p < 0):
        raise GraphError("propagation matrix has negative entries")

    eigenvalues, _ = numkit.sym_eigs(p, method=method)
    multiplicity = int(np.sum(eigenvalues > 1.0 - SIMPLE_EIGENVALUE_TOL))
    if multiplicity != 1:
        raise GraphError(
            f"eigenvalue 1 not simple (multiplicity {multiplicity}); the graph is disconnected"
        )
    lam = float(np.max(np.abs(eigenvalues[1:])))
    if lam >= 1.0 - 1e-12:
        raise GraphError(f"second largest absolute eigenvalue {lam} is not below 1")

    u = np.ones(g.n) / np.sqrt(g.n)
    top_check = float(np.linalg.norm(p @ u - u))
    logger.info("Built propagation: n=%d c=%.1f lambda=%.6f gap=%.6f", g.n, c, lam, 1.0 - lam)
    return PropagationMatrix(p=p, lam=lam, eigenvalues=eigenvalues, top_eigenvector_check=top_check, divisor=c)


def ring_with_chords(n: int, chord_step: Optional[int] = None) -> Graph:
    """Deterministic connected graph: a cycle plus chords i -> i + step."""
    if n < 2:
        raise GraphError(f"ring_with_chords needs n >= 2, got {n}")
    if n == 2:
        return Graph.from_pairs(2, [(0, 1)])
    step = chord_step if chord_step is not None else max(2, n // 3)
    pairs = [(i, (i + 1) % n) for i in range(n)]
    if n > 4:
        pairs += [(i, (i + step) % n) for i in range(0, n, 2) if (i + step) % n != i]
    return Graph.from_pairs(n, pairs)


def csbm_generate(params: CsbmParams, seed: int) -> CsbmSample:
    """Two-community CSBM restricted to its largest connected component."""
    n, half = params.n, params.n // 2
    labels = np.repeat(np.array([0, 1]), half)

    # each unordered pair i < j is an independent Bernoulli draw
    graph_rng = stream(seed, "csbm-graph")
    rows, cols = np.triu_indices(n, k=1)
    same = labels[rows] == labels[cols]
    probs = np.where(same, params.p_in, params.p_out)
    draws = graph_rng.random(rows.shape[0])
    keep = draws < probs
    graph = Graph.from_pairs(n, zip(rows[keep].tolist(), cols[keep].tolist()))

    feature_rng = stream(seed, "csbm-features")
    direction = np.ones(params.d) / np.sqrt(params.d)
    signs = np.where(labels == 0, -1.0, 1.0)
    noise = feature_rng.standard_normal((n, params.d)) * params.noise_std
    features = params.mu * signs[:, None] * direction[None, :] + noise

    kept = largest_component_nodes(graph)
    if kept.shape[0] <= half:
        raise GraphError(
            f"largest component has {kept.shape[0]} of {n} nodes (not more than n/2); "
            "increase p_in/p_out for a denser graph"
        )
    logger.info("CSBM sample: kept %d/%d nodes, %d edges", kept.shape[0], n, len(graph.edges))
    return CsbmSample(
        graph=induced_subgraph(graph, kept),
        features=features[kept],
        labels=labels[kept],
        kept_nodes=kept,
        n_drawn=n,
    )
