"""
SE(2) pose graph and its sparse Levenberg-Marquardt optimizer.

Edge residual: e = z_ij - relative(x_i, x_j), angle component wrapped.
Total cost: sum_e e^T Omega e. Node 0 is held fixed to remove the gauge freedom.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix, diags
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from app.core.errors import (
    DisconnectedGraphError,
    DuplicateEdgeError,
    InformationMatrixError,
    InvalidInputError,
    LogParseError,
    NumericalFailureError,
)
from app.core.geometry import Pose2D, Transform2D, normalize_angle, normalize_angles, relative
from app.models.slam_models import InformationConfig, OptimizerConfig

logger = logging.getLogger(__name__)


class EdgeKind(str, Enum):
    ODOMETRY = "odometry"
    WIFI_LOOP = "wifi_loop"
    ICP_PROXIMITY = "icp_proximity"
    ICP_LOOP = "icp_loop"


# LoopSource value -> edge kind
LOOP_EDGE_KIND = {
    "wifi_sequence": EdgeKind.WIFI_LOOP,
    "icp_proximity": EdgeKind.ICP_PROXIMITY,
    "icp_loop": EdgeKind.ICP_LOOP,
}

@dataclass
class GraphNode:
    id: int
    pose: Pose2D
    timestamp: float = 0.0


@dataclass
class GraphEdge:
    """Relative pose measurement of node `to_id` in the frame of node `from_id`."""

    from_id: int
    to_id: int
    measurement: Transform2D
    information: np.ndarray
    kind: EdgeKind = EdgeKind.ODOMETRY

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise InvalidInputError(f"edge endpoints must differ, got {self.from_id} twice")
        self.kind = EdgeKind(self.kind)
        self.information = validate_information(self.information)

    @property
    def key(self) -> Tuple[int, int, EdgeKind]:
        return self.from_id, self.to_id, self.kind


def validate_information(matrix) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape != (3, 3):
        raise InformationMatrixError(f"information matrix must be 3x3, got {matrix.shape}")
    if not np.all(np.isfinite(matrix)) or np.max(np.abs(matrix - matrix.T)) > 1e-12:
        raise InformationMatrixError("information matrix must be finite and symmetric")
    try:
        np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise InformationMatrixError("information matrix must be positive definite") from exc
    return matrix


def information_matrix(kind: EdgeKind, config: InformationConfig = None) -> np.ndarray:
    config = config or InformationConfig()
    diagonal = {
        EdgeKind.ODOMETRY: config.odometry,
        EdgeKind.WIFI_LOOP: config.wifi_loop,
        EdgeKind.ICP_PROXIMITY: config.icp_proximity,
        EdgeKind.ICP_LOOP: config.icp_loop,
    }[EdgeKind(kind)]
    return np.diag(np.asarray(diagonal, dtype=float))


class PoseGraph:
    """Nodes with dense ids 0..N-1 and uniquely keyed edges."""

    def __init__(self):
        self.nodes: List[GraphNode] = []
        self.edges: List[GraphEdge] = []
        self._edge_keys = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def add_node(self, pose: Pose2D, timestamp: float = 0.0) -> int:
        node_id = len(self.nodes)
        self.nodes.append(GraphNode(node_id, pose, float(timestamp)))
        return node_id

    def add_edge(self, edge: GraphEdge) -> None:
        for node_id in (edge.from_id, edge.to_id):
            if not 0 <= node_id < len(self.nodes):
                raise InvalidInputError(f"edge references unknown node {node_id}")
        if edge.key in self._edge_keys:
            raise DuplicateEdgeError(
                f"duplicate {edge.kind.value} edge {edge.from_id} -> {edge.to_id}")
        self._edge_keys.add(edge.key)
        self.edges.append(edge)

    def poses(self) -> List[Pose2D]:
        return [n.pose for n in self.nodes]

    def timestamps(self) -> np.ndarray:
        return np.array([n.timestamp for n in self.nodes])

    def pose_array(self) -> np.ndarray:
        return np.array([n.pose.as_array() for n in self.nodes]).reshape(-1, 3)

    def with_poses(self, poses: np.ndarray) -> "PoseGraph":
        """Copy of the graph with node estimates replaced by rows of `poses`."""
        poses = np.asarray(poses, dtype=float)
        if poses.shape != (len(self.nodes), 3):
            raise InvalidInputError(f"expected ({len(self.nodes)}, 3) poses, got {poses.shape}")
        graph = PoseGraph()
        for node, row in zip(self.nodes, poses):
            graph.add_node(Pose2D.from_array(row), node.timestamp)
        graph.edges = list(self.edges)
        graph._edge_keys = set(self._edge_keys)
        return graph

    def copy(self) -> "PoseGraph":
        return self.with_poses(self.pose_array())

    def edge_counts(self) -> Dict[str, int]:
        counts = {kind.value: 0 for kind in EdgeKind}
        for edge in self.edges:
            counts[edge.kind.value] += 1
        return counts

    def chi2(self) -> float:
        if not self.edges:
            return 0.0
        return _EdgeArrays(self.edges).chi2(self.pose_array())

    def unreachable_nodes(self, anchor: int = 0) -> List[int]:
        n = len(self.nodes)
        if n == 0:
            return []
        rows = [e.from_id for e in self.edges]
        cols = [e.to_id for e in self.edges]
        adjacency = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = connected_components(adjacency, directed=False)
        return [int(k) for k in np.nonzero(labels != labels[anchor])[0]]

    def check_connected(self, anchor: int = 0) -> None:
        unreachable = self.unreachable_nodes(anchor)
        if unreachable:
            raise DisconnectedGraphError(unreachable)


def residual(edge: GraphEdge, xi: Pose2D, xj: Pose2D) -> np.ndarray:
    """z_ij minus the predicted relative pose, heading wrapped to (-pi, pi]."""
    predicted = relative(xi, xj)
    error = edge.measurement.as_array() - predicted.as_array()
    error[2] = normalize_angle(error[2])
    return error


def edge_jacobians(xi: np.ndarray, xj: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Analytic derivatives of `residual` with respect to x_i and x_j.

    Args:
        xi, xj: (M, 3) arrays of edge endpoint poses

    Returns:
        two (M, 3, 3) stacks, d e / d x_i and d e / d x_j
    """
    c, s = np.cos(xi[:, 2]), np.sin(xi[:, 2])
    dx, dy = xj[:, 0] - xi[:, 0], xj[:, 1] - xi[:, 1]
    a = np.zeros((len(xi), 3, 3))
    a[:, 0, 0], a[:, 0, 1] = c, s
    a[:, 1, 0], a[:, 1, 1] = -s, c
    a[:, 0, 2] = s * dx - c * dy
    a[:, 1, 2] = c * dx + s * dy
    a[:, 2, 2] = 1.0
    b = np.zeros_like(a)
    b[:, :2, :2] = -a[:, :2, :2]
    b[:, 2, 2] = -1.0
    return a, b


class _EdgeArrays:
    """Edge data stacked into arrays for vectorised linearisation."""

    def __init__(self, edges: Sequence[GraphEdge]):
        self.i = np.array([e.from_id for e in edges], dtype=int)
        self.j = np.array([e.to_id for e in edges], dtype=int)
        self.z = np.array([e.measurement.as_array() for e in edges]).reshape(-1, 3)
        self.omega = np.array([e.information for e in edges]).reshape(-1, 3, 3)

    def residuals(self, x: np.ndarray) -> np.ndarray:
        xi, xj = x[self.i], x[self.j]
        c, s = np.cos(xi[:, 2]), np.sin(xi[:, 2])
        dx, dy = xj[:, 0] - xi[:, 0], xj[:, 1] - xi[:, 1]
        predicted = np.column_stack([c * dx + s * dy, -s * dx + c * dy, xj[:, 2] - xi[:, 2]])
        error = self.z - predicted
        error[:, 2] = normalize_angles(error[:, 2])
        return error

    def chi2(self, x: np.ndarray) -> float:
        e = self.residuals(x)
        return float(np.einsum("mi,mij,mj->", e, self.omega, e))

    def linearize(self, x: np.ndarray, n_nodes: int):
        """
        Normal equations over nodes 1..N-1.

        Returns:
            (H as CSC, gradient J^T Omega e, chi2)
        """
        e = self.residuals(x)
        a, b = edge_jacobians(x[self.i], x[self.j])
        jacobians = {"i": a, "j": b}
        nodes = {"i": self.i, "j": self.j}
        rows, cols, values = [], [], []
        gradient = np.zeros(3 * (n_nodes - 1))
        offsets = np.arange(3)
        for p in ("i", "j"):
            jp_t_omega = np.einsum("mji,mjk->mik", jacobians[p], self.omega)
            g = np.einsum("mik,mk->mi", jp_t_omega, e)
            free = nodes[p] > 0
            np.add.at(gradient, (3 * (nodes[p][free] - 1))[:, None] + offsets, g[free])
            for q in ("i", "j"):
                block = np.einsum("mik,mkl->mil", jp_t_omega, jacobians[q])
                both = free & (nodes[q] > 0)
                r = (3 * (nodes[p][both] - 1))[:, None, None] + offsets[None, :, None]
                k = (3 * (nodes[q][both] - 1))[:, None, None] + offsets[None, None, :]
                rows.append(np.broadcast_to(r, block[both].shape).ravel())
                cols.append(np.broadcast_to(k, block[both].shape).ravel())
                values.append(block[both].ravel())

        size = 3 * (n_nodes - 1)
        hessian = coo_matrix((np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(size, size)).tocsc()
        chi2 = float(np.einsum("mi,mij,mj->", e, self.omega, e))
        return hessian, gradient, chi2


@dataclass
class OptimizationResult:
    graph: PoseGraph
    initial_chi2: float
    final_chi2: float
    chi2_history: List[float] = field(default_factory=list)
    iterations: int = 0
    final_lambda: float = 0.0
    stop_reason: str = "converged"

    def to_dict(self) -> Dict:
        return {
            "initial_chi2": self.initial_chi2,
            "final_chi2": self.final_chi2,
            "accepted_steps": len(self.chi2_history) - 1,
            "iterations": self.iterations,
            "final_lambda": self.final_lambda,
            "stop_reason": self.stop_reason,
        }


def optimize(graph: PoseGraph, config: OptimizerConfig = None) -> OptimizationResult:
    """
    Minimise the total chi2 of the graph with node 0 fixed.

    A step is accepted only if it lowers chi2, so `chi2_history` is
    non-increasing and the returned graph is never worse than the input.

    Args:
        graph: pose graph holding the initial estimates
        config: iteration cap, convergence threshold and damping schedule

    Returns:
        OptimizationResult holding a new graph with the optimized poses

    Raises:
        DisconnectedGraphError: some node is not connected to node 0
        NumericalFailureError: the linear solve produced non-finite values
    """
    config = config or OptimizerConfig()
    n = len(graph)
    x = graph.pose_array()
    if n <= 1:
        chi2 = graph.chi2()
        return OptimizationResult(graph.copy(), chi2, chi2, [chi2], 0, config.initial_lambda, "trivial")

    graph.check_connected()
    arrays = _EdgeArrays(graph.edges)
    hessian, gradient, chi2 = arrays.linearize(x, n)
    if not math.isfinite(chi2):
        raise NumericalFailureError("initial chi2 is not finite")
    initial_chi2 = chi2
    history = [chi2]
    lam = config.initial_lambda
    stop_reason = "max_iterations"
    iterations = 0

    if chi2 == 0.0:
        stop_reason = "converged"
    else:
        for iterations in range(1, config.max_iterations + 1):
            damped = hessian + lam * diags(hessian.diagonal())
            delta = spsolve(damped.tocsc(), -gradient)
            if not np.all(np.isfinite(delta)):
                raise NumericalFailureError(f"non-finite update at iteration {iterations} (lambda={lam:.3g})")

            candidate = x.copy()
            candidate[1:] += delta.reshape(-1, 3)
            candidate[:, 2] = normalize_angles(candidate[:, 2])
            new_chi2 = arrays.chi2(candidate)
            if not math.isfinite(new_chi2):
                raise NumericalFailureError(f"non-finite chi2 at iteration {iterations}")

            if new_chi2 < chi2:
                relative_change = (chi2 - new_chi2) / chi2
                x, chi2 = candidate, new_chi2
                history.append(chi2)
                lam = lam / config.lambda_factor
                logger.debug(f"LM iteration {iterations}: chi2={chi2:.6g} lambda={lam:.3g}")
                if chi2 == 0.0 or relative_change < config.convergence_delta:
                    stop_reason = "converged"
                    break
                hessian, gradient, _ = arrays.linearize(x, n)
            else:
                lam = lam * config.lambda_factor
                if lam > config.max_lambda:
                    stop_reason = "lambda_limit"
                    break

    logger.info(f"Pose graph optimization: chi2 {initial_chi2:.6g} -> {chi2:.6g} "
                f"in {iterations} iterations ({stop_reason})")
    return OptimizationResult(graph.with_poses(x), initial_chi2, chi2, history, iterations, lam, stop_reason)


def build_graph(track, closures: Iterable = (), information: InformationConfig = None,
                initial_poses: Optional[Sequence[Pose2D]] = None) -> PoseGraph:
    """
    One node per track entry, odometry edges between consecutive nodes and
    one edge per loop closure.

    Args:
        track: FingerprintTrack supplying node times and odometry poses
        closures: LoopClosure objects; each becomes an edge node_j -> node_i
        information: per-kind information diagonals
        initial_poses: node estimates to start from (odometry when omitted)

    Raises:
        DuplicateEdgeError: two closures with the same endpoints and kind
    """
    information = information or InformationConfig()
    odometry = list(track.poses)
    estimates = list(initial_poses) if initial_poses is not None else odometry
    if len(estimates) != len(odometry):
        raise InvalidInputError("initial_poses must provide one pose per track node")

    graph = PoseGraph()
    for t, pose in zip(track.timestamps, estimates):
        graph.add_node(pose, t)

    odometry_info = information_matrix(EdgeKind.ODOMETRY, information)
    for k in range(len(odometry) - 1):
        graph.add_edge(GraphEdge(k, k + 1, relative(odometry[k], odometry[k + 1]), odometry_info, EdgeKind.ODOMETRY))

    for closure in closures:
        kind = LOOP_EDGE_KIND[closure.source.value]
        graph.add_edge(GraphEdge(closure.node_j, closure.node_i, closure.transform,
                                 information_matrix(kind, information), kind))
    return graph


def save_g2o(graph: PoseGraph, path: str) -> None:
    """Write VERTEX_SE2 / EDGE_SE2 lines; kind and timestamp ride in trailing comments."""
    with open(path, "w", encoding="utf-8") as handle:
        for node in graph.nodes:
            p = node.pose
            handle.write(f"VERTEX_SE2 {node.id} {p.x:.9f} {p.y:.9f} {p.theta:.9f} # timestamp={node.timestamp:.6f}\n")
        for edge in graph.edges:
            z, info = edge.measurement, edge.information
            upper = " ".join(f"{info[r, c]:.9g}" for r, c in ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)))
            handle.write(f"EDGE_SE2 {edge.from_id} {edge.to_id} {z.dx:.9f} {z.dy:.9f} {z.dtheta:.9f} "
                         f"{upper} # kind={edge.kind.value}\n")


def _comment_fields(comment: str) -> Dict[str, str]:
    fields = {}
    for token in comment.split():
        if "=" in token:
            key, value = token.split("=", 1)
            fields[key] = value
    return fields


def load_g2o(path: str) -> PoseGraph:
    graph = PoseGraph()
    vertices: Dict[int, Tuple[Pose2D, float]] = {}
    edges = []
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                body, _, comment = line.partition("#")
                tokens = body.split()
                if not tokens:
                    continue
                extra = _comment_fields(comment)
                record = (tokens[0], len(tokens))
                if record not in (("VERTEX_SE2", 5), ("EDGE_SE2", 12)):
                    raise LogParseError(path, line_no, f"unrecognised record '{tokens[0]}' with {len(tokens)} fields")
                try:
                    if tokens[0] == "VERTEX_SE2":
                        vertices[int(tokens[1])] = (Pose2D(*map(float, tokens[2:5])),
                                                    float(extra.get("timestamp", 0.0)))
                    else:
                        i11, i12, i13, i22, i23, i33 = map(float, tokens[6:12])
                        info = np.array([[i11, i12, i13], [i12, i22, i23], [i13, i23, i33]])
                        edges.append((int(tokens[1]), int(tokens[2]), Transform2D(*map(float, tokens[3:6])),
                                      info, EdgeKind(extra.get("kind", EdgeKind.ODOMETRY.value))))
                except ValueError as exc:
                    raise LogParseError(path, line_no, str(exc)) from exc
    except OSError as exc:
        raise LogParseError(path, None, f"cannot read graph: {exc}") from exc

    if sorted(vertices) != list(range(len(vertices))):
        raise InvalidInputError(f"{path}: vertex ids must be dense from 0")
    for node_id in range(len(vertices)):
        pose, timestamp = vertices[node_id]
        graph.add_node(pose, timestamp)
    for from_id, to_id, z, info, kind in edges:
        graph.add_edge(GraphEdge(from_id, to_id, z, info, kind))
    return graph
