"""Pose-graph back-end.

Nodes are the per-scan mid-interpolation poses; consecutive nodes get an
odometry edge, accepted loop matches add loop edges between the anchor
scans. Gauss-Newton minimizes the weighted squared edge errors

    e(i, j) = [ Log(R_m^T R_i^T R_j) ; R_m^T (R_i^T (t_j - t_i) - t_m) ]

over right-multiplicative rotation updates and world-frame translation
updates, with node 0 pinned to fix the gauge. The linear systems are sparse
(6 unknowns per free node) and solved with scipy.

After optimization, each scan's begin/end poses are repaired by applying the
node's world-frame correction rigidly to both.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from . import geometry as geo
from .errors import SolverFailure
from .geometry import Pose, TrajectoryFrame
from .loop_closure import LoopConstraint, gravity_aligned

ODOMETRY_WEIGHT = 1.0
LOOP_WEIGHT_SCALE = 10.0  # loop edge weight = score * this


@dataclass(frozen=True)
class Edge:
    i: int
    j: int
    measurement: Pose  # measured X_i^-1 X_j
    weight: float
    kind: str  # "odometry" | "loop"


@dataclass
class PoseGraph:
    nodes: list[Pose]
    edges: list[Edge]


def build_graph(
    frames: Sequence[TrajectoryFrame],
    loops: Sequence[LoopConstraint] = (),
    eval_alpha: float = 0.5,
) -> PoseGraph:
    """Chain graph from odometry plus one edge per loop constraint.

    A loop constraint relates the two grids' gravity-aligned anchor frames;
    it is lifted onto the node poses through the (small) fixed offsets
    between each node and its gravity-aligned version.
    """
    if not frames:
        raise ValueError("need at least one frame")
    nodes = [geo.interpolate_pose(f, eval_alpha) for f in frames]
    edges = [
        Edge(
            i,
            i + 1,
            nodes[i].inverse() @ nodes[i + 1],
            ODOMETRY_WEIGHT,
            "odometry",
        )
        for i in range(len(nodes) - 1)
    ]
    for loop in loops:
        i, j = loop.scan_a, loop.scan_b
        off_i = nodes[i].inverse() @ gravity_aligned(nodes[i])
        off_j = nodes[j].inverse() @ gravity_aligned(nodes[j])
        measurement = off_i @ loop.relative_pose() @ off_j.inverse()
        edges.append(Edge(i, j, measurement, loop.score * LOOP_WEIGHT_SCALE, "loop"))
    return PoseGraph(nodes=nodes, edges=edges)


def _edge_error(nodes: Sequence[Pose], edge: Edge) -> np.ndarray:
    xi, xj = nodes[edge.i], nodes[edge.j]
    r_m = edge.measurement.rotation
    t_m = edge.measurement.t
    v = xi.rotation.T @ (xj.t - xi.t)
    e_t = r_m.T @ (v - t_m)
    r_err = r_m.T @ xi.rotation.T @ xj.rotation
    e_r = geo.quat_to_rotvec(geo.quat_from_matrix(r_err))
    return np.concatenate([e_r, e_t])


def total_error(nodes: Sequence[Pose], edges: Sequence[Edge]) -> float:
    return float(
        sum(edge.weight * float(e @ e) for edge in edges for e in [_edge_error(nodes, edge)])
    )


def _edge_jacobians(nodes: Sequence[Pose], edge: Edge):
    """(error, J_i, J_j) with 6x6 blocks ordered (rotation, translation)."""
    xi, xj = nodes[edge.i], nodes[edge.j]
    r_m = edge.measurement.rotation
    v = xi.rotation.T @ (xj.t - xi.t)
    e = _edge_error(nodes, edge)
    e_r = e[:3]

    j_i = np.zeros((6, 6))
    j_j = np.zeros((6, 6))
    rm_t = r_m.T
    ri_t = xi.rotation.T
    # rotation rows
    j_i[:3, :3] = -geo.so3_left_jacobian_inv(e_r) @ rm_t
    j_j[:3, :3] = geo.so3_right_jacobian_inv(e_r)
    # translation rows
    j_i[3:, :3] = rm_t @ geo.skew(v)
    j_i[3:, 3:] = -rm_t @ ri_t
    j_j[3:, 3:] = rm_t @ ri_t
    return e, j_i, j_j


def _apply_updates(nodes: list[Pose], delta: np.ndarray) -> list[Pose]:
    out = [nodes[0]]
    for n in range(1, len(nodes)):
        d = delta[6 * (n - 1) : 6 * n]
        pose = nodes[n]
        out.append(
            Pose(
                geo.quat_multiply(pose.q, geo.quat_from_rotvec(d[:3])),
                pose.t + d[3:],
            )
        )
    return out


def optimize(
    graph: PoseGraph,
    max_iter: int = 20,
    step_tol: float = 1e-6,
    max_halvings: int = 8,
) -> list[Pose]:
    """Gauss-Newton with step halving; node 0 stays fixed."""
    nodes = list(graph.nodes)
    n = len(nodes)
    if n < 2 or not graph.edges:
        return nodes
    n_free = 6 * (n - 1)

    def col(node_idx):  # column offset of a node's block, -1 when fixed
        return -1 if node_idx == 0 else 6 * (node_idx - 1)

    for _ in range(max_iter):
        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        vals: list[np.ndarray] = []
        g = np.zeros(n_free)
        block = np.arange(6)
        for edge in graph.edges:
            e, j_i, j_j = _edge_jacobians(nodes, edge)
            w = edge.weight
            for a_idx, j_a in ((edge.i, j_i), (edge.j, j_j)):
                ca = col(a_idx)
                if ca < 0:
                    continue
                g[ca : ca + 6] += w * (j_a.T @ e)
                for b_idx, j_b in ((edge.i, j_i), (edge.j, j_j)):
                    cb = col(b_idx)
                    if cb < 0:
                        continue
                    h_block = w * (j_a.T @ j_b)
                    rows.append(np.repeat(block + ca, 6))
                    cols.append(np.tile(block + cb, 6))
                    vals.append(h_block.reshape(-1))
        h = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_free, n_free),
        ).tocsr()
        h = h + 1e-9 * sparse.eye(n_free, format="csr")
        delta = spsolve(h, -g)
        if not np.all(np.isfinite(delta)):
            raise SolverFailure("pose graph normal equations are singular")

        f_old = total_error(nodes, graph.edges)
        accepted = None
        for _ in range(max_halvings):
            cand = _apply_updates(nodes, delta)
            if total_error(cand, graph.edges) <= f_old:
                accepted = cand
                break
            delta = 0.5 * delta
        if accepted is None:
            break  # no downhill direction left at this scale
        nodes = accepted
        if np.linalg.norm(delta) < step_tol:
            break
    return nodes


def repair_frames(
    frames: Sequence[TrajectoryFrame],
    old_nodes: Sequence[Pose],
    new_nodes: Sequence[Pose],
) -> list[TrajectoryFrame]:
    """Carry node corrections back onto the begin/end pose pairs.

    The correction is applied as a world-frame rigid motion, so the intra
    scan motion (end relative to begin) is preserved exactly.
    """
    if not (len(frames) == len(old_nodes) == len(new_nodes)):
        raise ValueError("frames and node lists must align")
    out = []
    for frame, old, new in zip(frames, old_nodes, new_nodes):
        corr = new @ old.inverse()
        out.append(replace(frame, begin=corr @ frame.begin, end=corr @ frame.end))
    return out


def write_g2o(path, graph: PoseGraph):
    """Minimal g2o-style dump (VERTEX_SE3:QUAT / EDGE_SE3:QUAT lines)."""
    lines = []
    for i, pose in enumerate(graph.nodes):
        qw, qx, qy, qz = pose.q
        x, y, z = pose.t
        lines.append(
            f"VERTEX_SE3:QUAT {i} {x:.12g} {y:.12g} {z:.12g} "
            f"{qx:.12g} {qy:.12g} {qz:.12g} {qw:.12g}"
        )
    info_rows = []
    for r in range(6):
        for c in range(r, 6):
            info_rows.append((r, c))
    for edge in graph.edges:
        qw, qx, qy, qz = edge.measurement.q
        x, y, z = edge.measurement.t
        info = " ".join(
            f"{edge.weight:.12g}" if r == c else "0" for r, c in info_rows
        )
        lines.append(
            f"EDGE_SE3:QUAT {edge.i} {edge.j} {x:.12g} {y:.12g} {z:.12g} "
            f"{qx:.12g} {qy:.12g} {qz:.12g} {qw:.12g} {info}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
