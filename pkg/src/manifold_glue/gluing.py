"""SPD calculus and the geometric losses that glue local metrics together.

Matrix square roots use the Denman-Beavers iteration, unrolled on the tape.
Inverses inside the iteration are taken by a detached solve followed by one
Newton correction step expressed in tape primitives: the correction leaves
the value exact to machine precision and its differential is
-A^{-1} dA A^{-1}, so the recorded adjoint is the true inverse adjoint. The
iteration is run on the Frobenius-normalized input, which makes it converge
for every SPD matrix and returns the square root and its inverse together.

Matrix logarithms go through inverse scaling-and-squaring: repeated square
roots until the iterate is near the identity, a Mercator series there, then
a power-of-two rescale. Determinant logs are traces of the matrix log and
are always computed in the log domain; raw determinants overflow long before
the losses would.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from manifold_glue import diff as D

__all__ = [
    "ConvergenceError",
    "GluingError",
    "TransportMap",
    "TrianglePath",
    "spd_sqrt",
    "spd_log_and_det",
    "transport",
    "holonomy_map",
    "holonomy_loss",
    "curvature_ratio",
    "curvature_loss",
    "single_edge_glue_terms",
    "dirichlet_energy",
    "triangle_triviality_oracle",
    "TriangleTrivialityReport",
    "sym_expm_np",
    "sym_logm_np",
]

DIAG_FAST_PATH_REL = 1e-10


class ConvergenceError(RuntimeError):
    """Iteration failed to reach tolerance; carries the final residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class GluingError(ValueError):
    """Malformed path or missing transport."""


@dataclass
class TransportMap:
    """Invertible linear map between two tangent spaces along an edge."""

    p: D.DiffTensor
    source: int = -1
    target: int = -1


TrianglePath = tuple[int, int, int]


def _inverse(a: D.DiffTensor) -> D.DiffTensor:
    # detached solve + one Newton-Hotelling step: exact value, exact adjoint
    n = a.shape[0]
    c = D.DiffTensor(np.linalg.inv(a.values))
    return D.matmul(c, D.sub(D.DiffTensor(2.0 * np.eye(n)), D.matmul(a, c)))


def _sym(a: D.DiffTensor) -> D.DiffTensor:
    return D.mul(D.add(a, D.transpose(a)), D.DiffTensor([[0.5]]))


def spd_sqrt(g: D.DiffTensor, tol: float = 1e-12, max_iter: int = 60,
             accept_tol: float | None = None) -> tuple[D.DiffTensor, D.DiffTensor]:
    """Square root and inverse square root of an SPD matrix, jointly.

    Denman-Beavers on the Frobenius-normalized input. Iterates until the
    relative residual ``||Y^2 - A||_F / ||A||_F`` drops below ``tol`` or
    stops improving (the iteration's rounding floor rises with the condition
    number); the best iterate is kept either way. Raises
    ``ConvergenceError`` with that residual if it exceeds ``accept_tol``
    (default: ``tol``), which signals a near-singular input.
    """
    m = g.shape[0]
    if g.shape[0] != g.shape[1]:
        raise D.ShapeError(f"spd_sqrt: non-square {g.shape}")
    if accept_tol is None:
        accept_tol = tol
    norm = D.sqrt(D.frobenius_sq(g))
    a = D.div(g, norm)
    y = a
    z = D.DiffTensor(np.eye(m))
    target = tol * float(np.linalg.norm(a.values))
    best = float("inf")
    best_pair = (y, z)
    stalled = 0
    for _ in range(max_iter):
        residual = float(np.linalg.norm(y.values @ y.values - a.values))
        if residual < 0.9 * best:
            best, best_pair, stalled = residual, (y, z), 0
        else:
            stalled += 1
        # the residual is not monotone while the iterate reshapes, so treat
        # non-improvement as the rounding floor only in the convergent tail
        if best < target or (stalled >= 2 and best < 1e-6):
            break
        y_next = D.mul(D.add(y, _inverse(z)), D.DiffTensor([[0.5]]))
        z = D.mul(D.add(z, _inverse(y)), D.DiffTensor([[0.5]]))
        y = y_next
    if best > accept_tol * float(np.linalg.norm(a.values)):
        raise ConvergenceError("spd_sqrt: Denman-Beavers did not converge", best)
    # symmetrize to kill drift, then undo the scaling
    y = _sym(best_pair[0])
    z = _sym(best_pair[1])
    root_norm = D.sqrt(norm)
    return D.mul(y, root_norm), D.div(z, root_norm)


def _is_near_diagonal(vals: np.ndarray) -> bool:
    off = vals - np.diag(np.diag(vals))
    return float(np.linalg.norm(off)) < DIAG_FAST_PATH_REL * float(np.trace(vals))


def _diag_log(g: D.DiffTensor) -> D.DiffTensor:
    # log of a (certified) diagonal matrix: mask, log, mask; off-diagonal
    # entries contribute log(1) = 0 and receive zero gradient
    m = g.shape[0]
    eye = D.DiffTensor(np.eye(m))
    ones_off = D.DiffTensor(np.ones((m, m)) - np.eye(m))
    return D.mul(D.log(D.add(D.mul(g, eye), ones_off)), eye)


def spd_log_and_det(g: D.DiffTensor, tol: float = 1e-12, max_iter: int = 60,
                    series_terms: int = 40) -> tuple[D.DiffTensor, D.DiffTensor]:
    """Matrix logarithm and log-determinant of an SPD matrix.

    Near-diagonal inputs (off-diagonal Frobenius mass below 1e-10 of the
    trace) take the elementwise path; everything else runs the square-root
    chain with a Mercator series. ``logdet`` is the trace of the result.
    """
    m = g.shape[0]
    if _is_near_diagonal(g.values):
        log_g = _diag_log(g)
        return log_g, D.trace(log_g)
    a = g
    squarings = 0
    while float(np.linalg.norm(a.values - np.eye(m))) > 0.3:
        if squarings >= 50:
            raise ConvergenceError("spd_log_and_det: square-root chain stalled",
                                   float(np.linalg.norm(a.values - np.eye(m))))
        # the chain contracts the condition number at every step, so only the
        # first root ever sits near the iteration's rounding floor
        a, _ = spd_sqrt(a, tol=tol, max_iter=max_iter, accept_tol=1e-8)
        squarings += 1
    x = D.sub(a, D.DiffTensor(np.eye(m)))
    term = x
    acc = x
    for j in range(2, series_terms + 1):
        term = D.matmul(term, x)
        acc = D.add(acc, D.mul(term, D.DiffTensor([[((-1.0) ** (j + 1)) / j]])))
        if float(np.linalg.norm(term.values)) / j < 1e-17:
            break
    log_g = _sym(D.mul(acc, D.DiffTensor([[float(2 ** squarings)]])))
    return log_g, D.trace(log_g)


def transport(g_src: D.DiffTensor, g_dst: D.DiffTensor,
              source: int = -1, target: int = -1) -> TransportMap:
    """Tangent translation along an edge: the SPD geometric-mean map

        P = G_dst^{-1/2} (G_dst^{1/2} G_src G_dst^{1/2})^{1/2} G_dst^{-1/2}

    which satisfies P^T G_dst P = G_src (pulls the target metric back onto
    the source one, so transported vectors keep their inner products).

    The inner square roots accept the iteration's rounding floor up to 1e-7
    relative; its contribution to the isometry defect stays well inside the
    map's own 1e-6 contract even for badly conditioned metric products.
    """
    if g_src.shape != g_dst.shape:
        raise D.ShapeError(f"transport: {g_src.shape} vs {g_dst.shape}")
    s, s_inv = spd_sqrt(g_dst, accept_tol=1e-7)
    middle = D.matmul(D.matmul(s, g_src), s)
    mid_root, _ = spd_sqrt(_sym(middle), accept_tol=1e-7)
    p = D.matmul(D.matmul(s_inv, mid_root), s_inv)
    return TransportMap(p=p, source=source, target=target)


def holonomy_map(cycle: list[int], transports: dict[tuple[int, int], TransportMap],
                 ) -> D.DiffTensor:
    """Ordered transport product around a closed cycle (later edges multiply
    on the left). Raises ``GluingError`` for an open cycle or a missing edge.
    """
    if len(cycle) < 2 or cycle[0] != cycle[-1]:
        raise GluingError(f"holonomy_map: cycle {cycle} is not closed")
    h: D.DiffTensor | None = None
    for a, b in zip(cycle[:-1], cycle[1:]):
        if (a, b) not in transports:
            raise GluingError(f"holonomy_map: no transport for edge ({a}, {b})")
        step = transports[(a, b)].p
        h = step if h is None else D.matmul(step, h)
    return h


def holonomy_loss(paths: list[TrianglePath],
                  metrics: dict[int, D.DiffTensor]) -> D.DiffTensor:
    """Mean squared deviation of triangle holonomy from the identity.

    Paths are adjacent-edge pairs (i, j, k); the closing leg (k, i) uses the
    direct transport between endpoint metrics, so the same expression covers
    true triangles and the sampled relaxation.
    """
    if not paths:
        raise GluingError("holonomy_loss: empty path set")
    m = next(iter(metrics.values())).shape[0]
    eye = D.DiffTensor(np.eye(m))
    acc = None
    for i, j, k in paths:
        p_ij = transport(metrics[i], metrics[j]).p
        p_jk = transport(metrics[j], metrics[k]).p
        p_ki = transport(metrics[k], metrics[i]).p
        h = D.matmul(p_ki, D.matmul(p_jk, p_ij))
        term = D.frobenius_sq(D.sub(h, eye))
        acc = term if acc is None else D.add(acc, term)
    return D.div(acc, D.DiffTensor([[float(len(paths))]]))


def curvature_ratio(g_i: D.DiffTensor, g_j: D.DiffTensor,
                    ) -> tuple[D.DiffTensor, float]:
    """Determinant ratio r = det G_i / det G_j, in the log domain, plus the
    scalar estimate 3 (1 - r) whose sign proxies the Ricci sign.
    """
    _, ld_i = spd_log_and_det(g_i)
    _, ld_j = spd_log_and_det(g_j)
    r = D.exp(D.sub(ld_i, ld_j))
    return r, 3.0 * (1.0 - r.item())


def curvature_loss(paths: list[TrianglePath],
                   metrics: dict[int, D.DiffTensor]) -> D.DiffTensor:
    """Second-difference penalty on log volume along adjacent edge pairs:
    mean over (i,j,k) of |log r_ij - log r_jk|^2, with log ratios taken as
    log-determinant differences directly.
    """
    if not paths:
        raise GluingError("curvature_loss: empty path set")
    logdets: dict[int, D.DiffTensor] = {}
    for node in {n for path in paths for n in path}:
        _, logdets[node] = spd_log_and_det(metrics[node])
    acc = None
    for i, j, k in paths:
        # log r_ij - log r_jk = ld_i - 2 ld_j + ld_k
        diff = D.add(D.sub(logdets[i], D.mul(logdets[j], D.DiffTensor([[2.0]]))),
                     logdets[k])
        term = D.mul(diff, diff)
        acc = term if acc is None else D.add(acc, term)
    return D.div(acc, D.DiffTensor([[float(len(paths))]]))


def single_edge_glue_terms(g_target: D.DiffTensor, g_proto: D.DiffTensor,
                           ) -> tuple[D.DiffTensor, D.DiffTensor]:
    """Degenerate transfer-graph fallback (one prototype, no triangle):
    ||P - I||_F^2 and |log r|^2 on the single edge."""
    m = g_target.shape[0]
    p = transport(g_target, g_proto).p
    holo = D.frobenius_sq(D.sub(p, D.DiffTensor(np.eye(m))))
    _, ld_t = spd_log_and_det(g_target)
    _, ld_p = spd_log_and_det(g_proto)
    diff = D.sub(ld_t, ld_p)
    return holo, D.mul(diff, diff)


def dirichlet_energy(g_field: np.ndarray, laplacian: np.ndarray, k: int = 2) -> float:
    """Diagnostic smoothness energy ||L^k g||^2 of a scalar node field."""
    if k < 1:
        raise ValueError("dirichlet_energy: k must be >= 1")
    v = np.asarray(g_field, dtype=np.float64).reshape(-1, 1)
    if laplacian.shape[0] != v.shape[0]:
        raise ValueError(
            f"dirichlet_energy: field length {v.shape[0]} vs laplacian {laplacian.shape}")
    for _ in range(k):
        v = laplacian @ v
    return float((v * v).sum())


# ---------------------------------------------------------------------------
# brute-force triangle-triviality check
# ---------------------------------------------------------------------------

@dataclass
class TriangleTrivialityReport:
    """Outcome of the exhaustive cycle-basis check on a small skeleton."""

    triangles: list[tuple[int, int, int]]
    edges_without_triangle: list[tuple[int, int]]
    triangles_trivial: bool
    basis_cycles: int
    basis_trivial: bool
    hypothesis_holds: bool
    implication_holds: bool
    max_triangle_deviation: float = 0.0
    max_basis_deviation: float = 0.0
    notes: list[str] = field(default_factory=list)


def triangle_triviality_oracle(num_nodes: int, edges: list[tuple[int, int]],
                               transports: dict[tuple[int, int], TransportMap],
                               tol: float = 1e-8) -> TriangleTrivialityReport:
    """Check, by exhaustive enumeration, that identity holonomy on every
    triangle forces identity holonomy on a fundamental cycle basis.

    Requires transports in both directions with P(j,i) = P(i,j)^{-1}; meant
    for skeletons of at most ~10 nodes.
    """
    if num_nodes > 10:
        raise GluingError("triangle_triviality_oracle: skeleton too large for brute force")
    edge_set = {(min(u, v), max(u, v)) for u, v in edges}
    adj: dict[int, set[int]] = {u: set() for u in range(num_nodes)}
    for u, v in edge_set:
        adj[u].add(v)
        adj[v].add(u)

    m = next(iter(transports.values())).p.shape[0]
    eye = np.eye(m)

    triangles = []
    for i in range(num_nodes):
        for j in range(i + 1, num_nodes):
            if j not in adj[i]:
                continue
            for k in range(j + 1, num_nodes):
                if k in adj[i] and k in adj[j]:
                    triangles.append((i, j, k))

    covered = set()
    for i, j, k in triangles:
        covered.update({(i, j), (j, k), (i, k)})
    uncovered = sorted(edge_set - covered)

    def holo(cycle):
        return holonomy_map(cycle, transports).values

    max_tri = 0.0
    for i, j, k in triangles:
        max_tri = max(max_tri, float(np.linalg.norm(holo([i, j, k, i]) - eye)))
    triangles_trivial = bool(triangles) and max_tri < tol

    # BFS spanning forest; every non-tree edge closes one basis cycle
    parent = {}
    order = []
    seen = set()
    for root in range(num_nodes):
        if root in seen or not adj[root]:
            continue
        seen.add(root)
        queue = [root]
        parent[root] = None
        while queue:
            u = queue.pop(0)
            order.append(u)
            for v in sorted(adj[u]):
                if v not in seen:
                    seen.add(v)
                    parent[v] = u
                    queue.append(v)

    def path_to_root(u):
        path = [u]
        while parent.get(path[-1]) is not None:
            path.append(parent[path[-1]])
        return path

    tree_edges = {(min(u, p), max(u, p)) for u, p in parent.items() if p is not None}
    basis_cycles = 0
    max_basis = 0.0
    for u, v in sorted(edge_set - tree_edges):
        pu, pv = path_to_root(u), path_to_root(v)
        su, sv = set(pu), set(pv)
        meet = next(x for x in pu if x in sv)
        up = pu[: pu.index(meet) + 1]           # u ... meet
        down = pv[: pv.index(meet) + 1][::-1]   # meet ... v
        cycle = up + down[1:] + [u]
        basis_cycles += 1
        max_basis = max(max_basis, float(np.linalg.norm(holo(cycle) - eye)))
    basis_trivial = max_basis < tol

    hypothesis = not uncovered and triangles_trivial
    report = TriangleTrivialityReport(
        triangles=triangles,
        edges_without_triangle=uncovered,
        triangles_trivial=triangles_trivial,
        basis_cycles=basis_cycles,
        basis_trivial=basis_trivial,
        hypothesis_holds=hypothesis,
        implication_holds=(not hypothesis) or basis_trivial,
        max_triangle_deviation=max_tri,
        max_basis_deviation=max_basis,
    )
    if uncovered:
        report.notes.append(f"edges not in any triangle: {uncovered}")
    return report


# ---------------------------------------------------------------------------
# numpy-side helpers for measurement paths (no gradients)
# ---------------------------------------------------------------------------

def sym_expm_np(s: np.ndarray) -> np.ndarray:
    """exp of a symmetric matrix via eigendecomposition (always SPD)."""
    lam, q = np.linalg.eigh(0.5 * (s + s.T))
    return (q * np.exp(lam)) @ q.T


def sym_logm_np(g: np.ndarray) -> np.ndarray:
    """log of an SPD matrix via eigendecomposition."""
    lam, q = np.linalg.eigh(0.5 * (g + g.T))
    if lam.min() <= 0:
        raise ValueError(f"sym_logm_np: matrix is not positive definite (min eig {lam.min():.3e})")
    return (q * np.log(lam)) @ q.T
