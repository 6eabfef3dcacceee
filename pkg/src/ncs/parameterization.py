"""Disk embeddings of triangle meshes: convex-combination (mean-value weight)
parameterization with an arc-length circular boundary, point location, piecewise
linear lifts, and per-triangle distortion measures.

A chart maps a disk-topology (sub)mesh into the closed unit disk: the single
boundary loop lands exactly on the unit circle and interior positions solve a
sparse linear system with positive weights, which keeps every 2D triangle
positively oriented.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import bicgstab, spsolve

from .errors import NumericError, OutOfChartError, TopologyError
from .geometry import TriMesh

# barycentric tolerance for point-in-triangle acceptance at shared edges
_BARY_TOL = 1e-9
# convex-combination weights are clamped here to stay an M-matrix on obtuse meshes
_WEIGHT_CLAMP = 1e-8
# target relative residual of the interior solve
_SOLVE_TOL = 1e-10


@dataclass
class ChartPoint:
    """A located 2D point: uv plus the containing triangle and barycentric weights."""

    uv: np.ndarray
    tri: int
    bary: np.ndarray


class DiskChart:
    """2D embedding of a (sub)mesh into the unit disk, with lift and locate support.

    `orig_vertex_ids` / `orig_face_ids` map submesh indices back to the parent mesh;
    they are None for charts built over a whole mesh (identity mapping).
    """

    def __init__(self, points3d, faces, uv, boundary,
                 orig_vertex_ids=None, orig_face_ids=None):
        self.points3d = np.ascontiguousarray(points3d, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int32)
        self.uv = np.ascontiguousarray(uv, dtype=np.float64)
        self.boundary = np.ascontiguousarray(boundary, dtype=np.int64)
        self.orig_vertex_ids = None if orig_vertex_ids is None else np.asarray(orig_vertex_ids, dtype=np.int64)
        self.orig_face_ids = None if orig_face_ids is None else np.asarray(orig_face_ids, dtype=np.int64)
        self._grid = None
        self._bary_inv = None
        self._bary_origin = None
        self._orig_face_lookup: dict | None = None

    @property
    def n_vertices(self) -> int:
        return len(self.uv)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_of_orig(self, orig_face_id: int):
        """Local face index for a parent-mesh face id, or None if not in this chart."""
        if self.orig_face_ids is None:
            return int(orig_face_id) if 0 <= orig_face_id < self.n_faces else None
        if self._orig_face_lookup is None:
            self._orig_face_lookup = {int(o): i for i, o in enumerate(self.orig_face_ids)}
        return self._orig_face_lookup.get(int(orig_face_id))

    def signed_areas(self) -> np.ndarray:
        q = self.uv[self.faces]
        e1 = q[:, 1] - q[:, 0]
        e2 = q[:, 2] - q[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def validate(self) -> None:
        norms = np.linalg.norm(self.uv, axis=1)
        if norms.max() > 1.0 + 1e-9:
            raise NumericError(f"chart leaves the unit disk (max norm {norms.max():.2e})")
        bn = np.abs(np.linalg.norm(self.uv[self.boundary], axis=1) - 1.0)
        if bn.max() > 1e-9:
            raise NumericError("boundary loop is not on the unit circle")
        if (self.signed_areas() <= 0).any():
            raise NumericError(f"{int((self.signed_areas() <= 0).sum())} flipped/degenerate 2D triangle(s)")

    # ------------------------------------------------------------------
    # point location
    # ------------------------------------------------------------------

    def _ensure_locate(self):
        if self._grid is not None:
            return
        q = self.uv[self.faces]  # (F,3,2)
        origin = q[:, 0]
        e1 = q[:, 1] - q[:, 0]
        e2 = q[:, 2] - q[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        inv = np.empty((len(q), 2, 2))
        inv[:, 0, 0] = e2[:, 1] / det
        inv[:, 0, 1] = -e2[:, 0] / det
        inv[:, 1, 0] = -e1[:, 1] / det
        inv[:, 1, 1] = e1[:, 0] / det
        self._bary_origin = origin
        self._bary_inv = inv
        self._grid = _LocateGrid(q)

    def locate(self, q) -> tuple[int, np.ndarray] | None:
        """Containing triangle and barycentric weights of a 2D point, or None."""
        self._ensure_locate()
        q = np.asarray(q, dtype=np.float64)
        for fid in self._grid.candidates(q):
            d = q - self._bary_origin[fid]
            m = self._bary_inv[fid]
            b1 = m[0, 0] * d[0] + m[0, 1] * d[1]
            b2 = m[1, 0] * d[0] + m[1, 1] * d[1]
            b0 = 1.0 - b1 - b2
            if b0 >= -_BARY_TOL and b1 >= -_BARY_TOL and b2 >= -_BARY_TOL:
                return int(fid), np.array([b0, b1, b2])
        return None


class _LocateGrid:
    """Uniform 2D bucket grid over the chart's bounding box."""

    def __init__(self, tri_uv: np.ndarray):
        nf = len(tri_uv)
        self.res = int(min(max(4, np.ceil(np.sqrt(nf))), 256))
        lo = tri_uv.reshape(-1, 2).min(axis=0) - 1e-9
        hi = tri_uv.reshape(-1, 2).max(axis=0) + 1e-9
        self.lo = lo
        self.inv_cell = self.res / np.maximum(hi - lo, 1e-12)
        buckets: list[list[int]] = [[] for _ in range(self.res * self.res)]
        mins = tri_uv.min(axis=1)
        maxs = tri_uv.max(axis=1)
        i0 = np.clip(((mins - lo) * self.inv_cell).astype(int), 0, self.res - 1)
        i1 = np.clip(((maxs - lo) * self.inv_cell).astype(int), 0, self.res - 1)
        for fid in range(nf):
            for gy in range(i0[fid, 1], i1[fid, 1] + 1):
                row = gy * self.res
                for gx in range(i0[fid, 0], i1[fid, 0] + 1):
                    buckets[row + gx].append(fid)
        self._buckets = [np.asarray(b, dtype=np.int64) for b in buckets]
        self._empty = np.empty(0, dtype=np.int64)

    def candidates(self, q: np.ndarray) -> np.ndarray:
        cx, cy = (q - self.lo) * self.inv_cell
        gx, gy = int(cx), int(cy)
        if not (0 <= gx < self.res and 0 <= gy < self.res):
            return self._empty
        return self._buckets[gy * self.res + gx]


# ---------------------------------------------------------------------------
# topology helpers
# ---------------------------------------------------------------------------

def boundary_loops(faces: np.ndarray, n_vertices: int) -> list[list[int]]:
    """Ordered boundary loops of an oriented manifold patch (directed-edge walk)."""
    directed = set()
    for a, b, c in faces:
        directed.add((int(a), int(b)))
        directed.add((int(b), int(c)))
        directed.add((int(c), int(a)))
    nxt: dict[int, int] = {}
    for a, b in directed:
        if (b, a) not in directed:
            if a in nxt:
                raise TopologyError("non-manifold boundary (branching boundary vertex)")
            nxt[a] = b
    loops = []
    seen: set[int] = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        cur = nxt[start]
        while cur != start:
            loop.append(cur)
            if cur in seen:
                raise TopologyError("boundary walk revisited a vertex (non-manifold)")
            seen.add(cur)
            cur = nxt[cur]
        loops.append(loop)
    return loops


def check_disk_topology(faces: np.ndarray, n_vertices: int) -> list[int]:
    """Verify single-boundary disk topology; returns the ordered boundary loop.

    Raises TopologyError naming the violation: disconnected, closed, multiple
    boundary loops, or positive genus.
    """
    if len(faces) == 0:
        raise TopologyError("no faces")
    # connectivity over edges
    parent = np.arange(n_vertices)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for f in faces:
        r0 = find(f[0])
        r1 = find(f[1])
        r2 = find(f[2])
        parent[r1] = r0
        parent[find(r2)] = find(r0)
    used = np.unique(faces)
    if len(used) != n_vertices:
        raise TopologyError("isolated vertex: not every vertex belongs to a face")
    roots = {find(v) for v in used}
    if len(roots) > 1:
        raise TopologyError(f"submesh is not edge-connected ({len(roots)} components)")

    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    n_edges = len(np.unique(np.sort(e, axis=1), axis=0))
    loops = boundary_loops(faces, n_vertices)
    if len(loops) == 0:
        raise TopologyError("closed surface (no boundary): not a disk")
    if len(loops) > 1:
        raise TopologyError(f"multiple boundary loops ({len(loops)}): not a disk")
    euler = n_vertices - n_edges + len(faces)
    if euler != 1:
        raise TopologyError(f"genus > 0 (Euler characteristic {euler}): not a disk")
    return loops[0]


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def _mean_value_weights(verts: np.ndarray, faces: np.ndarray, n: int) -> csr_matrix:
    """Sparse symmetric-pattern matrix of mean-value edge weights (clamped positive)."""
    p = verts[faces]  # (F,3,3)
    rows, cols, vals = [], [], []
    for k in range(3):
        k1, k2 = (k + 1) % 3, (k + 2) % 3
        u = p[:, k1] - p[:, k]
        w = p[:, k2] - p[:, k]
        cross = np.linalg.norm(np.cross(u, w), axis=1)
        dot = np.einsum("ij,ij->i", u, w)
        ang = np.arctan2(cross, dot)
        t = np.tan(0.5 * ang)
        # the corner angle at k feeds the weights of both edges leaving k
        rows.append(faces[:, k])
        cols.append(faces[:, k1])
        vals.append(t)
        rows.append(faces[:, k])
        cols.append(faces[:, k2])
        vals.append(t)
    i = np.concatenate(rows)
    j = np.concatenate(cols)
    t = np.concatenate(vals)
    acc = csr_matrix((t, (i, j)), shape=(n, n))  # duplicate entries sum
    acc.sum_duplicates()
    coo = acc.tocoo()
    lengths = np.linalg.norm(verts[coo.row] - verts[coo.col], axis=1)
    wdata = np.maximum(coo.data / np.maximum(lengths, 1e-300), _WEIGHT_CLAMP)
    return csr_matrix((wdata, (coo.row, coo.col)), shape=(n, n))


def _solve_interior(w: csr_matrix, interior: np.ndarray, boundary_uv: np.ndarray,
                    boundary_idx: np.ndarray, n: int) -> np.ndarray:
    """Solve the convex-combination system for interior uv (two right-hand sides)."""
    idx_of = np.full(n, -1, dtype=np.int64)
    idx_of[interior] = np.arange(len(interior))
    coo = w.tocoo()
    on_int = idx_of[coo.row] >= 0
    row_i = idx_of[coo.row[on_int]]
    col = coo.col[on_int]
    val = coo.data[on_int]
    diag = np.zeros(len(interior))
    np.add.at(diag, row_i, val)

    col_is_int = idx_of[col] >= 0
    a_rows = np.concatenate([row_i[col_is_int], np.arange(len(interior))])
    a_cols = np.concatenate([idx_of[col[col_is_int]], np.arange(len(interior))])
    a_vals = np.concatenate([-val[col_is_int], diag])
    a = csr_matrix((a_vals, (a_rows, a_cols)), shape=(len(interior), len(interior)))

    uv_full = np.zeros((n, 2))
    uv_full[boundary_idx] = boundary_uv
    rhs = np.zeros((len(interior), 2))
    bmask = ~col_is_int
    np.add.at(rhs, row_i[bmask], val[bmask, None] * uv_full[col[bmask]])

    sol = np.empty_like(rhs)
    for c in range(2):
        b = rhs[:, c]
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            sol[:, c] = 0.0
            continue
        x, info = bicgstab(a, b, rtol=1e-12, atol=0.0, maxiter=40 * len(b) + 200)
        if info != 0 or np.linalg.norm(a @ x - b) > _SOLVE_TOL * bnorm:
            x = spsolve(a.tocsc(), b)
        if np.linalg.norm(a @ x - b) > _SOLVE_TOL * bnorm:
            raise NumericError("interior parameterization system did not converge")
        sol[:, c] = x
    return sol


def embed_disk(mesh_or_verts, faces=None, orig_vertex_ids=None, orig_face_ids=None) -> DiskChart:
    """Embed a disk-topology (sub)mesh into the unit disk.

    Boundary vertices go onto the unit circle at cumulative 3D arc length; interior
    vertices solve the mean-value convex-combination system. Raises TopologyError
    for non-disk input and NumericError if the chart would be invalid.
    """
    if isinstance(mesh_or_verts, TriMesh):
        verts = mesh_or_verts.vertices
        faces = mesh_or_verts.faces
    else:
        verts = np.asarray(mesh_or_verts, dtype=np.float64)
        faces = np.asarray(faces)
    faces = np.asarray(faces, dtype=np.int64)
    n = len(verts)
    loop = np.asarray(check_disk_topology(faces, n), dtype=np.int64)

    edge_vec = verts[np.roll(loop, -1)] - verts[loop]
    seglen = np.linalg.norm(edge_vec, axis=1)
    total = seglen.sum()
    if total <= 0:
        raise NumericError("boundary loop has zero length")
    arc = np.concatenate([[0.0], np.cumsum(seglen[:-1])])
    theta = 2.0 * np.pi * arc / total
    boundary_uv = np.stack([np.cos(theta), np.sin(theta)], axis=1)

    uv = np.zeros((n, 2))
    uv[loop] = boundary_uv
    on_boundary = np.zeros(n, dtype=bool)
    on_boundary[loop] = True
    interior = np.flatnonzero(~on_boundary)
    if len(interior):
        w = _mean_value_weights(verts, faces, n)
        uv[interior] = _solve_interior(w, interior, boundary_uv, loop, n)

    chart = DiskChart(verts, faces, uv, loop, orig_vertex_ids, orig_face_ids)
    areas = chart.signed_areas()
    if (areas < 0).all():
        # input winding was clockwise; mirror the chart
        chart.uv[:, 1] *= -1.0
        chart.boundary = chart.boundary[::-1].copy()
    chart.validate()
    return chart


# ---------------------------------------------------------------------------
# lifts and chart-to-chart transport
# ---------------------------------------------------------------------------

def chart_lift(chart: DiskChart, q) -> np.ndarray:
    """Map a 2D point (or a pre-located ChartPoint) to its 3D position."""
    if isinstance(q, ChartPoint):
        cp = q
    else:
        loc = chart.locate(q)
        if loc is None:
            raise OutOfChartError(f"point {np.asarray(q)} is outside the chart image")
        cp = ChartPoint(np.asarray(q, dtype=np.float64), loc[0], loc[1])
    tri = chart.faces[cp.tri]
    return cp.bary @ chart.points3d[tri]


def global_to_local(global_chart: DiskChart, patch_chart: DiskChart, q) -> ChartPoint | None:
    """Re-express a global 2D point in a patch chart via shared barycentric data.

    Returns None when the containing global face is not part of the patch
    (the caller-visible "not in patch" signal, not an error).
    """
    loc = global_chart.locate(np.asarray(q, dtype=np.float64))
    if loc is None:
        raise OutOfChartError(f"point {np.asarray(q)} is outside the global chart")
    tri, bary = loc
    orig = tri if global_chart.orig_face_ids is None else int(global_chart.orig_face_ids[tri])
    pf = patch_chart.face_of_orig(orig)
    if pf is None:
        return None
    uv_local = bary @ patch_chart.uv[patch_chart.faces[pf]]
    return ChartPoint(uv_local, pf, bary)


def chart_distortion(chart: DiskChart) -> tuple[np.ndarray, np.ndarray]:
    """Per-triangle (scale, conformal) distortion of the 2D->3D map.

    scale = sigma1*sigma2 (area ratio), conformal = sigma1/sigma2; degenerate 2D
    triangles get +inf in both.
    """
    q = chart.uv[chart.faces]
    p = chart.points3d[chart.faces]
    e2 = np.stack([q[:, 1] - q[:, 0], q[:, 2] - q[:, 0]], axis=2)  # (F,2,2)
    e3 = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # (F,3,2)
    det2 = e2[:, 0, 0] * e2[:, 1, 1] - e2[:, 0, 1] * e2[:, 1, 0]
    ok = np.abs(det2) > 1e-300
    inv = np.zeros_like(e2)
    d = np.where(ok, det2, 1.0)
    inv[:, 0, 0] = e2[:, 1, 1] / d
    inv[:, 0, 1] = -e2[:, 0, 1] / d
    inv[:, 1, 0] = -e2[:, 1, 0] / d
    inv[:, 1, 1] = e2[:, 0, 0] / d
    m = np.einsum("fij,fjk->fik", e3, inv)  # (F,3,2)
    g = np.einsum("fji,fjk->fik", m, m)  # (F,2,2) = M^T M
    tr = g[:, 0, 0] + g[:, 1, 1]
    dt = np.maximum(g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0], 0.0)
    disc = np.sqrt(np.maximum(tr * tr - 4.0 * dt, 0.0))
    s1 = np.sqrt(np.maximum(0.5 * (tr + disc), 0.0))
    s2 = np.sqrt(np.maximum(0.5 * (tr - disc), 0.0))
    scale = np.where(ok, s1 * s2, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        conformal = np.where(ok & (s2 > 0), s1 / np.maximum(s2, 1e-300), np.inf)
    return scale, conformal
