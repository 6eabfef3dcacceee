"""Overlapping geodesic patches with per-patch disk charts and boundary-distance blending.

Patches are grown around randomly chosen centers out to a geodesic radius (a
fraction of the mesh's maximum axis extent), marked forbidden for later center
picks with a given probability, and each gets its own disk chart. Blending
weights come from the 2D distance to the patch chart's boundary polygon: positive
inside a patch, zero on its rim, normalized over all covering patches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import dijkstra as _dijkstra

from .errors import CoverageError, MeshError, OutOfChartError, TopologyError
from .geometry import TriMesh, edge_graph, mesh_extent
from .parameterization import DiskChart, check_disk_topology, embed_disk

_MAX_SHRINKS = 3


@dataclass
class Patch:
    """One surface patch: members within the geodesic radius of the center, plus chart."""

    index: int
    center: int
    vertex_ids: np.ndarray  # parent-mesh vertex ids, sorted
    chart: DiskChart
    forbade: np.ndarray  # vertices this patch newly marked forbidden


@dataclass
class PatchSet:
    """All patches plus coverage bookkeeping.

    Every mesh face (hence every vertex) is covered by at least one patch.
    """

    patches: list[Patch]
    radius_frac: float
    forbid_prob: float
    radius: float
    seed: int
    n_vertices: int
    n_faces: int
    face_cover: list[np.ndarray]
    vertex_cover: list[np.ndarray]
    _boundary_pack: tuple | None = field(default=None, repr=False, compare=False)
    _line_pack: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    def mean_overlap(self) -> float:
        return float(np.mean([len(c) for c in self.vertex_cover]))

    def overlap_histogram(self) -> dict[int, int]:
        counts = np.array([len(c) for c in self.vertex_cover])
        return {int(k): int((counts == k).sum()) for k in np.unique(counts)}

    def boundary_pack(self):
        """Padded per-patch boundary segment arrays for batched distance queries."""
        if self._boundary_pack is None:
            polys = [p.chart.uv[p.chart.boundary] for p in self.patches]
            emax = max(len(b) for b in polys)
            n = len(polys)
            seg_a = np.full((n, emax, 2), 1e9)
            seg_d = np.zeros((n, emax, 2))
            for i, poly in enumerate(polys):
                a = poly
                b = np.roll(poly, -1, axis=0)
                seg_a[i, : len(poly)] = a
                seg_d[i, : len(poly)] = b - a
            len2 = np.maximum(np.einsum("ped,ped->pe", seg_d, seg_d), 1e-300)
            self._boundary_pack = (seg_a, seg_d, len2)
        return self._boundary_pack

    def line_pack(self):
        """Padded inward edge-line data (nx, ny, c) per patch: for a point inside a
        patch's boundary polygon the distance to the polygon is min_e nx*x+ny*y-c.

        Boundary vertices sit on the unit circle in angular order, so the polygon is
        convex and the nearest boundary feature of an interior point is always the
        perpendicular foot on an edge; the edge-line distance is then exact.
        """
        if self._line_pack is None:
            polys = [p.chart.uv[p.chart.boundary] for p in self.patches]
            emax = max(len(b) for b in polys)
            n = len(polys)
            nx = np.zeros((n, emax))
            ny = np.zeros((n, emax))
            c = np.full((n, emax), -1e9)  # padded lines read as "very far inside"
            for i, poly in enumerate(polys):
                area2 = np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
                pts = poly if area2 > 0 else poly[::-1]
                d = np.roll(pts, -1, axis=0) - pts
                ln = np.maximum(np.linalg.norm(d, axis=1), 1e-300)
                # inward (left) normal of a counterclockwise polygon edge
                nxi = -d[:, 1] / ln
                nyi = d[:, 0] / ln
                nx[i, : len(pts)] = nxi
                ny[i, : len(pts)] = nyi
                c[i, : len(pts)] = nxi * pts[:, 0] + nyi * pts[:, 1]
            self._line_pack = (nx, ny, c)
        return self._line_pack


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _vertex_rings(mesh: TriMesh) -> list[np.ndarray]:
    rings: list[list[int]] = [[] for _ in range(mesh.n_vertices)]
    for a, b, c in mesh.faces:
        rings[a] += [b, c]
        rings[b] += [a, c]
        rings[c] += [a, b]
    return [np.unique(r) for r in rings]


def _incident_faces(mesh: TriMesh) -> list[np.ndarray]:
    inc: list[list[int]] = [[] for _ in range(mesh.n_vertices)]
    for fid, (a, b, c) in enumerate(mesh.faces):
        inc[a].append(fid)
        inc[b].append(fid)
        inc[c].append(fid)
    return [np.asarray(f, dtype=np.int64) for f in inc]


def _face_adjacency(mesh: TriMesh) -> list[np.ndarray]:
    by_edge: dict[tuple[int, int], list[int]] = {}
    for fid, (a, b, c) in enumerate(mesh.faces):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            by_edge.setdefault(key, []).append(fid)
    adj: list[list[int]] = [[] for _ in range(mesh.n_faces)]
    for flist in by_edge.values():
        for i in flist:
            for j in flist:
                if i != j:
                    adj[i].append(j)
    return [np.unique(a) for a in adj]


def _component_faces(seed_faces: np.ndarray, keep: np.ndarray, adj: list[np.ndarray]) -> np.ndarray:
    """Faces edge-connected to the seeds within the keep mask."""
    in_comp = np.zeros(len(keep), dtype=bool)
    stack = [int(f) for f in seed_faces if keep[f]]
    for f in stack:
        in_comp[f] = True
    while stack:
        f = stack.pop()
        for g in adj[f]:
            if keep[g] and not in_comp[g]:
                in_comp[g] = True
                stack.append(int(g))
    return np.flatnonzero(in_comp)


def extract_patches(mesh: TriMesh, radius_frac: float, forbid_prob: float, seed: int = 0) -> PatchSet:
    """Decompose the surface into overlapping patches, each with a disk chart.

    Centers are drawn uniformly from eligible (uncovered, non-forbidden) vertices;
    each patch collects vertices within `radius_frac * max_extent` geodesic distance
    (always including the center's one-ring), keeps the center's edge-connected face
    component, and shrinks toward the one-ring fan if the submesh is not a disk.
    After all vertices are covered, any face still inside no patch seeds an extra
    patch at one of its corners, so face coverage is complete too.
    """
    if radius_frac <= 0:
        raise ValueError("radius fraction must be positive")
    if not 0.0 <= forbid_prob <= 1.0:
        raise ValueError("forbid probability must be in [0, 1]")
    nv, nf = mesh.n_vertices, mesh.n_faces
    if nf == 0:
        raise MeshError("mesh has no faces")
    used = np.zeros(nv, dtype=bool)
    used[np.unique(mesh.faces)] = True
    if not used.all():
        raise MeshError(f"{int((~used).sum())} isolated vertex/vertices: cannot cover with patches")

    graph = edge_graph(mesh)
    radius = radius_frac * mesh_extent(mesh)
    rings = _vertex_rings(mesh)
    incident = _incident_faces(mesh)
    adj = _face_adjacency(mesh)
    rng = np.random.default_rng(seed)

    covered = np.zeros(nv, dtype=bool)
    forbidden = np.zeros(nv, dtype=bool)
    face_covered = np.zeros(nf, dtype=bool)
    face_cover: list[list[int]] = [[] for _ in range(nf)]
    vertex_cover: list[list[int]] = [[] for _ in range(nv)]
    patches: list[Patch] = []

    def grow(center: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Member faces (orig ids), member vertices (orig ids), local faces."""
        r = radius
        for _ in range(_MAX_SHRINKS + 1):
            dist = _dijkstra(graph, directed=False, indices=center, limit=r)
            in_ball = np.isfinite(dist) & (dist <= r)
            in_ball[rings[center]] = True
            in_ball[center] = True
            fmask = in_ball[mesh.faces].all(axis=1)
            fids = _component_faces(incident[center], fmask, adj)
            sub_faces = mesh.faces[fids]
            vids = np.unique(sub_faces)
            remap = np.full(nv, -1, dtype=np.int64)
            remap[vids] = np.arange(len(vids))
            local = remap[sub_faces]
            try:
                check_disk_topology(local, len(vids))
                return fids, vids, local
            except TopologyError:
                r *= 0.5
        # fallback: the center's face fan, a disk for any manifold vertex
        fids = incident[center]
        sub_faces = mesh.faces[fids]
        vids = np.unique(sub_faces)
        remap = np.full(nv, -1, dtype=np.int64)
        remap[vids] = np.arange(len(vids))
        local = remap[sub_faces]
        check_disk_topology(local, len(vids))
        return fids, vids, local

    while True:
        eligible = np.flatnonzero(~covered & ~forbidden)
        if len(eligible) == 0 and not covered.all():
            eligible = np.flatnonzero(~covered)
        if len(eligible) == 0:
            open_faces = np.flatnonzero(~face_covered)
            if len(open_faces) == 0:
                break
            eligible = np.unique(mesh.faces[open_faces])
        center = int(eligible[rng.integers(len(eligible))])

        fids, vids, local = grow(center)
        chart = embed_disk(mesh.vertices[vids], local, orig_vertex_ids=vids, orig_face_ids=fids)
        idx = len(patches)
        covered[vids] = True
        face_covered[fids] = True
        for f in fids:
            face_cover[f].append(idx)
        for v in vids:
            vertex_cover[v].append(idx)
        draw = rng.random(len(vids)) < forbid_prob
        newly = vids[draw & ~forbidden[vids]]
        forbidden[newly] = True
        patches.append(Patch(index=idx, center=center, vertex_ids=vids, chart=chart, forbade=newly))

    pset = PatchSet(
        patches=patches,
        radius_frac=float(radius_frac),
        forbid_prob=float(forbid_prob),
        radius=float(radius),
        seed=int(seed),
        n_vertices=nv,
        n_faces=nf,
        face_cover=[np.asarray(c, dtype=np.int64) for c in face_cover],
        vertex_cover=[np.asarray(c, dtype=np.int64) for c in vertex_cover],
    )
    if any(len(c) == 0 for c in pset.vertex_cover):
        raise CoverageError("internal: some vertex remained uncovered")
    return pset


# ---------------------------------------------------------------------------
# boundary distance and blending
# ---------------------------------------------------------------------------

def _dist_to_segments(pts: np.ndarray, a: np.ndarray, d: np.ndarray, len2: np.ndarray) -> np.ndarray:
    """Min distance of pts (M,2) to segments a + t*d per row; a/d are (M,E,2)."""
    diff = pts[:, None, :] - a
    t = np.einsum("med,med->me", diff, d) / len2
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[..., None] * d
    delta = pts[:, None, :] - proj
    return np.sqrt(np.einsum("med,med->me", delta, delta).min(axis=1))


def _point_in_polygon(poly: np.ndarray, q: np.ndarray) -> bool:
    """Even-odd crossing test."""
    x, y = q
    inside = False
    px = poly[:, 0]
    py = poly[:, 1]
    j = len(poly) - 1
    for i in range(len(poly)):
        if (py[i] > y) != (py[j] > y):
            xint = px[i] + (y - py[i]) * (px[j] - px[i]) / (py[j] - py[i])
            if x < xint:
                inside = not inside
        j = i
    return inside


def boundary_signed_distance(chart: DiskChart, uv) -> float:
    """Distance in chart 2D coordinates to the boundary polygon: negative inside,
    positive outside, zero on the boundary."""
    uv = np.asarray(uv, dtype=np.float64)
    poly = chart.uv[chart.boundary]
    a = poly
    d = np.roll(poly, -1, axis=0) - poly
    len2 = np.maximum(np.einsum("ed,ed->e", d, d), 1e-300)
    dist = float(_dist_to_segments(uv[None], a[None], d[None], len2[None])[0])
    if dist == 0.0:
        return 0.0
    return -dist if _point_in_polygon(poly, uv) else dist


def pair_boundary_distances(patchset: PatchSet, pair_patch: np.ndarray, pair_uv: np.ndarray) -> np.ndarray:
    """Distance to the owning patch's boundary polygon for many (patch, uv) pairs.

    The uv points are assumed to lie inside their patch charts (true for any point
    carried over from a member face), so this equals the magnitude of the signed
    boundary distance: each polygon is convex, hence the min over edge lines.
    """
    nx, ny, c = patchset.line_pack()
    pair_uv = np.asarray(pair_uv, dtype=np.float64)
    pair_patch = np.asarray(pair_patch)
    out = np.empty(len(pair_patch))
    order = np.argsort(pair_patch, kind="stable")
    sorted_p = pair_patch[order]
    group_starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_p)) + 1, [len(sorted_p)]])
    for g in range(len(group_starts) - 1):
        rows = order[group_starts[g]:group_starts[g + 1]]
        pid = int(sorted_p[group_starts[g]])
        d = pair_uv[rows] @ np.stack([nx[pid], ny[pid]]) - c[pid]
        out[rows] = d.min(axis=1)
    return np.maximum(out, 0.0)


def normalize_pair_weights(raw: np.ndarray, pair_sample: np.ndarray, n_samples: int) -> np.ndarray:
    """Per-sample weight normalization with the uniform all-boundary fallback."""
    sums = np.bincount(pair_sample, weights=raw, minlength=n_samples)
    counts = np.bincount(pair_sample, minlength=n_samples)
    if (counts == 0).any():
        raise CoverageError("sample with no covering patch")
    s = sums[pair_sample]
    fallback = s <= 0.0
    w = np.where(fallback, 1.0 / counts[pair_sample], raw / np.where(s > 0, s, 1.0))
    return w


def blend_weights(patchset: PatchSet, global_chart: DiskChart, q) -> list[tuple[int, float]]:
    """Normalized blending weights of all patches covering a global 2D point.

    Zero-weight patches are omitted; if every covering patch gives zero (the point
    sits on all their boundaries), weights fall back to uniform over the covering set.
    """
    q = np.asarray(q, dtype=np.float64)
    loc = global_chart.locate(q)
    if loc is None:
        raise OutOfChartError(f"point {q} is outside the global chart")
    tri, bary = loc
    orig = tri if global_chart.orig_face_ids is None else int(global_chart.orig_face_ids[tri])
    cover = patchset.face_cover[orig]
    if len(cover) == 0:
        raise CoverageError(f"face {orig} is covered by no patch")
    raw = []
    for pid in cover:
        chart = patchset.patches[pid].chart
        pf = chart.face_of_orig(orig)
        uv_local = bary @ chart.uv[chart.faces[pf]]
        raw.append(max(0.0, -boundary_signed_distance(chart, uv_local)))
    total = sum(raw)
    if total <= 1e-12:
        # the point sits on (or within float fuzz of) every covering patch boundary
        u = 1.0 / len(cover)
        return [(int(pid), u) for pid in cover]
    return [(int(pid), w / total) for pid, w in zip(cover, raw) if w > 0.0]


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def patch_rows(patchset: PatchSet) -> list[dict]:
    """Per-patch diagnostic rows for the patches CSV."""
    from .parameterization import chart_distortion

    cover_counts = np.array([len(c) for c in patchset.vertex_cover])
    rows = []
    for p in patchset.patches:
        scale, conformal = chart_distortion(p.chart)
        flips = int((p.chart.signed_areas() <= 0).sum())
        rows.append({
            "patch": p.index,
            "center": p.center,
            "vertices": len(p.vertex_ids),
            "faces": p.chart.n_faces,
            "flips": flips,
            "max_scale_distortion": float(np.max(scale)),
            "max_conformal_distortion": float(np.max(conformal)),
            "mean_overlap": float(cover_counts[p.vertex_ids].mean()),
        })
    return rows
