"""Synthetic test surfaces: grid planes with height fields, a saddle, an icosphere,
and a folded sheet whose detail cannot be written as a height field over a plane."""

from __future__ import annotations

import numpy as np

from .geometry import TriMesh


def grid_mesh(n: int, position_fn) -> TriMesh:
    """n x n vertex grid over [-1,1]^2; position_fn maps (x, y) arrays to (N,3)."""
    if n < 2:
        raise ValueError("grid needs at least 2 vertices per side")
    xs = np.linspace(-1.0, 1.0, n)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    verts = position_fn(gx.ravel(), gy.ravel())
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            b = a + 1
            c = a + n
            d = c + 1
            faces.append((a, c, b))
            faces.append((b, c, d))
    return TriMesh(np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64))


def plane(n: int = 16) -> TriMesh:
    return grid_mesh(n, lambda x, y: np.stack([x, y, np.zeros_like(x)], axis=1))


def bumpy_plane(n: int = 64, amplitude: float = 0.05, freq: float = 20.0) -> TriMesh:
    """z = amplitude * sin(freq*x) * sin(freq*y) over a [-1,1]^2 grid."""
    def pos(x, y):
        return np.stack([x, y, amplitude * np.sin(freq * x) * np.sin(freq * y)], axis=1)

    return grid_mesh(n, pos)


def saddle(n: int = 48, c: float = 0.4) -> TriMesh:
    def pos(x, y):
        return np.stack([x, y, c * (x * x - y * y)], axis=1)

    return grid_mesh(n, pos)


def folded_sheet(n: int = 48, amp: float = 0.15, freq: float = 8.0) -> TriMesh:
    """A sheet whose cross-section curls: x drifts with sin while z follows cos.

    With amp*freq > 1 the profile folds over itself, so the surface is not a
    height field over any plane; purely normal displacements of a smooth base
    cannot reproduce it.
    """
    def pos(x, y):
        return np.stack([x + amp * np.sin(freq * x), y, amp * np.cos(freq * x)], axis=1)

    return grid_mesh(n, pos)


def icosphere(subdivisions: int = 3) -> TriMesh:
    """Subdivided icosahedron projected to the unit sphere (3 subdivisions = 642 vertices)."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                midpoint[key] = len(verts)
                verts.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64))
