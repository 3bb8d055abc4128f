"""Structured coarse/fine triangulations of the unit square with snapped fractures.

Both grids split every square cell along the lower-left to upper-right
diagonal, so every coarse edge is a union of fine edges and each fine
triangle lies in exactly one coarse triangle.  Fractures are zero-width
segments replaced by chains of fine edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DegenerateFractureError, InvalidArgumentError

INTERIOR, DIRICHLET_LEFT, NEUMANN = 0, 1, 2

# fine-edge steps available on the diagonal-split lattice
_STEPS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1))


@dataclass(frozen=True)
class FractureNetwork:
    """Zero-width conductive segments; ``segments`` has shape (m, 2, 2)."""

    segments: np.ndarray
    k_f: float = 1.0e2

    def __post_init__(self):
        seg = np.asarray(self.segments, dtype=float).reshape(-1, 2, 2)
        if np.any(seg < 0.0) or np.any(seg > 1.0):
            raise InvalidArgumentError("fracture endpoint outside the unit square")
        lengths = np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1)
        if np.any(lengths <= 0.0):
            raise InvalidArgumentError("fracture segment with zero length")
        object.__setattr__(self, "segments", seg)

    @classmethod
    def empty(cls, k_f=1.0e2):
        return cls(np.zeros((0, 2, 2)), k_f)

    def __len__(self):
        return len(self.segments)


def read_fractures(path, k_f=1.0e2) -> FractureNetwork:
    """Read ``x1 y1 x2 y2`` lines; ``#`` starts a comment."""
    segments = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise InvalidArgumentError(f"{path}:{lineno}: expected 4 numbers, got {len(parts)}")
        try:
            x1, y1, x2, y2 = map(float, parts)
        except ValueError as exc:
            raise InvalidArgumentError(f"{path}:{lineno}: {exc}") from None
        segments.append(((x1, y1), (x2, y2)))
    return FractureNetwork(np.array(segments, dtype=float).reshape(-1, 2, 2), k_f)


def write_fractures(path, network: FractureNetwork):
    lines = ["# x1 y1 x2 y2"]
    for (a, b) in network.segments:
        lines.append(f"{a[0]:.6g} {a[1]:.6g} {b[0]:.6g} {b[1]:.6g}")
    Path(path).write_text("\n".join(lines) + "\n")


def _structured_triangles(n):
    """Vertices and CCW triangles of an n x n diagonal-split grid on [0,1]^2.

    Triangle ``2*(j*n+i)`` is the lower-right half of square (i, j),
    ``2*(j*n+i)+1`` the upper-left half.
    """
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs)  # row index = j (y), column = i (x)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + (n + 1)
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper
    return vertices, elements


def triangle_areas(vertices, elements):
    p = vertices[elements]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


@dataclass(frozen=True, eq=False)
class CoarseMesh:
    n: int
    vertices: np.ndarray
    elements: np.ndarray
    vertex_neighborhoods: tuple
    H: float

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    def areas(self):
        return triangle_areas(self.vertices, self.elements)

    def centroids(self):
        return self.vertices[self.elements].mean(axis=1)

    def dirichlet_vertices(self):
        return np.flatnonzero(self.vertices[:, 0] == 0.0)

    def hat_gradients(self):
        """Constant gradients of the three linear hats on each element, shape (N, 3, 2)."""
        p = self.vertices[self.elements]
        return _barycentric_gradients(p)


def _barycentric_gradients(p):
    """Gradients of P1 barycentric functions for triangles ``p`` of shape (T, 3, 2)."""
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    grads = np.empty(p.shape, dtype=float)
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        grads[:, a, 0] = p[:, b, 1] - p[:, c, 1]
        grads[:, a, 1] = p[:, c, 0] - p[:, b, 0]
    return grads / area2[:, None, None]


def build_coarse_mesh(n: int) -> CoarseMesh:
    """Structured n x n coarse triangulation with 2n^2 triangles."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgumentError(f"coarse resolution must be a positive integer, got {n!r}")
    vertices, elements = _structured_triangles(int(n))
    hoods = [[] for _ in range(len(vertices))]
    for k, tri in enumerate(elements):
        for v in tri:
            hoods[v].append(k)
    hoods = tuple(np.array(h, dtype=np.int64) for h in hoods)
    return CoarseMesh(int(n), vertices, elements, hoods, 1.0 / n)


@dataclass(frozen=True, eq=False)
class FineMesh:
    """Fine triangulation nested in a coarse one.

    ``parent[t]`` is the coarse element containing fine triangle ``t``.
    ``fracture_edges`` holds sorted fine-vertex pairs with matching
    ``fracture_ids``; ``chains[f]`` is the snapped vertex path of fracture f.
    """

    n: int
    r: int
    vertices: np.ndarray
    elements: np.ndarray
    parent: np.ndarray
    element_to_fine: tuple
    boundary_tags: np.ndarray
    fracture_edges: np.ndarray
    fracture_ids: np.ndarray
    chains: tuple
    snap_residuals: np.ndarray
    h: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "h", 1.0 / (self.n * self.r))

    @property
    def N(self):
        """Fine cells per side."""
        return self.n * self.r

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    def areas(self):
        return triangle_areas(self.vertices, self.elements)

    def dirichlet_nodes(self):
        return np.flatnonzero(self.boundary_tags == DIRICHLET_LEFT)

    def coarse_vertex_node(self, i):
        """Fine vertex coinciding with coarse vertex ``i``."""
        cj, ci = divmod(int(i), self.n + 1)
        return cj * self.r * (self.N + 1) + ci * self.r


def _lattice_distance(dx, dy):
    # shortest path length on the lattice with steps _STEPS
    if dx * dy >= 0:
        return max(abs(dx), abs(dy))
    return abs(dx) + abs(dy)


def _snap_point(p, N):
    # nearest lattice vertex, exact halves rounded down
    return int(math.ceil(p[0] * N - 0.5)), int(math.ceil(p[1] * N - 0.5))


def snap_segment(a, b, N):
    """Snap segment ``a``-``b`` to a chain of fine-lattice vertices (i, j).

    Endpoints go to the nearest lattice vertex; the walk then takes
    shortest-path lattice steps, each time choosing the step whose new vertex
    is closest to the line through the snapped endpoints (ties: smaller
    vertex index).  Snapping an already snapped chain reproduces it.
    """
    start = _snap_point(a, N)
    end = _snap_point(b, N)
    if start == end:
        raise DegenerateFractureError(
            f"segment {tuple(a)}-{tuple(b)} collapses to a single fine vertex"
        )
    ex, ey = end[0] - start[0], end[1] - start[1]
    norm = math.hypot(ex, ey)
    chain = [start]
    cur = start
    while cur != end:
        remaining = _lattice_distance(end[0] - cur[0], end[1] - cur[1])
        best = None
        for sx, sy in _STEPS:
            nx, ny = cur[0] + sx, cur[1] + sy
            if not (0 <= nx <= N and 0 <= ny <= N):
                continue
            if _lattice_distance(end[0] - nx, end[1] - ny) != remaining - 1:
                continue
            off = abs((nx - start[0]) * ey - (ny - start[1]) * ex) / norm
            key = (round(off, 12), ny * (N + 1) + nx)
            if best is None or key < best[0]:
                best = (key, (nx, ny))
        cur = best[1]
        chain.append(cur)
    return chain


def build_fine_mesh(coarse: CoarseMesh, r: int, fractures: FractureNetwork | None = None) -> FineMesh:
    """Refine each coarse square into r x r fine squares and snap fractures."""
    if not isinstance(r, (int, np.integer)) or r < 1:
        raise InvalidArgumentError(f"refinement must be a positive integer, got {r!r}")
    if fractures is None:
        fractures = FractureNetwork.empty()
    n, r = coarse.n, int(r)
    N = n * r
    vertices, elements = _structured_triangles(N)

    # parent coarse element of each fine triangle
    sq = np.arange(N * N)
    J, I = np.divmod(sq, N)
    ci, cj = I // r, J // r
    li, lj = I % r, J % r
    coarse_sq = cj * n + ci
    parent = np.empty(2 * N * N, dtype=np.int64)
    # fine lower half: coarse lower unless the fine square is above the diagonal
    parent[0::2] = 2 * coarse_sq + (lj > li)
    parent[1::2] = 2 * coarse_sq + (lj >= li)
    order = np.argsort(parent, kind="stable")
    counts = np.bincount(parent, minlength=coarse.n_elements)
    element_to_fine = tuple(np.split(order, np.cumsum(counts)[:-1]))

    tags = np.zeros(len(vertices), dtype=np.int8)
    x, y = vertices[:, 0], vertices[:, 1]
    on_boundary = (x == 0.0) | (x == 1.0) | (y == 0.0) | (y == 1.0)
    tags[on_boundary] = NEUMANN
    tags[x == 0.0] = DIRICHLET_LEFT

    edges, ids, chains, residuals = [], [], [], []
    for f, (a, b) in enumerate(fractures.segments):
        chain = snap_segment(a, b, N)
        idx = np.array([j * (N + 1) + i for i, j in chain], dtype=np.int64)
        chains.append(idx)
        residuals.append(
            max(
                np.max(np.abs(vertices[idx[0]] - a)),
                np.max(np.abs(vertices[idx[-1]] - b)),
            )
        )
        for u, v in zip(idx[:-1], idx[1:]):
            edges.append((min(u, v), max(u, v)))
            ids.append(f)
    fracture_edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
    return FineMesh(
        n=n,
        r=r,
        vertices=vertices,
        elements=elements,
        parent=parent,
        element_to_fine=element_to_fine,
        boundary_tags=tags,
        fracture_edges=fracture_edges,
        fracture_ids=np.array(ids, dtype=np.int64),
        chains=tuple(chains),
        snap_residuals=np.array(residuals, dtype=float),
    )


def neighborhood_elements(mesh: FineMesh, coarse: CoarseMesh, i: int) -> np.ndarray:
    """Fine triangles inside the coarse neighborhood of vertex ``i``."""
    if not 0 <= i < coarse.n_vertices:
        raise InvalidArgumentError(f"coarse vertex {i} out of range")
    return np.sort(np.concatenate([mesh.element_to_fine[k] for k in coarse.vertex_neighborhoods[i]]))


def region_boundary_nodes(mesh: FineMesh, fine_elements) -> np.ndarray:
    """Fine vertices on the boundary of the union of ``fine_elements``."""
    tris = mesh.elements[fine_elements]
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    nodes = np.unique(uniq[counts == 1])
    return nodes


def neighborhood_boundary(mesh: FineMesh, coarse: CoarseMesh, i: int) -> np.ndarray:
    """Fine vertices on the boundary of omega_i, sorted by (x, y)."""
    nodes = region_boundary_nodes(mesh, neighborhood_elements(mesh, coarse, i))
    xy = mesh.vertices[nodes]
    return nodes[np.lexsort((xy[:, 1], xy[:, 0]))]


def write_mesh(path, mesh):
    """Plain-text export: vertex count, coordinates, element count, triangles."""
    with open(path, "w") as fh:
        fh.write(f"{len(mesh.vertices)}\n")
        np.savetxt(fh, mesh.vertices, fmt="%.17g")
        fh.write(f"{len(mesh.elements)}\n")
        np.savetxt(fh, mesh.elements, fmt="%d")
