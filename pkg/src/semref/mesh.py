"""Labeled triangle meshes: adjacency, one-ring fans, and discrete curvature.

Conventions: faces are counter-clockwise when viewed from outside, labels are
integers >= 1, and all derived quantities treat the mesh as immutable (the
vertex/face arrays are frozen after construction; refinement builds new
meshes via :meth:`LabeledMesh.with_vertices`).
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFaceError, DegenerateGeometryError, MeshTopologyError

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class LabeledMesh:
    """Triangle mesh with one semantic label per face.

    Parameters
    ----------
    vertices : (n, 3) float array, world units.
    faces : (m, 3) int array of vertex indices, counter-clockwise orientation.
    face_labels : (m,) int array with values >= 1.
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_labels: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        lab = np.ascontiguousarray(np.asarray(self.face_labels, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must have shape (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must have shape (m, 3), got {f.shape}")
        if lab.shape != (f.shape[0],):
            raise ValueError(
                f"face_labels must have one entry per face: {lab.shape[0]} labels "
                f"for {f.shape[0]} faces"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("vertices contain non-finite coordinates")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise ValueError("face indices out of vertex range")
        if lab.size and lab.min() < 1:
            raise ValueError("face labels must be >= 1")
        same = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 2] == f[:, 0])
        if np.any(same):
            raise DegenerateFaceError(
                f"faces with repeated vertices: {np.nonzero(same)[0].tolist()}"
            )
        if f.size:
            e1 = v[f[:, 1]] - v[f[:, 0]]
            e2 = v[f[:, 2]] - v[f[:, 0]]
            twice_area = np.linalg.norm(np.cross(e1, e2), axis=1)
            scale = np.maximum(
                np.einsum("ij,ij->i", e1, e1), np.einsum("ij,ij->i", e2, e2)
            )
            bad = twice_area <= 1e-12 * scale
            if np.any(bad):
                raise DegenerateFaceError(
                    f"faces with (near) zero area: {np.nonzero(bad)[0].tolist()}"
                )
        for arr in (v, f, lab):
            arr.setflags(write=False)
        self.vertices, self.faces, self.face_labels = v, f, lab

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def diagonal(self) -> float:
        """Bounding-box diagonal; the scene scale used for tolerances."""
        if self.n_vertices == 0:
            return 0.0
        ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(ext))

    def with_vertices(self, vertices) -> "LabeledMesh":
        return LabeledMesh(np.array(vertices, dtype=np.float64), self.faces, self.face_labels)

    def with_labels(self, face_labels) -> "LabeledMesh":
        return LabeledMesh(self.vertices, self.faces, np.array(face_labels, dtype=np.int64))


@dataclass(eq=False)
class AdjacencyIndex:
    """Connectivity derived from a mesh.

    ``ring_vertices[v]`` / ``ring_faces[v]`` hold the one-ring in fan order:
    face ``k`` lies between ring vertices ``k`` and ``k+1`` (cyclically for
    interior vertices, so both lists have equal length there; for boundary
    vertices the face list is one shorter). ``is_fan[v]`` is False when the
    one-ring does not form a single fan (isolated vertex, inconsistent
    orientation, or a non-manifold vertex), in which case the ring lists are
    unordered.
    """

    ring_vertices: list
    ring_faces: list
    face_neighbors: np.ndarray
    is_boundary: np.ndarray
    is_fan: np.ndarray
    edge_faces: dict


@dataclass
class VertexClass:
    """Classification of a one-ring by its face labels.

    kind is one of "homogeneous" (single label, stored in ``label``),
    "transition" (exactly two labels, each a contiguous fan segment; the
    transition edges run from the vertex to ``v1`` and ``v2`` and meet at
    angle ``gamma`` in (0, pi]), or "other".
    """

    kind: str
    label: int | None = None
    v1: int | None = None
    v2: int | None = None
    gamma: float | None = None


@dataclass
class CurvatureEstimate:
    """Principal curvatures at a vertex, units 1/length.

    kappa1 >= kappa2, mean = (kappa1 + kappa2) / 2, and gaussian is the
    angle-deficit estimate (kappa1 * kappa2 up to clamping of the
    discriminant).
    """

    kappa1: float
    kappa2: float
    mean: float
    gaussian: float


def build_adjacency(mesh: LabeledMesh) -> AdjacencyIndex:
    """Build edge/vertex/face adjacency; rejects non-manifold edges."""
    n, m = mesh.n_vertices, mesh.n_faces
    faces = mesh.faces

    edge_faces: dict = {}
    for fid in range(m):
        a, b, c = faces[fid]
        for u, w in ((a, b), (b, c), (c, a)):
            key = (int(u), int(w)) if u < w else (int(w), int(u))
            lst = edge_faces.setdefault(key, [])
            lst.append(fid)
            if len(lst) > 2:
                raise MeshTopologyError(
                    f"edge {key} borders {len(lst)} faces; mesh is not edge-manifold"
                )

    is_boundary = np.zeros(n, dtype=bool)
    for (u, w), flist in edge_faces.items():
        if len(flist) == 1:
            is_boundary[u] = True
            is_boundary[w] = True

    face_neighbors = np.full((m, 3), -1, dtype=np.int64)
    for fid in range(m):
        a, b, c = faces[fid]
        for k, (u, w) in enumerate(((a, b), (b, c), (c, a))):
            key = (int(u), int(w)) if u < w else (int(w), int(u))
            for g in edge_faces[key]:
                if g != fid:
                    face_neighbors[fid, k] = g

    # Successor map around each vertex: face (v, a, b) in CCW order means the
    # fan continues from neighbor a to neighbor b across that face.
    succ: list = [dict() for _ in range(n)]
    fan_ok = np.ones(n, dtype=bool)
    for fid in range(m):
        tri = faces[fid]
        for k in range(3):
            v = int(tri[k])
            a = int(tri[(k + 1) % 3])
            b = int(tri[(k + 2) % 3])
            if a in succ[v]:
                fan_ok[v] = False  # duplicated outgoing edge: bad orientation
            else:
                succ[v][a] = (b, fid)

    ring_vertices: list = []
    ring_faces: list = []
    is_fan = np.zeros(n, dtype=bool)
    for v in range(n):
        nbrs = succ[v]
        if not nbrs:
            is_boundary[v] = True
            ring_vertices.append(np.empty(0, dtype=np.int64))
            ring_faces.append(np.empty(0, dtype=np.int64))
            continue
        fallback = (
            np.array(sorted(nbrs.keys()), dtype=np.int64),
            np.array(sorted({fid for (_, fid) in nbrs.values()}), dtype=np.int64),
        )
        if not fan_ok[v]:
            ring_vertices.append(fallback[0])
            ring_faces.append(fallback[1])
            continue
        targets = {b for (b, _) in nbrs.values()}
        starts = [a for a in nbrs if a not in targets]
        if len(starts) == 0:
            start = min(nbrs.keys())
            closed = True
        elif len(starts) == 1:
            start = starts[0]
            closed = False
        else:
            ring_vertices.append(fallback[0])
            ring_faces.append(fallback[1])
            continue
        order = [start]
        fan = []
        cur = start
        ok = True
        for _ in range(len(nbrs)):
            if cur not in nbrs:
                ok = False
                break
            nxt, fid = nbrs[cur]
            fan.append(fid)
            cur = nxt
            if closed and cur == start:
                break
            order.append(cur)
        if closed:
            ok = ok and cur == start and len(fan) == len(nbrs)
            if ok:
                order = order[: len(fan)]
        else:
            ok = ok and len(fan) == len(nbrs)
        if not ok or len(set(order)) != len(order):
            ring_vertices.append(fallback[0])
            ring_faces.append(fallback[1])
            continue
        is_fan[v] = True
        ring_vertices.append(np.array(order, dtype=np.int64))
        ring_faces.append(np.array(fan, dtype=np.int64))

    return AdjacencyIndex(
        ring_vertices=ring_vertices,
        ring_faces=ring_faces,
        face_neighbors=face_neighbors,
        is_boundary=is_boundary,
        is_fan=is_fan,
        edge_faces={k: tuple(fl) for k, fl in edge_faces.items()},
    )


def _angle_between(u: np.ndarray, w: np.ndarray) -> float:
    cross = np.cross(u, w)
    return float(np.arctan2(np.linalg.norm(cross), float(np.dot(u, w))))


def classify_vertex(mesh: LabeledMesh, adj: AdjacencyIndex, v: int) -> VertexClass:
    """Classify a vertex by the labels of its one-ring fan."""
    if adj.is_boundary[v] or not adj.is_fan[v]:
        return VertexClass(kind="other")
    fan = adj.ring_faces[v]
    ring = adj.ring_vertices[v]
    labels = mesh.face_labels[fan]
    uniq = np.unique(labels)
    if uniq.size == 1:
        return VertexClass(kind="homogeneous", label=int(uniq[0]))
    if uniq.size != 2:
        return VertexClass(kind="other")
    # Transition edges sit where consecutive fan faces change label; face k
    # lies between ring vertices k and k+1, so the change between faces k-1
    # and k crosses the edge (v, ring[k]).
    k = len(fan)
    changes = [i for i in range(k) if labels[i] != labels[i - 1]]
    if len(changes) != 2:
        return VertexClass(kind="other")
    u1 = int(ring[changes[0]])
    u2 = int(ring[changes[1]])
    p = mesh.vertices[v]
    gamma = _angle_between(mesh.vertices[u1] - p, mesh.vertices[u2] - p)
    return VertexClass(kind="transition", v1=u1, v2=u2, gamma=gamma)


def _cot(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    cross = np.cross(u, w)
    sin = np.linalg.norm(cross, axis=-1)
    cos = np.einsum("...i,...i->...", u, w)
    return cos / np.maximum(sin, 1e-300)


def principal_curvatures(mesh: LabeledMesh, adj: AdjacencyIndex, v: int) -> CurvatureEstimate:
    """Discrete principal curvatures at an interior vertex.

    Mean curvature comes from the cotangent mean-curvature normal over the
    mixed Voronoi area, Gaussian curvature from the angle deficit; the
    discriminant mean^2 - gaussian is clamped at zero.
    """
    if adj.is_boundary[v] or not adj.is_fan[v]:
        raise ValueError(f"vertex {v} is not an interior fan vertex")
    fan = adj.ring_faces[v]
    tris = mesh.faces[fan]
    # Rotate each incident triangle so v comes first.
    pos = np.argmax(tris == v, axis=1)
    a_idx = tris[np.arange(len(fan)), (pos + 1) % 3]
    b_idx = tris[np.arange(len(fan)), (pos + 2) % 3]
    p = mesh.vertices[v]
    pa = mesh.vertices[a_idx]
    pb = mesh.vertices[b_idx]
    e1 = pa - p
    e2 = pb - p

    cross = np.cross(e1, e2)
    area2 = np.linalg.norm(cross, axis=1)
    theta_v = np.arctan2(area2, np.einsum("ij,ij->i", e1, e2))
    cot_a = _cot(p - pa, pb - pa)
    cot_b = _cot(p - pb, pa - pb)

    dot_v = np.einsum("ij,ij->i", e1, e2)
    dot_a = np.einsum("ij,ij->i", p - pa, pb - pa)
    dot_b = np.einsum("ij,ij->i", p - pb, pa - pb)
    len1sq = np.einsum("ij,ij->i", e1, e1)
    len2sq = np.einsum("ij,ij->i", e2, e2)
    voronoi = (len1sq * cot_b + len2sq * cot_a) / 8.0
    area = 0.5 * area2
    a_mixed = np.where(
        (dot_v >= 0) & (dot_a >= 0) & (dot_b >= 0),
        voronoi,
        np.where(dot_v < 0, 0.5 * area, 0.25 * area),
    ).sum()
    if a_mixed <= 0:
        raise DegenerateGeometryError(f"vertex {v} has a degenerate one-ring")

    hvec = (cot_b[:, None] * (-e1) + cot_a[:, None] * (-e2)).sum(axis=0)
    normal = cross.sum(axis=0)  # area-weighted vertex normal (unnormalized)
    h_mag = float(np.linalg.norm(hvec)) / (4.0 * a_mixed)
    nn = float(np.linalg.norm(normal))
    sign = 1.0
    if nn > 0 and float(np.dot(hvec, normal)) < 0:
        sign = -1.0
    h = sign * h_mag
    k_gauss = float(2.0 * np.pi - theta_v.sum()) / a_mixed
    s = float(np.sqrt(max(h * h - k_gauss, 0.0)))
    return CurvatureEstimate(kappa1=h + s, kappa2=h - s, mean=h, gaussian=k_gauss)


def face_geometry(mesh: LabeledMesh, f: int) -> tuple:
    """Unit normal (counter-clockwise orientation) and area of one face."""
    a, b, c = mesh.faces[f]
    cross = np.cross(mesh.vertices[b] - mesh.vertices[a], mesh.vertices[c] - mesh.vertices[a])
    norm = float(np.linalg.norm(cross))
    if norm <= 0.0:
        raise DegenerateFaceError(f"face {f} has collinear vertices")
    return cross / norm, 0.5 * norm


def face_normals_areas(mesh: LabeledMesh) -> tuple:
    """Unit normals (m, 3) and areas (m,) for all faces at once."""
    v = mesh.vertices
    f = mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norm = np.linalg.norm(cross, axis=1)
    normals = cross / np.maximum(norm, 1e-300)[:, None]
    return normals, 0.5 * norm
