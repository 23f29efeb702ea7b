"""Curvature and class-boundary smoothness energies with exact gradients.

The curvature term charges each interior vertex with a label-homogeneous
one-ring half the sum of its absolute principal curvatures (weighted per
class); the boundary term charges each two-label transition vertex the
squared deviation of its transition-edge angle from pi. Gradients are
computed by reverse-mode autodiff on the same discrete expressions, so they
match finite differences of the energies to first order exactly.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .mesh import AdjacencyIndex, LabeledMesh, classify_vertex

logger = logging.getLogger(__name__)

# Vertices whose curvature magnitudes fall below these scale-relative floors
# are treated as exactly flat: their energy contribution is zero and no
# gradient flows through them. This removes the |.| and sqrt kinks that
# would otherwise turn float cancellation noise on planar regions into
# spurious gradients.
_FLAT_H = 1e-9
_FLAT_K = 1e-9

_torch = None


def _load_torch():
    global _torch
    if _torch is None:
        import torch

        torch.set_num_threads(1)  # deterministic scatter-reductions
        _torch = torch
    return _torch


@dataclass(eq=False)
class SmoothnessIndex:
    """Fixed combinatorics of the smoothness terms for one labeling.

    Corner arrays enumerate (vertex, incident triangle) pairs of all
    homogeneous interior vertices, with the triangle rotated so the center
    vertex comes first (center, a, b). slot maps each corner to its vertex's
    accumulator row; slot_label carries the ring label for the class weight.
    Transition arrays hold (vertex, neighbor1, neighbor2) per two-label fan.
    """

    corner_v: np.ndarray
    corner_a: np.ndarray
    corner_b: np.ndarray
    corner_slot: np.ndarray
    slot_vertex: np.ndarray
    slot_label: np.ndarray
    trans_v: np.ndarray
    trans_u1: np.ndarray
    trans_u2: np.ndarray
    n_vertices: int


def build_smoothness_index(mesh: LabeledMesh, adj: AdjacencyIndex) -> SmoothnessIndex:
    corner_v: list = []
    corner_a: list = []
    corner_b: list = []
    corner_slot: list = []
    slot_vertex: list = []
    slot_label: list = []
    trans_v: list = []
    trans_u1: list = []
    trans_u2: list = []
    for v in range(mesh.n_vertices):
        cls = classify_vertex(mesh, adj, v)
        if cls.kind == "homogeneous":
            slot = len(slot_vertex)
            slot_vertex.append(v)
            slot_label.append(cls.label)
            for fid in adj.ring_faces[v]:
                tri = mesh.faces[fid]
                k = int(np.argmax(tri == v))
                corner_v.append(v)
                corner_a.append(int(tri[(k + 1) % 3]))
                corner_b.append(int(tri[(k + 2) % 3]))
                corner_slot.append(slot)
        elif cls.kind == "transition":
            trans_v.append(v)
            trans_u1.append(cls.v1)
            trans_u2.append(cls.v2)
    as_i = lambda x: np.asarray(x, dtype=np.int64)
    return SmoothnessIndex(
        corner_v=as_i(corner_v),
        corner_a=as_i(corner_a),
        corner_b=as_i(corner_b),
        corner_slot=as_i(corner_slot),
        slot_vertex=as_i(slot_vertex),
        slot_label=as_i(slot_label),
        trans_v=as_i(trans_v),
        trans_u1=as_i(trans_u1),
        trans_u2=as_i(trans_u2),
        n_vertices=mesh.n_vertices,
    )


def _omega_vector(index: SmoothnessIndex, omega: dict) -> np.ndarray:
    return np.array([float(omega.get(int(l), 1.0)) for l in index.slot_label])


def _evaluate(torch, verts, index: SmoothnessIndex, omega_vec, diagonal: float):
    """Both smoothness energies as torch scalars from a (n, 3) tensor."""
    tiny = 1e-300
    zero = verts.sum() * 0.0

    e_intra = zero
    n_slots = len(index.slot_vertex)
    if n_slots:
        p = verts[index.corner_v]
        pa = verts[index.corner_a]
        pb = verts[index.corner_b]
        e1 = pa - p
        e2 = pb - p
        cr = torch.cross(e1, e2, dim=1)
        area2 = torch.sqrt((cr * cr).sum(dim=1) + tiny)
        dot_v = (e1 * e2).sum(dim=1)
        theta_v = torch.atan2(area2, dot_v)
        va, vb = p - pa, pb - pa
        ca_cr = torch.cross(va, vb, dim=1)
        ca_sin = torch.sqrt((ca_cr * ca_cr).sum(dim=1) + tiny)
        cot_a = (va * vb).sum(dim=1) / ca_sin
        wa, wb = p - pb, pa - pb
        cb_cr = torch.cross(wa, wb, dim=1)
        cb_sin = torch.sqrt((cb_cr * cb_cr).sum(dim=1) + tiny)
        cot_b = (wa * wb).sum(dim=1) / cb_sin
        dot_a = (va * vb).sum(dim=1)
        dot_b = (wa * wb).sum(dim=1)
        len1sq = (e1 * e1).sum(dim=1)
        len2sq = (e2 * e2).sum(dim=1)
        area = 0.5 * area2
        voronoi = (len1sq * cot_b + len2sq * cot_a) / 8.0
        a_corner = torch.where(
            (dot_v >= 0) & (dot_a >= 0) & (dot_b >= 0),
            voronoi,
            torch.where(dot_v < 0, 0.5 * area, 0.25 * area),
        )
        hvec_corner = -cot_b[:, None] * e1 - cot_a[:, None] * e2

        slot = torch.from_numpy(index.corner_slot)
        a_mixed = torch.zeros(n_slots, dtype=verts.dtype).index_add_(0, slot, a_corner)
        theta = torch.zeros(n_slots, dtype=verts.dtype).index_add_(0, slot, theta_v)
        hvec = torch.zeros((n_slots, 3), dtype=verts.dtype).index_add_(0, slot, hvec_corner)

        a_safe = torch.clamp(a_mixed, min=tiny)
        h_abs = torch.sqrt((hvec * hvec).sum(dim=1) + tiny) / (4.0 * a_safe)
        k_gauss = (2.0 * np.pi - theta) / a_safe
        disc = torch.clamp(h_abs * h_abs - k_gauss, min=0.0)
        s = torch.sqrt(disc + tiny)
        # 0.5 * (|kappa1| + |kappa2|) == max(|H|, sqrt(H^2 - K)).
        per_vertex = torch.maximum(h_abs, s)
        with torch.no_grad():
            degenerate = a_mixed <= tiny
            flat = (h_abs <= _FLAT_H / diagonal) & (
                k_gauss.abs() <= _FLAT_K / (diagonal * diagonal)
            )
            drop = degenerate | flat
            if degenerate.any():
                logger.warning(
                    "skipping %d vertices with degenerate one-rings", int(degenerate.sum())
                )
        omega_t = torch.from_numpy(omega_vec)
        e_intra = torch.where(drop, torch.zeros_like(per_vertex), omega_t * per_vertex).sum()

    e_inter = zero
    if len(index.trans_v):
        p = verts[index.trans_v]
        u1 = verts[index.trans_u1] - p
        u2 = verts[index.trans_u2] - p
        cr = torch.cross(u1, u2, dim=1)
        # Regularized norm keeps the angle differentiable at exactly pi.
        reg = 1e-40 * (u1 * u1).sum(dim=1) * (u2 * u2).sum(dim=1)
        sin = torch.sqrt((cr * cr).sum(dim=1) + reg + tiny)
        gamma = torch.atan2(sin, (u1 * u2).sum(dim=1))
        e_inter = ((np.pi - gamma) ** 2).sum()

    return e_intra, e_inter


def smoothness_energies(mesh: LabeledMesh, index: SmoothnessIndex, omega: dict) -> tuple:
    """(curvature energy, boundary-angle energy) for the current vertices."""
    torch = _load_torch()
    with torch.no_grad():
        verts = torch.from_numpy(np.ascontiguousarray(mesh.vertices))
        ei, ee = _evaluate(torch, verts, index, _omega_vector(index, omega), mesh.diagonal())
    return float(ei), float(ee)


def smoothness_gradient(
    mesh: LabeledMesh,
    index: SmoothnessIndex,
    omega: dict,
    lambda2: float,
    lambda3: float,
) -> np.ndarray:
    """Exact gradient of lambda2 * intra + lambda3 * inter, (n, 3)."""
    if (len(index.slot_vertex) == 0 or lambda2 == 0.0) and (
        len(index.trans_v) == 0 or lambda3 == 0.0
    ):
        return np.zeros((index.n_vertices, 3))
    torch = _load_torch()
    verts = torch.from_numpy(np.ascontiguousarray(mesh.vertices)).clone().requires_grad_(True)
    ei, ee = _evaluate(torch, verts, index, _omega_vector(index, omega), mesh.diagonal())
    total = lambda2 * ei + lambda3 * ee
    total.backward()
    return verts.grad.numpy().copy()
