"""Refinement energy: photometric and semantic data terms, class-aware
smoothness, and the gradient-descent surface evolution driver.

The data terms compare each view against every other view reprojected
through the current surface. Photometric agreement uses windowed zero-mean
normalized cross-correlation (cost 1 - ZNCC summed over window centers whose
window lies fully inside the overlap); semantic agreement is the pixel sum
of squared class-likelihood differences. Per-vertex gradients follow the
chain rule through the reprojection: each pixel contributes along its
face normal with a 1/(n.d) foreshortening factor and is scattered to the
face corners by the barycentric weights.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .camera import projection_jacobians
from .errors import SemrefError
from .mesh import LabeledMesh, build_adjacency, face_normals_areas
from .render import ImageView, bilinear_sample, correspondence, image_gradient, rasterize
from .smoothness import build_smoothness_index, smoothness_energies, smoothness_gradient

logger = logging.getLogger(__name__)

_GRAZE_COS = 1e-6
_VAR_FLOOR = 1e-8


@dataclass
class EnergyWeights:
    """Relative weights of the energy terms.

    lambda1 scales semantic consistency, lambda2 the per-class curvature
    smoothness, lambda3 the class-boundary smoothness. omega maps label ids
    to class smoothing weights (default 1.0). zncc_window is the odd
    correlation window size in pixels.
    """

    lambda1: float = 0.2
    lambda2: float = 0.05
    lambda3: float = 0.05
    omega: dict = field(default_factory=dict)
    zncc_window: int = 7

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("energy weights must be non-negative")
        if any(w < 0 for w in self.omega.values()):
            raise ValueError("class weights must be non-negative")
        if self.zncc_window < 3 or self.zncc_window % 2 == 0:
            raise ValueError("zncc_window must be odd and >= 3")


@dataclass(eq=False)
class EnergyBreakdown:
    """Energy terms (unweighted) plus their weighted total."""

    e_photo: float
    e_sem: float
    e_intra: float
    e_inter: float
    e_total: float


@dataclass(eq=False)
class ViewSet:
    """Calibrated views: cameras with images and optional likelihood stacks."""

    cameras: list
    images: list
    likelihoods: list | None = None

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise ValueError("one image per camera required")
        if self.likelihoods is not None and len(self.likelihoods) != len(self.cameras):
            raise ValueError("one likelihood stack per camera required")

    @property
    def n_views(self) -> int:
        return len(self.cameras)


@dataclass
class RefineSchedule:
    """Gradient-descent controls.

    Each iteration takes one step of step_size along the negative gradient,
    halving the step up to max_backtracks times if the total energy would
    increase. Descent stops at max_iters or once the relative energy
    decrease over tol_window iterations falls below rel_tol. relabel_every
    is carried for the pipeline driver (labels never change inside refine).
    """

    step_size: float = 1e-4
    max_iters: int = 100
    max_backtracks: int = 8
    rel_tol: float = 1e-5
    tol_window: int = 5
    relabel_every: int = 10


def zncc_cost(patch_a, patch_b) -> float:
    """1 - ZNCC of two equally shaped patches, averaged over channels.

    Returns values in [0, 2]; a zero-variance patch yields the neutral
    cost 1 (no photometric evidence).
    """
    a = np.asarray(patch_a, dtype=np.float64)
    b = np.asarray(patch_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("patches must have identical shapes")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    costs = []
    for c in range(a.shape[2]):
        am = a[:, :, c] - a[:, :, c].mean()
        bm = b[:, :, c] - b[:, :, c].mean()
        na = np.linalg.norm(am)
        nb = np.linalg.norm(bm)
        if na < _VAR_FLOOR or nb < _VAR_FLOOR:
            costs.append(1.0)
        else:
            costs.append(1.0 - float((am * bm).sum()) / (na * nb))
    return float(np.mean(costs))


def _box_sum(arr: np.ndarray, window: int) -> np.ndarray:
    return uniform_filter(arr, size=window, mode="constant", cval=0.0) * (window * window)


def _zncc_pair(a: np.ndarray, b: np.ndarray, mask: np.ndarray, window: int, want_grad: bool):
    """Windowed correlation cost over one view pair.

    a is the reference image (HxWxC), b the reprojected image (zeros outside
    mask). Returns (summed cost, pixel count, G) where G is dE/db, the
    window-aggregated derivative of the cost sum with respect to b.
    """
    r = window // 2
    n = float(window * window)
    m = mask.astype(np.float64)
    cnt = _box_sum(m, window)
    valid = cnt >= n - 1e-6
    valid[:r, :] = False
    valid[-r:, :] = False
    valid[:, :r] = False
    valid[:, -r:] = False
    channels = a.shape[2]
    total = 0.0
    grad = np.zeros_like(b) if want_grad else None
    for c in range(channels):
        ac = a[:, :, c]
        bc = b[:, :, c]
        mu_a = _box_sum(ac, window) / n
        mu_b = _box_sum(bc, window) / n
        var_a = np.clip(_box_sum(ac * ac, window) / n - mu_a * mu_a, 0.0, None)
        var_b = np.clip(_box_sum(bc * bc, window) / n - mu_b * mu_b, 0.0, None)
        cov = _box_sum(ac * bc, window) / n - mu_a * mu_b
        sig_a = np.sqrt(var_a)
        sig_b = np.sqrt(var_b)
        informative = valid & (sig_a > _VAR_FLOOR) & (sig_b > _VAR_FLOOR)
        denom = np.where(informative, sig_a * sig_b, 1.0)
        rho = np.clip(np.where(informative, cov / denom, 0.0), -1.0, 1.0)
        total += float(np.where(valid, 1.0 - rho, 0.0).sum())
        if want_grad:
            alpha = np.where(informative, 1.0 / (n * denom), 0.0)
            beta = np.where(informative, rho / (n * np.where(informative, var_b, 1.0)), 0.0)
            g = (
                -ac * _box_sum(alpha, window)
                + _box_sum(alpha * mu_a, window)
                + bc * _box_sum(beta, window)
                - _box_sum(beta * mu_b, window)
            )
            grad[:, :, c] = g * m
    return total / channels, int(valid.sum()), (grad / channels if want_grad else None)


def _scatter_pixel_gradient(field, mesh, normals, corr, raster_i, cam_i, cam_j, s_pixel):
    """Scatter per-pixel cost derivatives to the face corners.

    s_pixel is dE/d(sampled value) already contracted with the image
    gradient of the source view and the projection Jacobian, leaving the
    normal-direction transport and barycentric distribution.
    """
    fid = raster_i.face_id[corr.rows, corr.cols]
    bary = raster_i.bary[corr.rows, corr.cols]
    d = corr.points - cam_i.center[None, :]
    nrm = normals[fid]
    ndi = np.einsum("ij,ij->i", nrm, d)
    keep = np.abs(ndi) >= _GRAZE_COS * np.linalg.norm(d, axis=1)
    if not np.any(keep):
        return
    w = s_pixel[keep] / ndi[keep]
    contrib = w[:, None] * nrm[keep]
    tri = mesh.faces[fid[keep]]
    bw = bary[keep]
    for k in range(3):
        np.add.at(field, tri[:, k], bw[:, k, None] * contrib)


def _chain_factor(cam_j, points, target_pix, grad_img_j, cam_i):
    """Per-pixel 2-vector J_j . d_i and the sampled image gradient of view j."""
    jac = projection_jacobians(cam_j, points)
    d = points - cam_i.center[None, :]
    t2 = np.einsum("kij,kj->ki", jac, d)
    h, wd, c, _ = grad_img_j.shape
    gj = bilinear_sample(grad_img_j.reshape(h, wd, c * 2), target_pix).reshape(-1, c, 2)
    return t2, gj


def _data_terms(
    mesh: LabeledMesh,
    views: ViewSet,
    window: int,
    rasters: list,
    need_photo: bool,
    need_sem: bool,
    want_grads: bool,
):
    nv = views.n_views
    diag = mesh.diagonal()
    normals, _ = face_normals_areas(mesh)
    e_photo = 0.0
    e_sem = 0.0
    g_photo = np.zeros((mesh.n_vertices, 3)) if want_grads else None
    g_sem = np.zeros((mesh.n_vertices, 3)) if want_grads else None
    overlap = 0

    grad_images = None
    grad_liks = None
    if want_grads:
        if need_photo:
            grad_images = [image_gradient(im) for im in views.images]
        if need_sem and views.likelihoods is not None:
            grad_liks = [image_gradient(lk.pixels) for lk in views.likelihoods]

    for i in range(nv):
        for j in range(nv):
            if i == j:
                continue
            corr = correspondence(views.cameras[i], views.cameras[j], rasters[i], rasters[j], diag)
            if corr.rows.size == 0:
                continue
            overlap += corr.rows.size
            if need_photo:
                img_i = views.images[i].pixels
                sampled = bilinear_sample(views.images[j].pixels, corr.target_pix)
                b = np.zeros_like(img_i)
                b[corr.rows, corr.cols] = sampled
                cost, _, gfield = _zncc_pair(img_i, b, corr.mask, window, want_grads)
                e_photo += cost
                if want_grads:
                    t2, gj = _chain_factor(
                        views.cameras[j], corr.points, corr.target_pix, grad_images[j], views.cameras[i]
                    )
                    gpix = gfield[corr.rows, corr.cols]
                    s = np.einsum("kc,kc->k", gpix, np.einsum("kcd,kd->kc", gj, t2))
                    _scatter_pixel_gradient(
                        g_photo, mesh, normals, corr, rasters[i], views.cameras[i], views.cameras[j], s
                    )
            if need_sem and views.likelihoods is not None:
                lik_i = views.likelihoods[i].pixels
                sampled = bilinear_sample(views.likelihoods[j].pixels, corr.target_pix)
                li = lik_i[corr.rows, corr.cols]
                diff = li - sampled
                e_sem += 0.5 * float((diff * diff).sum())
                if want_grads:
                    t2, gj = _chain_factor(
                        views.cameras[j], corr.points, corr.target_pix, grad_liks[j], views.cameras[i]
                    )
                    s = np.einsum("kc,kc->k", -diff, np.einsum("kcd,kd->kc", gj, t2))
                    _scatter_pixel_gradient(
                        g_sem, mesh, normals, corr, rasters[i], views.cameras[i], views.cameras[j], s
                    )

    if overlap == 0:
        logger.warning("no view pair shares visible surface; data terms are zero")
    return e_photo, e_sem, g_photo, g_sem


def rasterize_views(mesh: LabeledMesh, cameras) -> list:
    return [rasterize(mesh, cam) for cam in cameras]


def photo_energy(mesh, cameras, images, rasters=None, window: int = 7) -> float:
    """Summed reprojection correlation cost over all ordered view pairs."""
    views = ViewSet(cameras=list(cameras), images=list(images))
    if rasters is None:
        rasters = rasterize_views(mesh, views.cameras)
    e, _, _, _ = _data_terms(mesh, views, window, rasters, True, False, False)
    return e


def photo_gradient(mesh, cameras, images, rasters=None, window: int = 7) -> np.ndarray:
    """Per-vertex gradient of photo_energy, (n, 3)."""
    views = ViewSet(cameras=list(cameras), images=list(images))
    if rasters is None:
        rasters = rasterize_views(mesh, views.cameras)
    _, _, g, _ = _data_terms(mesh, views, window, rasters, True, False, True)
    return g


def semantic_energy(mesh, cameras, likelihoods, rasters=None) -> float:
    """Summed squared class-likelihood reprojection differences."""
    views = ViewSet(
        cameras=list(cameras),
        images=[_dummy_image(lk) for lk in likelihoods],
        likelihoods=list(likelihoods),
    )
    if rasters is None:
        rasters = rasterize_views(mesh, views.cameras)
    _, e, _, _ = _data_terms(mesh, views, 7, rasters, False, True, False)
    return e


def semantic_gradient(mesh, cameras, likelihoods, rasters=None) -> np.ndarray:
    """Per-vertex gradient of semantic_energy, (n, 3)."""
    views = ViewSet(
        cameras=list(cameras),
        images=[_dummy_image(lk) for lk in likelihoods],
        likelihoods=list(likelihoods),
    )
    if rasters is None:
        rasters = rasterize_views(mesh, views.cameras)
    _, _, _, g = _data_terms(mesh, views, 7, rasters, False, True, True)
    return g


def _dummy_image(lik):
    return ImageView(np.zeros((lik.height, lik.width, 1)))


def intra_energy(mesh, adj, weights: EnergyWeights, index=None) -> float:
    """Class-weighted curvature magnitude summed over homogeneous vertices."""
    if index is None:
        index = build_smoothness_index(mesh, adj)
    e, _ = smoothness_energies(mesh, index, weights.omega)
    return e


def inter_energy(mesh, adj, index=None) -> float:
    """Squared boundary-angle deviations summed over transition vertices."""
    if index is None:
        index = build_smoothness_index(mesh, adj)
    _, e = smoothness_energies(mesh, index, {})
    return e


def smoothness_gradients(mesh, adj, weights: EnergyWeights, index=None) -> np.ndarray:
    """Gradient of lambda2 * intra + lambda3 * inter; zero on boundary vertices."""
    if index is None:
        index = build_smoothness_index(mesh, adj)
    g = smoothness_gradient(mesh, index, weights.omega, weights.lambda2, weights.lambda3)
    g[adj.is_boundary] = 0.0
    return g


def total_energy(
    mesh: LabeledMesh,
    views: ViewSet,
    weights: EnergyWeights,
    rasters=None,
    adj=None,
    index=None,
) -> EnergyBreakdown:
    """All energy terms for the current mesh state.

    Terms with zero weight are skipped entirely (reported as exactly 0), so
    a run with semantics disabled is arithmetically identical to one that
    never had semantic inputs.
    """
    if rasters is None:
        rasters = rasterize_views(mesh, views.cameras)
    if adj is None:
        adj = build_adjacency(mesh)
    if index is None:
        index = build_smoothness_index(mesh, adj)
    need_sem = weights.lambda1 > 0 and views.likelihoods is not None
    e_photo, e_sem, _, _ = _data_terms(
        mesh, views, weights.zncc_window, rasters, True, need_sem, False
    )
    if weights.lambda2 > 0 or weights.lambda3 > 0:
        e_intra, e_inter = smoothness_energies(mesh, index, weights.omega)
    else:
        e_intra, e_inter = 0.0, 0.0
    total = (
        e_photo
        + weights.lambda1 * e_sem
        + weights.lambda2 * e_intra
        + weights.lambda3 * e_inter
    )
    return EnergyBreakdown(
        e_photo=e_photo, e_sem=e_sem, e_intra=e_intra, e_inter=e_inter, e_total=total
    )


def frozen_vertex_mask(mesh: LabeledMesh, adj, frozen_labels=()) -> np.ndarray:
    """Vertices that never move: boundary vertices and vertices whose entire
    one-ring carries frozen labels."""
    frozen = adj.is_boundary.copy()
    if frozen_labels:
        fl = set(int(l) for l in frozen_labels)
        face_frozen = np.array([int(l) in fl for l in mesh.face_labels])
        ring_frozen = np.ones(mesh.n_vertices, dtype=bool)
        for v in range(mesh.n_vertices):
            ring = adj.ring_faces[v]
            if len(ring) == 0 or not np.all(face_frozen[ring]):
                ring_frozen[v] = False
        frozen |= ring_frozen
    return frozen


def _full_gradient(mesh, views, weights, rasters, adj, index, frozen):
    need_sem = weights.lambda1 > 0 and views.likelihoods is not None
    _, _, g_photo, g_sem = _data_terms(
        mesh, views, weights.zncc_window, rasters, True, need_sem, True
    )
    g = g_photo
    if need_sem:
        g = g + weights.lambda1 * g_sem
    if weights.lambda2 > 0 or weights.lambda3 > 0:
        g = g + smoothness_gradient(
            mesh, index, weights.omega, weights.lambda2, weights.lambda3
        )
    g[frozen] = 0.0
    if not np.all(np.isfinite(g)):
        bad = int(np.nonzero(~np.isfinite(g).all(axis=1))[0][0])
        raise SemrefError(f"non-finite gradient at vertex {bad}")
    return g


def refine(
    mesh: LabeledMesh,
    views: ViewSet,
    weights: EnergyWeights,
    schedule: RefineSchedule,
    frozen_labels=(),
) -> tuple:
    """Gradient-descent surface evolution with backtracking.

    Moves vertices along the negative total-energy gradient, halving the
    step (up to max_backtracks times) whenever the step would increase the
    energy, so the returned per-iteration trace is non-increasing in
    e_total. Labels are never modified here. Returns (refined mesh, trace)
    where trace rows are dicts with the energy breakdown, accepted step
    size, and backtrack count.
    """
    adj = build_adjacency(mesh)
    index = build_smoothness_index(mesh, adj)
    frozen = frozen_vertex_mask(mesh, adj, frozen_labels)
    rasters = rasterize_views(mesh, views.cameras)
    bd = total_energy(mesh, views, weights, rasters, adj, index)
    trace = [_trace_row(0, bd, 0.0, 0)]
    history = [bd.e_total]

    for it in range(1, schedule.max_iters + 1):
        g = _full_gradient(mesh, views, weights, rasters, adj, index, frozen)
        accepted = False
        step = schedule.step_size
        for bt in range(schedule.max_backtracks + 1):
            candidate = mesh.with_vertices(mesh.vertices - step * g)
            cand_rasters = rasterize_views(candidate, views.cameras)
            cand_bd = total_energy(candidate, views, weights, cand_rasters, adj, index)
            if cand_bd.e_total <= bd.e_total:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            logger.info("refine: no energy-decreasing step found at iteration %d", it)
            break
        mesh, rasters, bd = candidate, cand_rasters, cand_bd
        trace.append(_trace_row(it, bd, step, bt))
        history.append(bd.e_total)
        if len(history) > schedule.tol_window:
            past = history[-1 - schedule.tol_window]
            if past - history[-1] < schedule.rel_tol * max(abs(past), 1e-30):
                break
    return mesh, trace


def _trace_row(iteration, bd: EnergyBreakdown, step: float, backtracks: int) -> dict:
    return {
        "iteration": iteration,
        "e_photo": bd.e_photo,
        "e_sem": bd.e_sem,
        "e_intra": bd.e_intra,
        "e_inter": bd.e_inter,
        "e_total": bd.e_total,
        "step": step,
        "backtracks": backtracks,
    }
