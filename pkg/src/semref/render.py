"""Software rasterization and cross-view reprojection.

The rasterizer is a plain z-buffer with pixel-center sampling and
perspective-correct depth/barycentrics; ties in depth go to the lower face
id. Reprojection backprojects every covered pixel of one view onto the mesh
and samples another view bilinearly, with a tolerance-based depth test for
occlusion.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .camera import Camera, project
from .mesh import LabeledMesh

_GRAZE = 1e-12


@dataclass(eq=False)
class ImageView:
    """Image raster with values in [0, 1] and 1 or 3 channels."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(np.asarray(self.pixels, dtype=np.float64))
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWxd with d in {{1,3}}, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite values")
        if px.min() < -1e-9 or px.max() > 1 + 1e-9:
            raise ValueError("image values must lie in [0, 1]")
        px.setflags(write=False)
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(eq=False)
class LikelihoodStack:
    """Per-pixel class likelihoods, one channel per label, normalized to sum 1."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(np.asarray(self.pixels, dtype=np.float64))
        if px.ndim != 3 or px.shape[2] < 1:
            raise ValueError(f"likelihoods must be HxWxL, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("likelihoods contain non-finite values")
        if px.min() < -1e-9 or px.max() > 1 + 1e-9:
            raise ValueError("likelihood values must lie in [0, 1]")
        sums = px.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > 1e-3):
            raise ValueError("per-pixel likelihood sums must be within 1e-3 of 1")
        px.setflags(write=False)
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def n_labels(self) -> int:
        return self.pixels.shape[2]


@dataclass(eq=False)
class RasterBuffers:
    """Per-pixel visibility record for one view.

    depth holds camera-frame z (+inf where nothing is hit), face_id the
    nearest face (-1 background), bary the perspective-correct barycentric
    weights, and point the reconstructed 3D surface point.
    """

    depth: np.ndarray
    face_id: np.ndarray
    bary: np.ndarray
    point: np.ndarray


@njit(cache=True)
def _raster_kernel(u, v, z, faces, width, height, depth, face_id, bary):
    for f in range(faces.shape[0]):
        ia, ib, ic = faces[f, 0], faces[f, 1], faces[f, 2]
        za, zb, zc = z[ia], z[ib], z[ic]
        if za <= _GRAZE or zb <= _GRAZE or zc <= _GRAZE:
            continue
        ua, ub, uc = u[ia], u[ib], u[ic]
        va, vb, vc = v[ia], v[ib], v[ic]
        denom = (ub - ua) * (vc - va) - (uc - ua) * (vb - va)
        if abs(denom) < 1e-18:
            continue
        umin = min(ua, min(ub, uc))
        umax = max(ua, max(ub, uc))
        vmin = min(va, min(vb, vc))
        vmax = max(va, max(vb, vc))
        c0 = max(0, int(math.ceil(umin - 0.5)))
        c1 = min(width - 1, int(math.floor(umax - 0.5)))
        r0 = max(0, int(math.ceil(vmin - 0.5)))
        r1 = min(height - 1, int(math.floor(vmax - 0.5)))
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                px = c + 0.5
                w0 = ((ub - px) * (vc - py) - (uc - px) * (vb - py)) / denom
                w1 = ((uc - px) * (va - py) - (ua - px) * (vc - py)) / denom
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                q0 = w0 / za
                q1 = w1 / zb
                q2 = w2 / zc
                den = q0 + q1 + q2
                zp = 1.0 / den
                if zp < depth[r, c]:
                    depth[r, c] = zp
                    face_id[r, c] = f
                    bary[r, c, 0] = q0 * zp
                    bary[r, c, 1] = q1 * zp
                    bary[r, c, 2] = q2 * zp


def rasterize(mesh: LabeledMesh, cam: Camera) -> RasterBuffers:
    """Render visibility buffers for one view (nearest-face z-buffer)."""
    h, w = cam.height, cam.width
    depth = np.full((h, w), np.inf)
    face_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    pix, z = project(cam, mesh.vertices)
    _raster_kernel(
        np.ascontiguousarray(pix[:, 0]),
        np.ascontiguousarray(pix[:, 1]),
        np.ascontiguousarray(z),
        mesh.faces,
        w,
        h,
        depth,
        face_id,
        bary,
    )
    point = np.zeros((h, w, 3))
    hit = face_id >= 0
    if np.any(hit):
        tri = mesh.faces[face_id[hit]]
        bw = bary[hit]
        point[hit] = (
            bw[:, 0, None] * mesh.vertices[tri[:, 0]]
            + bw[:, 1, None] * mesh.vertices[tri[:, 1]]
            + bw[:, 2, None] * mesh.vertices[tri[:, 2]]
        )
    return RasterBuffers(depth=depth, face_id=face_id, bary=bary, point=point)


def bilinear_sample(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample an HxWxC raster at continuous pixel coordinates (k, 2) -> (k, C).

    Coordinates follow the pixel-center convention: value (row, col) sits at
    (col + 0.5, row + 0.5). Queries are clamped to the valid sample grid.
    """
    h, w = image.shape[:2]
    gx = np.clip(uv[:, 0] - 0.5, 0.0, w - 1 - 1e-9)
    gy = np.clip(uv[:, 1] - 0.5, 0.0, h - 1 - 1e-9)
    x0 = gx.astype(np.int64)
    y0 = gy.astype(np.int64)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    p00 = image[y0, x0]
    p01 = image[y0, x0 + 1]
    p10 = image[y0 + 1, x0]
    p11 = image[y0 + 1, x0 + 1]
    return (
        p00 * (1 - fx) * (1 - fy)
        + p01 * fx * (1 - fy)
        + p10 * (1 - fx) * fy
        + p11 * fx * fy
    )


@dataclass(eq=False)
class Correspondence:
    """Pixels of view i whose surface points are unoccluded in view j.

    mask is HxW over view i; the flat arrays cover exactly the True pixels.
    """

    mask: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    points: np.ndarray
    target_pix: np.ndarray
    target_depth: np.ndarray


def correspondence(
    cam_i: Camera,
    cam_j: Camera,
    raster_i: RasterBuffers,
    raster_j: RasterBuffers,
    scene_diagonal: float,
) -> Correspondence:
    """Match every covered pixel of view i against the z-buffer of view j."""
    hit = raster_i.face_id >= 0
    rows, cols = np.nonzero(hit)
    pts = raster_i.point[rows, cols]
    if len(rows) == 0:
        return Correspondence(hit, rows, cols, pts, np.zeros((0, 2)), np.zeros(0))
    pix_j, z_j = project(cam_j, pts)
    ok = z_j > 0
    gx = pix_j[:, 0] - 0.5
    gy = pix_j[:, 1] - 0.5
    ok &= (gx >= 0) & (gx <= cam_j.width - 1) & (gy >= 0) & (gy <= cam_j.height - 1)
    # Depth test with a tolerance: rasterized depths are quantized, and a
    # strict comparison drops valid pixels on slanted surfaces.
    tol = 1e-3 * scene_diagonal
    cj = np.clip(pix_j[:, 0].astype(np.int64), 0, cam_j.width - 1)
    rj = np.clip(pix_j[:, 1].astype(np.int64), 0, cam_j.height - 1)
    stored = raster_j.depth[rj, cj]
    ok &= np.isfinite(stored) & (z_j <= stored + tol)
    mask = np.zeros_like(hit)
    mask[rows[ok], cols[ok]] = True
    return Correspondence(
        mask=mask,
        rows=rows[ok],
        cols=cols[ok],
        points=pts[ok],
        target_pix=pix_j[ok],
        target_depth=z_j[ok],
    )


def reproject(
    image_j,
    cam_i: Camera,
    cam_j: Camera,
    raster_i: RasterBuffers,
    raster_j: RasterBuffers,
    scene_diagonal: float | None = None,
) -> tuple:
    """Warp view j into view i's frame through the rasterized surface.

    Returns (values, mask): values is HxWxC with bilinear samples of view j
    at every unoccluded surface pixel of view i, zero elsewhere.
    """
    pixels = image_j.pixels if hasattr(image_j, "pixels") else np.asarray(image_j)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if scene_diagonal is None:
        hit = raster_i.face_id >= 0
        if np.any(hit):
            pts = raster_i.point[hit]
            scene_diagonal = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        else:
            scene_diagonal = 0.0
    corr = correspondence(cam_i, cam_j, raster_i, raster_j, scene_diagonal)
    values = np.zeros(raster_i.depth.shape + (pixels.shape[2],))
    if len(corr.rows):
        values[corr.rows, corr.cols] = bilinear_sample(pixels, corr.target_pix)
    return values, corr.mask


def image_gradient(image) -> np.ndarray:
    """Per-channel image gradient, HxWxCx2 with [...,0] = d/dcol, [...,1] = d/drow.

    Central differences in the interior, one-sided at the borders, in units
    of value change per pixel.
    """
    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w, c = pixels.shape
    if h < 3 or w < 3:
        raise ValueError("image gradient needs at least 3x3 pixels")
    grad = np.empty((h, w, c, 2))
    for ch in range(c):
        dv, du = np.gradient(pixels[:, :, ch])
        grad[:, :, ch, 0] = du
        grad[:, :, ch, 1] = dv
    return grad
