"""Synthetic test worlds with known geometry, labels, textures, and cameras.

Layouts combine a ground plane, an axis-aligned box (facade sides, roof
top), and a hemispherical blob (vegetation). Views are rendered with flat
Lambertian shading of a procedural texture; likelihood maps soften the
ground-truth class and can be corrupted with seeded pixel flips. Label ids:
1 ground, 2 facade, 3 roof, 4 vegetation.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .errors import ConfigError
from .mesh import LabeledMesh, build_adjacency, face_normals_areas
from .render import ImageView, LikelihoodStack, rasterize

logger = logging.getLogger(__name__)

GROUND, FACADE, ROOF, VEGETATION = 1, 2, 3, 4

_LIGHT = np.array([0.32, 0.18, 0.93])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)
_AMBIENT = 0.25
_BACKGROUND = 0.12


@dataclass
class SceneSpec:
    """Declarative synthetic scene description.

    layout is one of "plane", "plane+box", "plane+box+blob"; extent is the
    ground half-width in world units; plane_res the grid cells per side.
    Cameras sit on a ring of ``camera_count`` positions at ``camera_radius``
    / ``camera_height`` looking at ``look_at``.
    """

    layout: str = "plane+box"
    extent: float = 1.0
    plane_res: int = 24
    texture: str = "noise"
    texture_scale: float = 1.0
    labels: dict = field(default_factory=dict)
    camera_count: int = 8
    camera_radius: float = 2.6
    camera_height: float = 2.2
    look_at: tuple = (0.0, 0.0, 0.1)
    image_size: tuple = (256, 256)
    focal: float | None = None

    def __post_init__(self):
        if self.layout not in ("plane", "plane+box", "plane+box+blob"):
            raise ConfigError(f"unknown layout '{self.layout}'")
        if self.extent <= 0:
            raise ConfigError("extent must be positive")
        if self.plane_res < 2:
            raise ConfigError("plane_res must be at least 2")
        if self.camera_count < 2:
            raise ConfigError("at least two cameras required")
        if self.texture not in ("noise", "checker"):
            raise ConfigError(f"unknown texture '{self.texture}'")


@dataclass
class NoiseSpec:
    """Controlled corruption of a generated dataset.

    vertex_sigma is the vertex displacement std as a fraction of the scene
    diagonal; likelihood_flip_rate the fraction of pixels whose likelihood
    mass moves to a random wrong class; image_gaussian_sigma the image noise
    std in gray levels (of 256); label_scramble_rate the fraction of faces
    whose initial label is replaced by a random other label;
    likelihood_blur_sigma an optional Gaussian blur (pixels) applied to the
    likelihood maps before normalization.
    """

    vertex_sigma: float = 0.0
    likelihood_flip_rate: float = 0.0
    image_gaussian_sigma: float = 0.0
    label_scramble_rate: float = 0.0
    likelihood_blur_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("likelihood_flip_rate", "label_scramble_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.vertex_sigma < 0 or self.image_gaussian_sigma < 0:
            raise ConfigError("noise magnitudes must be non-negative")


@dataclass(eq=False)
class Scene:
    """Ground-truth world: labeled mesh, texture function, and cameras."""

    mesh: LabeledMesh
    texture: object
    cameras: list
    n_labels: int


def _grid_plane(extent, res, hole=None, disk=None):
    """Triangulated square grid on z=0, minus optional cut-outs.

    hole is (xmin, xmax, ymin, ymax) aligned with grid lines; disk is
    (cx, cy, radius). Cells inside a cut-out are dropped so solid parts can
    replace them without leaving permanently hidden faces.
    """
    xs = np.linspace(-extent, extent, res + 1)
    verts = np.array([[x, y, 0.0] for y in xs for x in xs])
    faces = []
    for r in range(res):
        for c in range(res):
            cx = 0.5 * (xs[c] + xs[c + 1])
            cy = 0.5 * (xs[r] + xs[r + 1])
            if hole is not None and hole[0] < cx < hole[1] and hole[2] < cy < hole[3]:
                continue
            if disk is not None and (cx - disk[0]) ** 2 + (cy - disk[1]) ** 2 < disk[2] ** 2:
                continue
            v00 = r * (res + 1) + c
            v01 = v00 + 1
            v10 = v00 + (res + 1)
            v11 = v10 + 1
            faces.append([v00, v01, v11])
            faces.append([v00, v11, v10])
    faces = np.array(faces, dtype=np.int64)
    used = np.unique(faces)
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return verts[used], remap[faces]


def _box(half, height, res):
    """Open-bottom axis-aligned box: 4 vertical sides and a flat top."""
    verts = []
    faces = []
    labels = []

    def quad_grid(corner0, du, dv, nu, nv, label):
        base = len(verts)
        for iv in range(nv + 1):
            for iu in range(nu + 1):
                verts.append(corner0 + du * (iu / nu) + dv * (iv / nv))
        for iv in range(nv):
            for iu in range(nu):
                v00 = base + iv * (nu + 1) + iu
                v01 = v00 + 1
                v10 = v00 + (nu + 1)
                v11 = v10 + 1
                faces.append([v00, v01, v11])
                faces.append([v00, v11, v10])
                labels.extend([label, label])

    h = np.array([half, half, 0.0])
    nu, nv = 2 * res, res
    # Sides wound counter-clockwise seen from outside.
    quad_grid(np.array([-half, -half, 0.0]), np.array([2 * half, 0, 0]), np.array([0, 0, height]), nu, nv, FACADE)
    quad_grid(np.array([half, half, 0.0]), np.array([-2 * half, 0, 0]), np.array([0, 0, height]), nu, nv, FACADE)
    quad_grid(np.array([half, -half, 0.0]), np.array([0, 2 * half, 0]), np.array([0, 0, height]), nu, nv, FACADE)
    quad_grid(np.array([-half, half, 0.0]), np.array([0, -2 * half, 0]), np.array([0, 0, height]), nu, nv, FACADE)
    quad_grid(
        np.array([-half, -half, height]), np.array([2 * half, 0, 0]), np.array([0, 2 * half, 0]), nu, nu, ROOF
    )
    return np.array(verts), np.array(faces, dtype=np.int64), np.array(labels, dtype=np.int64)


def _dome(center, radius, rings=5, segments=14):
    """Upper hemisphere with an open rim at the base plane."""
    verts = []
    faces = []
    for ir in range(rings):
        phi = 0.5 * np.pi * ir / rings
        z = radius * np.sin(phi)
        r = radius * np.cos(phi)
        for js in range(segments):
            ang = 2 * np.pi * js / segments
            verts.append([center[0] + r * np.cos(ang), center[1] + r * np.sin(ang), center[2] + z])
    apex = len(verts)
    verts.append([center[0], center[1], center[2] + radius])
    for ir in range(rings - 1):
        for js in range(segments):
            a = ir * segments + js
            b = ir * segments + (js + 1) % segments
            c = (ir + 1) * segments + (js + 1) % segments
            d = (ir + 1) * segments + js
            faces.append([a, b, c])
            faces.append([a, c, d])
    top = (rings - 1) * segments
    for js in range(segments):
        faces.append([top + js, top + (js + 1) % segments, apex])
    return np.array(verts), np.array(faces, dtype=np.int64)


def _merge(parts, weld_tol):
    verts = []
    faces = []
    labels = []
    offset = 0
    for v, f, lab in parts:
        verts.append(v)
        faces.append(f + offset)
        labels.append(lab)
        offset += len(v)
    v = np.concatenate(verts, axis=0)
    f = np.concatenate(faces, axis=0)
    lab = np.concatenate(labels, axis=0)
    return _weld(v, f, weld_tol) + (lab,)


def _weld(verts, faces, tol):
    """Unify coincident vertices so part seams become interior edges."""
    keys = np.round(verts / tol).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)  # keep original vertex order for determinism
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return verts[first[order]], rank[inverse[faces]]


def _texture_checker(scale):
    def tex(points):
        q = np.floor(points / (0.25 * scale)).sum(axis=1)
        return np.where(q % 2 == 0, 0.25, 0.85)

    return tex


def _texture_noise(scale):
    # Fixed smooth trigonometric mixture; deterministic by construction.
    freqs = np.array(
        [
            [3.1, 1.7, 2.3],
            [1.3, 4.2, 0.7],
            [5.2, 2.9, 1.1],
            [2.2, 6.1, 3.7],
            [7.3, 3.8, 0.4],
        ]
    )
    phases = np.array([0.7, 2.1, 4.4, 1.3, 3.6])
    amps = np.array([0.30, 0.26, 0.20, 0.14, 0.10])

    def tex(points):
        arg = (points / scale) @ freqs.T * np.pi + phases
        vals = (np.sin(arg) * amps).sum(axis=1) / amps.sum()
        return 0.5 + 0.4 * vals

    return tex


def make_scene(spec: SceneSpec) -> Scene:
    """Instantiate the ground-truth world for a scene description."""
    e = spec.extent
    label_of = {
        "ground": int(spec.labels.get("ground", GROUND)),
        "facade": int(spec.labels.get("facade", FACADE)),
        "roof": int(spec.labels.get("roof", ROOF)),
        "vegetation": int(spec.labels.get("vegetation", VEGETATION)),
    }
    parts = []
    if spec.layout == "plane":
        pv, pf = _grid_plane(e, spec.plane_res)
        parts.append((pv, pf, np.full(len(pf), label_of["ground"], dtype=np.int64)))
        n_labels = max(1, label_of["ground"])
    else:
        cells = max(2, int(round(spec.plane_res * 0.25)))
        half = cells * (e / spec.plane_res)
        pv, pf = _grid_plane(e, spec.plane_res, hole=(-half, half, -half, half))
        parts.append((pv, pf, np.full(len(pf), label_of["ground"], dtype=np.int64)))
        bv, bf, blab = _box(half, 0.55 * e, max(2, spec.plane_res // 8))
        blab = np.where(blab == FACADE, label_of["facade"], label_of["roof"])
        parts.append((bv, bf, blab))
        n_labels = max(label_of["ground"], label_of["facade"], label_of["roof"])
        if spec.layout == "plane+box+blob":
            dv, df = _dome(np.array([0.62 * e, -0.55 * e, 0.0]), 0.22 * e)
            parts.append((dv, df, np.full(len(df), label_of["vegetation"], dtype=np.int64)))
            n_labels = max(n_labels, label_of["vegetation"])
    verts, faces, labels = _merge(parts)
    mesh = LabeledMesh(verts, faces, labels)

    texture = _texture_checker(spec.texture_scale) if spec.texture == "checker" else _texture_noise(
        spec.texture_scale
    )
    w, h = spec.image_size
    focal = spec.focal if spec.focal is not None else 0.75 * max(w, h) * spec.camera_radius / (2.2 * e)
    cameras = []
    for k in range(spec.camera_count):
        ang = 2 * np.pi * k / spec.camera_count
        pos = np.array(
            [
                spec.camera_radius * np.cos(ang),
                spec.camera_radius * np.sin(ang),
                spec.camera_height,
            ]
        )
        cameras.append(
            Camera.look_at(pos, np.asarray(spec.look_at, dtype=np.float64), w, h, focal)
        )
    return Scene(mesh=mesh, texture=texture, cameras=cameras, n_labels=n_labels)


def render_class_image(mesh: LabeledMesh, cam: Camera, raster=None) -> np.ndarray:
    """Per-pixel ground-truth class, 0 on background."""
    if raster is None:
        raster = rasterize(mesh, cam)
    out = np.zeros(raster.face_id.shape, dtype=np.int64)
    hit = raster.face_id >= 0
    out[hit] = mesh.face_labels[raster.face_id[hit]]
    return out


def _shade(mesh, texture, raster):
    normals, _ = face_normals_areas(mesh)
    img = np.full(raster.face_id.shape, _BACKGROUND)
    hit = raster.face_id >= 0
    if np.any(hit):
        tex = texture(raster.point[hit])
        lam = np.abs(normals[raster.face_id[hit]] @ _LIGHT)
        img[hit] = np.clip(tex * (_AMBIENT + (1.0 - _AMBIENT) * lam), 0.0, 1.0)
    return img


def render_views(scene: Scene, cameras=None, noise: NoiseSpec | None = None) -> tuple:
    """Render images and likelihood stacks for all cameras.

    Likelihoods soften the true class to 0.9 (rest spread uniformly), then a
    seeded likelihood_flip_rate fraction of pixels has its mass moved to a
    random wrong class; optional blur smooths the maps before
    renormalization. Same seed in, bit-identical rasters out.
    """
    cameras = scene.cameras if cameras is None else cameras
    noise = noise or NoiseSpec()
    rng_img, rng_flip = _child_rngs(noise.seed, 2)
    n_labels = scene.n_labels
    images = []
    stacks = []
    for cam in cameras:
        raster = rasterize(scene.mesh, cam)
        img = _shade(scene.mesh, scene.texture, raster)
        if noise.image_gaussian_sigma > 0:
            img = img + rng_img.normal(0.0, noise.image_gaussian_sigma / 255.0, img.shape)
        images.append(ImageView(np.clip(img, 0.0, 1.0)[:, :, None]))

        classes = render_class_image(scene.mesh, cam, raster)
        lik = _soft_one_hot(classes, n_labels)
        if noise.likelihood_flip_rate > 0:
            lik = _flip_likelihoods(lik, classes, noise.likelihood_flip_rate, rng_flip)
        if noise.likelihood_blur_sigma > 0:
            from scipy.ndimage import gaussian_filter

            lik = np.stack(
                [gaussian_filter(lik[:, :, c], noise.likelihood_blur_sigma) for c in range(n_labels)],
                axis=2,
            )
            lik = np.clip(lik, 1e-6, None)
        lik = lik / lik.sum(axis=2, keepdims=True)
        stacks.append(LikelihoodStack(lik))
    return images, stacks


def _child_rngs(seed, count):
    seqs = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(s) for s in seqs]


def _soft_one_hot(classes, n_labels, confidence=0.9):
    h, w = classes.shape
    lik = np.full((h, w, n_labels), 1.0 / n_labels)
    fg = classes > 0
    off = (1.0 - confidence) / max(n_labels - 1, 1) if n_labels > 1 else 0.0
    lik[fg] = off
    if n_labels == 1:
        lik[fg] = 1.0
    else:
        rows, cols = np.nonzero(fg)
        lik[rows, cols, classes[fg] - 1] = confidence
    return lik


def _flip_likelihoods(lik, classes, rate, rng):
    h, w, n_labels = lik.shape
    flip = (rng.random((h, w)) < rate) & (classes > 0)
    if n_labels > 1 and np.any(flip):
        rows, cols = np.nonzero(flip)
        offsets = rng.integers(1, n_labels, size=len(rows))
        wrong = (classes[flip] - 1 + offsets) % n_labels
        out = lik.copy()
        off = (1.0 - 0.9) / (n_labels - 1)
        out[rows, cols, :] = off
        out[rows, cols, wrong] = 0.9
        return out
    return lik


def perturb_mesh(mesh: LabeledMesh, noise: NoiseSpec, adj=None) -> LabeledMesh:
    """Displace interior vertices and optionally scramble face labels.

    Displacements are iid Gaussian per coordinate with std vertex_sigma *
    scene diagonal; boundary (rim) vertices stay fixed. Scrambled faces get
    a random different label from the mesh's label set. A crude fold check
    (face normals flipping against their originals) logs a warning when the
    noise creates likely self-intersections.
    """
    if adj is None:
        adj = build_adjacency(mesh)
    rng_disp, rng_lab = _child_rngs(noise.seed, 2)
    verts = mesh.vertices.copy()
    if noise.vertex_sigma > 0:
        sigma = noise.vertex_sigma * mesh.diagonal()
        disp = rng_disp.normal(0.0, sigma, verts.shape)
        disp[adj.is_boundary] = 0.0
        old_normals, _ = face_normals_areas(mesh)
        verts = verts + disp
        new_normals, _ = face_normals_areas(mesh.with_vertices(verts))
        folded = int(np.count_nonzero(np.einsum("ij,ij->i", old_normals, new_normals) < 0))
        if folded:
            logger.warning("perturbation folded %d faces; possible self-intersections", folded)
    labels = mesh.face_labels.copy()
    if noise.label_scramble_rate > 0:
        present = np.unique(mesh.face_labels)
        if len(present) > 1:
            hit = rng_lab.random(mesh.n_faces) < noise.label_scramble_rate
            idx = np.nonzero(hit)[0]
            pos = np.searchsorted(present, labels[idx])
            offsets = rng_lab.integers(1, len(present), size=len(idx))
            labels[idx] = present[(pos + offsets) % len(present)]
    return LabeledMesh(verts, mesh.faces, labels)
