"""Pinhole cameras: projection, projection Jacobians, look-at construction."""

from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class Camera:
    """Calibrated pinhole camera.

    intrinsics is upper-triangular 3x3 (focal lengths, skew, principal
    point, in pixels); rotation/translation map world to camera coordinates
    (x_cam = R x + t); depth is camera-frame z. Pixel coordinates are
    continuous with pixel (row, col) covering [col, col+1) x [row, row+1),
    so the center of pixel (row, col) is (col + 0.5, row + 0.5).
    """

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        k = np.ascontiguousarray(np.asarray(self.intrinsics, dtype=np.float64))
        r = np.ascontiguousarray(np.asarray(self.rotation, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.translation, dtype=np.float64)).reshape(3)
        if k.shape != (3, 3) or r.shape != (3, 3):
            raise ValueError("intrinsics and rotation must be 3x3")
        if np.max(np.abs(np.tril(k, -1))) > 1e-12 or abs(k[2, 2] - 1.0) > 1e-9:
            raise ValueError("intrinsics must be upper-triangular with K[2,2] = 1")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0.0 <= k[0, 2] <= self.width and 0.0 <= k[1, 2] <= self.height):
            raise ValueError("principal point must lie inside the image")
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        for arr in (k, r, t):
            arr.setflags(write=False)
        self.intrinsics, self.rotation, self.translation = k, r, t

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, position, target, width, height, focal, up=(0.0, 0.0, 1.0)) -> "Camera":
        """Camera at ``position`` looking toward ``target``; focal in pixels."""
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        fn = np.linalg.norm(forward)
        if fn == 0:
            raise ValueError("camera position and target coincide")
        forward = forward / fn
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
            rn = np.linalg.norm(right)
        right = right / rn
        down = np.cross(forward, right)
        r = np.stack([right, down, forward])
        t = -r @ position
        k = np.array(
            [[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]]
        )
        return cls(intrinsics=k, rotation=r, translation=t, width=width, height=height)


def project(cam: Camera, points):
    """Project world points to pixel coordinates.

    Returns (pixels, depths); depths are camera-frame z and are <= 0 for
    points on or behind the camera plane (callers skip those).
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    cam_pts = pts @ cam.rotation.T + cam.translation
    depth = cam_pts[:, 2]
    safe = np.where(np.abs(depth) < 1e-300, 1.0, depth)
    proj = cam_pts @ cam.intrinsics.T
    pix = proj[:, :2] / safe[:, None]
    if single:
        return pix[0], float(depth[0])
    return pix, depth


def projection_jacobian(cam: Camera, point) -> np.ndarray:
    """2x3 Jacobian of the pixel coordinates with respect to the world point."""
    return projection_jacobians(cam, np.atleast_2d(np.asarray(point, dtype=np.float64)))[0]


def projection_jacobians(cam: Camera, points) -> np.ndarray:
    """(n, 2, 3) Jacobians of project() for a batch of points."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    kr = cam.intrinsics @ cam.rotation
    cam_pts = pts @ cam.rotation.T + cam.translation
    depth = cam_pts[:, 2]
    if np.any(depth <= 0):
        raise ValueError("projection Jacobian requested behind the camera")
    proj = pts @ kr.T + cam.intrinsics @ cam.translation
    u = proj[:, 0] / depth
    v = proj[:, 1] / depth
    jac = np.empty((pts.shape[0], 2, 3))
    jac[:, 0, :] = (kr[0][None, :] - u[:, None] * kr[2][None, :]) / depth[:, None]
    jac[:, 1, :] = (kr[1][None, :] - v[:, None] * kr[2][None, :]) / depth[:, None]
    return jac
