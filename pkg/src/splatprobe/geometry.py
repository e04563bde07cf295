"""Rotations, rigid transforms, and pinhole cameras.

Conventions: quaternions are (w, x, y, z); cameras store world-to-camera
rotation R and translation t with camera axes x-right, y-down, z-forward;
pose twists are 6-vectors (omega, v) in se(3), applied on the left:
new pose = exp(twist) * [R | t].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from splatprobe.defaults import NEAR_DEFAULT
from splatprobe.errors import DataError


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DataError("cannot normalize near-zero quaternion")
    return q / norm


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (..., 4) to rotation matrix (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_to_rot_vjp(q: np.ndarray, grad_rot: np.ndarray) -> np.ndarray:
    """Adjoint of quat_to_rot: (..., 3, 3) cotangent to (..., 4) cotangent."""
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(grad_rot, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    d_w = 2.0 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    d_x = 2.0 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12
                 + z * g20 + w * g21 - 2 * x * g22)
    d_y = 2.0 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12
                 - w * g20 + z * g21 - 2 * y * g22)
    d_z = 2.0 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11
                 + y * g12 + x * g20 + y * g21)
    return np.stack([d_w, d_x, d_y, d_z], axis=-1)


def quat_normalize_vjp(raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Adjoint of q = raw/|raw|: projects the cotangent onto the tangent space."""
    raw = np.asarray(raw, dtype=np.float64)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    unit = raw / norm
    dot = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - dot * unit) / norm


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues rotation for a single 3-vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    k = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    k = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    a = (1.0 - math.cos(theta)) / theta**2
    b = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + a * k + b * (k @ k)


def se3_exp(twist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """SE(3) exponential of (omega, v): returns (rotation, translation)."""
    twist = np.asarray(twist, dtype=np.float64)
    omega, v = twist[:3], twist[3:]
    return so3_exp(omega), so3_left_jacobian(omega) @ v


def se3_adjoint_small(twist: np.ndarray) -> np.ndarray:
    """ad_xi for (omega, v) ordering: [[w^, 0], [v^, w^]]."""
    omega, v = twist[:3], twist[3:]
    out = np.zeros((6, 6), dtype=np.float64)
    out[:3, :3] = skew(omega)
    out[3:, 3:] = skew(omega)
    out[3:, :3] = skew(v)
    return out


def se3_left_jacobian(twist: np.ndarray, terms: int = 30) -> np.ndarray:
    """Left Jacobian of the SE(3) exponential via its convergent series.

    Satisfies exp(xi + d) = exp(J_l(xi) d) exp(xi) to first order. Thirty
    terms reach machine precision for |xi| well beyond the refinement range.
    """
    ad = se3_adjoint_small(np.asarray(twist, dtype=np.float64))
    out = np.eye(6)
    term = np.eye(6)
    for n in range(1, terms):
        term = term @ ad / (n + 1)
        out = out + term
    return out


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # unit quaternion (w, x, y, z), world-to-camera
    translation: np.ndarray  # 3-vector
    near: float = NEAR_DEFAULT

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("focal lengths must be positive")
        if self.near <= 0:
            raise DataError("near plane must be positive")
        q = quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "rotation", q)
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )

    @property
    def rot_matrix(self) -> np.ndarray:
        return quat_to_rot(self.rotation)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rot_matrix.T @ self.translation

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rot_matrix.T + self.translation


def rot_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w >= 0 convention)."""
    r = np.asarray(r, dtype=np.float64)
    trace = r[0, 0] + r[1, 1] + r[2, 2]
    if trace > 0:
        s = math.sqrt(trace + 1.0) * 2
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        )
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def se3_exp_apply(twist: np.ndarray, cam: CameraModel) -> CameraModel:
    """Left-multiply the camera's world-to-camera pose by exp(twist)."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(twist)):
        raise DataError("pose twist has non-finite entries")
    if np.allclose(twist, 0.0):
        return cam
    r_delta, t_delta = se3_exp(twist)
    new_rot = r_delta @ cam.rot_matrix
    new_trans = r_delta @ cam.translation + t_delta
    return replace(cam, rotation=rot_to_quat(new_rot), translation=new_trans)


def look_at_camera(
    eye: np.ndarray,
    target: np.ndarray,
    fx: float,
    fy: float,
    width: int,
    height: int,
    up: np.ndarray = (0.0, 0.0, 1.0),
    near: float = NEAR_DEFAULT,
) -> CameraModel:
    """Camera at `eye` with the optical axis through `target` (z-up world)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise DataError("eye and target coincide")
    z_cam = forward / norm
    right = np.cross(z_cam, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        right = np.cross(z_cam, np.array([0.0, 1.0, 0.0]))
        rn = np.linalg.norm(right)
    x_cam = right / rn
    y_cam = np.cross(z_cam, x_cam)
    rot = np.stack([x_cam, y_cam, z_cam], axis=0)
    trans = -rot @ eye
    return CameraModel(
        fx=fx,
        fy=fy,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
        rotation=rot_to_quat(rot),
        translation=trans,
        near=near,
    )
