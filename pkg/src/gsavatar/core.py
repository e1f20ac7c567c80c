"""Core Gaussian-cloud data model: covariance, spherical harmonics, normals.

All arrays are float64 numpy. Quaternions are scalar-first (w, x, y, z) and
stored unnormalized; they are normalized on use. Scales are stored as logs and
opacities as logits so optimizers work in unconstrained space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

# Real spherical-harmonic constants, community 3DGS convention.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class GaussianCloud:
    """Per-Gaussian parameter arrays; the optimized unknowns.

    means           (N, 3) scene units
    rotations       (N, 4) quaternions, scalar-first, unnormalized
    log_scales      (N, 3) scale = exp(log_scale)
    opacity_logits  (N,)   opacity = sigmoid(logit)
    sh_coeffs       (N, 3, (deg+1)^2) RGB spherical-harmonic coefficients
    """

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(self.rotations, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64))
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64)
        if self.sh_coeffs.ndim == 2:
            self.sh_coeffs = self.sh_coeffs[None]
        self.validate()

    @property
    def n(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[2]))) - 1

    def validate(self):
        n = self.means.shape[0]
        if n < 1:
            raise InvalidParameterError("cloud must contain at least one Gaussian")
        shapes = {
            "means": (self.means.shape, (n, 3)),
            "rotations": (self.rotations.shape, (n, 4)),
            "log_scales": (self.log_scales.shape, (n, 3)),
            "opacity_logits": (self.opacity_logits.shape, (n,)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise InvalidParameterError(f"{name}: expected shape {want}, got {got}")
        if self.sh_coeffs.shape[:2] != (n, 3):
            raise InvalidParameterError(
                f"sh_coeffs: expected shape ({n}, 3, K), got {self.sh_coeffs.shape}"
            )
        k = self.sh_coeffs.shape[2]
        deg = int(round(np.sqrt(k))) - 1
        if not (0 <= deg <= 3) or sh_coeff_count(deg) != k:
            raise InvalidParameterError(f"sh_coeffs last dim {k} is not (deg+1)^2 for deg in 0..3")
        if not np.all(np.isfinite(self.log_scales)):
            raise InvalidParameterError("log_scales must be finite")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(norms < 1e-12):
            raise InvalidParameterError("rotations contain a zero-norm quaternion")

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def normalized_rotations(self) -> np.ndarray:
        return quat_normalize(self.rotations)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.means.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.sh_coeffs.copy(),
        )

    def allclose(self, other: "GaussianCloud", atol: float = 0.0) -> bool:
        return (
            np.allclose(self.means, other.means, atol=atol)
            and np.allclose(self.rotations, other.rotations, atol=atol)
            and np.allclose(self.log_scales, other.log_scales, atol=atol)
            and np.allclose(self.opacity_logits, other.opacity_logits, atol=atol)
            and np.allclose(self.sh_coeffs, other.sh_coeffs, atol=atol)
        )


@dataclass
class Camera:
    """Pinhole camera, OpenCV convention: +x right, +y down, +z forward."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam_rotation: np.ndarray
    world_to_cam_translation: np.ndarray
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_cam_rotation = np.asarray(self.world_to_cam_rotation, dtype=np.float64)
        self.world_to_cam_translation = np.asarray(
            self.world_to_cam_translation, dtype=np.float64
        ).reshape(3)
        self.validate()

    def validate(self):
        r = self.world_to_cam_rotation
        if r.shape != (3, 3):
            raise InvalidParameterError("world_to_cam_rotation must be 3x3")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise InvalidParameterError("world_to_cam_rotation is not orthonormal")
        if not (0.0 < self.near < self.far):
            raise InvalidParameterError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("width and height must be >= 1")

    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.world_to_cam_rotation.T @ self.world_to_cam_translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera space."""
        return points @ self.world_to_cam_rotation.T + self.world_to_cam_translation


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Normalize quaternions (..., 4); zero norm is an error."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise InvalidParameterError("zero-norm quaternion")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4), scalar-first, to rotation matrices (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) to unit quaternions (..., 4), scalar-first.

    Shepperd's method, branch chosen per element for numerical stability.
    """
    r = np.asarray(r, dtype=np.float64)
    batch = r.shape[:-2]
    rf = r.reshape((-1, 3, 3))
    q = np.empty((rf.shape[0], 4), dtype=np.float64)
    m00, m11, m22 = rf[:, 0, 0], rf[:, 1, 1], rf[:, 2, 2]
    trace = m00 + m11 + m22
    choice = np.argmax(np.stack([trace, m00, m11, m22], axis=1), axis=1)
    for i in range(rf.shape[0]):
        m = rf[i]
        c = choice[i]
        if c == 0:
            s = np.sqrt(trace[i] + 1.0) * 2
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
                    (m[1, 0] - m[0, 1]) / s]
        elif c == 1:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
                    (m[0, 2] + m[2, 0]) / s]
        elif c == 2:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
                    (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                    (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q.reshape(batch + (4,))


def covariance_from_scale_rotation(log_scale: np.ndarray, quaternion: np.ndarray) -> np.ndarray:
    """Covariance R diag(exp(ls))^2 R^T for one or a batch of Gaussians."""
    ls = np.asarray(log_scale, dtype=np.float64)
    rot = quat_to_rotmat(quat_normalize(quaternion))
    s2 = np.exp(2.0 * ls)
    # R S^2 R^T with S^2 applied along columns of R.
    return np.einsum("...ik,...k,...jk->...ij", rot, s2, rot)


def _check_unit(view_dir: np.ndarray):
    norm = np.linalg.norm(view_dir, axis=-1)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise InvalidParameterError("view_dir must be unit length (within 1e-6)")


def sh_basis(view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values (..., (degree+1)^2) at unit directions (..., 3)."""
    d = np.asarray(view_dir, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (sh_coeff_count(degree),), dtype=np.float64)
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2 * z * z - x * x - y * y)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (x * x - y * y)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3 * x * x - y * y)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4 * z * z - x * x - y * y)
        out[..., 12] = SH_C3[3] * z * (2 * z * z - 3 * x * x - 3 * y * y)
        out[..., 13] = SH_C3[4] * x * (4 * z * z - x * x - y * y)
        out[..., 14] = SH_C3[5] * z * (x * x - y * y)
        out[..., 15] = SH_C3[6] * x * (x * x - 3 * y * y)
    return out


def sh_basis_grad(view_dir: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(view_dir): shape (..., (degree+1)^2, 3)."""
    d = np.asarray(view_dir, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    g = np.zeros(d.shape[:-1] + (sh_coeff_count(degree), 3), dtype=np.float64)
    if degree >= 1:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, 0], g[..., 4, 1] = SH_C2[0] * y, SH_C2[0] * x
        g[..., 5, 1], g[..., 5, 2] = SH_C2[1] * z, SH_C2[1] * y
        g[..., 6, 0], g[..., 6, 1], g[..., 6, 2] = (
            -2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z)
        g[..., 7, 0], g[..., 7, 2] = SH_C2[3] * z, SH_C2[3] * x
        g[..., 8, 0], g[..., 8, 1] = 2 * SH_C2[4] * x, -2 * SH_C2[4] * y
    if degree >= 3:
        g[..., 9, 0], g[..., 9, 1] = SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * x * x - 3 * y * y)
        g[..., 10, 0], g[..., 10, 1], g[..., 10, 2] = (
            SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y)
        g[..., 11, 0], g[..., 11, 1], g[..., 11, 2] = (
            -2 * SH_C3[2] * x * y, SH_C3[2] * (4 * z * z - x * x - 3 * y * y), SH_C3[2] * 8 * y * z)
        g[..., 12, 0], g[..., 12, 1], g[..., 12, 2] = (
            -6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z, SH_C3[3] * (6 * z * z - 3 * x * x - 3 * y * y))
        g[..., 13, 0], g[..., 13, 1], g[..., 13, 2] = (
            SH_C3[4] * (4 * z * z - 3 * x * x - y * y), -2 * SH_C3[4] * x * y, 8 * SH_C3[4] * x * z)
        g[..., 14, 0], g[..., 14, 1], g[..., 14, 2] = (
            2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z, SH_C3[5] * (x * x - y * y))
        g[..., 15, 0], g[..., 15, 1] = SH_C3[6] * (3 * x * x - 3 * y * y), -SH_C3[6] * 6 * x * y
    return g


def sh_to_color(sh_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Evaluate SH color: clamp(basis . coeffs + 0.5, 0, 1).

    ``sh_coeffs`` is (3, K) or (N, 3, K); ``view_dir`` broadcasts accordingly.
    """
    c = np.asarray(sh_coeffs, dtype=np.float64)
    degree = int(round(np.sqrt(c.shape[-1]))) - 1
    _check_unit(view_dir)
    basis = sh_basis(view_dir, degree)
    rgb = np.einsum("...ck,...k->...c", c, basis) + 0.5
    return np.clip(rgb, 0.0, 1.0)


def gaussian_normal(log_scale: np.ndarray, quaternion: np.ndarray,
                    view_dir: np.ndarray) -> np.ndarray:
    """Camera-facing shortest-axis normal of one or a batch of Gaussians.

    The column of R for the smallest scale, sign-flipped so that
    dot(normal, view_dir) <= 0. Ties resolve to the first minimal axis.
    """
    ls = np.atleast_2d(np.asarray(log_scale, dtype=np.float64))
    q = np.atleast_2d(np.asarray(quaternion, dtype=np.float64))
    v = np.atleast_2d(np.asarray(view_dir, dtype=np.float64))
    _check_unit(v)
    rot = quat_to_rotmat(quat_normalize(q))
    axis = np.argmin(ls, axis=1)
    # Documented tie-break: near-equal scales fall back to the first axis.
    axis[ls.max(axis=1) - ls.min(axis=1) <= 1e-9] = 0
    n = rot[np.arange(rot.shape[0]), :, axis]
    flip = np.sum(n * v, axis=1) > 0.0
    n = np.where(flip[:, None], -n, n)
    if np.asarray(log_scale).ndim == 1:
        return n[0]
    return n
