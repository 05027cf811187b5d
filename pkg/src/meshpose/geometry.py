"""Camera model, rotation parameterization, pose sampling and pose-error metrics.

Coordinate conventions (fixed repo-wide):
  World frame: right-handed, millimetres, z up.
  Camera frame: right-handed, x right, y down, z forward (the camera looks
    along +z; points in front of the camera have positive depth).
  Image frame: origin at the top-left corner, u right, v down, pixels.
    Pixel (ix, iy) is sampled at the continuous coordinate (ix + 0.5, iy + 0.5).

A pose maps world points into the camera frame: X_cam = R @ X_world + t.
Rotations are carried as Euler-Rodrigues vectors (axis * angle, radians)
restricted to ||r|| < pi so the matrix <-> vector round trip is unambiguous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Face / pixel class labels shared by the mesh, rasterizer and synthesis code.
BACKGROUND = 0
PARENCHYMA = 1
VESSEL = 2

_DEPTH_EPS = 1e-9


class BehindCameraError(ValueError):
    """Raised when points sit at or behind the camera plane (Z <= eps)."""

    def __init__(self, indices):
        self.indices = np.asarray(indices, dtype=int)
        shown = ", ".join(str(i) for i in self.indices[:8])
        more = "" if len(self.indices) <= 8 else f", ... ({len(self.indices)} total)"
        super().__init__(f"points at/behind the camera: indices [{shown}{more}]")


def rodrigues_to_matrix(r_vec) -> np.ndarray:
    """Convert an Euler-Rodrigues rotation vector to a 3x3 rotation matrix.

    The zero vector maps to the identity.
    """
    r = np.asarray(r_vec, dtype=float).reshape(3)
    if not np.all(np.isfinite(r)):
        raise ValueError("rotation vector must be finite")
    theta = float(np.linalg.norm(r))
    K = np.array(
        [
            [0.0, -r[2], r[1]],
            [r[2], 0.0, -r[0]],
            [-r[1], r[0], 0.0],
        ]
    )
    if theta < 1e-8:
        # Series expansion of sin(t)/t and (1-cos(t))/t^2 avoids cancellation.
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_rodrigues(R) -> np.ndarray:
    """Invert :func:`rodrigues_to_matrix`; the result satisfies ||r|| <= pi.

    Raises ValueError when the input is not orthonormal (within 1e-6) with
    determinant +1.
    """
    R = np.asarray(R, dtype=float).reshape(3, 3)
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
        raise ValueError("input is not a rotation matrix (orthonormal, det +1)")
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    # vee of the skew part equals 2 sin(theta) * axis
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_theta = math.sin(theta)
    if theta < 1e-7:
        return 0.5 * vee
    if sin_theta > 1e-6:
        return (theta / (2.0 * sin_theta)) * vee
    # theta near pi: R + I = 2 * axis axis^T (up to O(pi - theta) terms);
    # take the dominant column, fix the sign from the skew part when usable.
    B = (R + np.eye(3)) / 2.0
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(max(B[k, k], 1e-30))
    axis /= np.linalg.norm(axis)
    if np.abs(vee).max() > 1e-12:
        if float(vee @ axis) < 0.0:
            axis = -axis
    else:
        nz = np.nonzero(np.abs(axis) > 1e-12)[0]
        if axis[nz[0]] < 0:
            axis = -axis
    return theta * axis


@dataclass(frozen=True)
class Pose:
    """6-DoF camera pose: rotation vector (radians * axis) + translation (mm)."""

    r_vec: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r_vec, dtype=float).reshape(3).copy()
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose components must be finite")
        if np.linalg.norm(r) >= math.pi:
            raise ValueError(
                f"||r_vec|| = {np.linalg.norm(r):.6f} must be < pi "
                "(rotations are restricted to the open upper-hemisphere ball)"
            )
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "r_vec", r)
        object.__setattr__(self, "t", t)

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(matrix_to_rodrigues(R), np.asarray(t, dtype=float))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.r_vec, self.t])

    def rotation(self) -> np.ndarray:
        return rodrigues_to_matrix(self.r_vec)

    def transform(self, pts) -> np.ndarray:
        """Apply R @ p + t to an (N, 3) array of world points."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation().T + self.t

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in world coordinates (-R^T t)."""
        return -self.rotation().T @ self.t

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.r_vec, other.r_vec) and np.array_equal(self.t, other.t)


def compose_poses(outer: Pose, inner: Pose) -> Pose:
    """Pose applying `inner` then `outer`: result.transform == outer.transform(inner.transform(.))."""
    Ro, Ri = outer.rotation(), inner.rotation()
    return Pose(matrix_to_rodrigues(Ro @ Ri), Ro @ inner.t + outer.t)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths, principal point and image size (px)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, width: int, height: int, focal_scale: float = 1.2) -> "CameraIntrinsics":
        """Microscope-like narrow FOV: f = focal_scale * max(width, height), centered."""
        f = focal_scale * max(width, height)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangulated surface in mm with a per-face class label (parenchyma/vessel)."""

    vertices: np.ndarray
    faces: np.ndarray
    face_class: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3).copy()
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3).copy()
        c = np.asarray(self.face_class, dtype=np.int64).reshape(-1).copy()
        if v.shape[0] < 3:
            raise ValueError("mesh needs at least 3 vertices")
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        if len(f) != len(c):
            raise ValueError("faces and face_class lengths differ")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face indices out of range")
        if not np.all(np.isin(c, (PARENCHYMA, VESSEL))):
            raise ValueError("face classes must be 1 (parenchyma) or 2 (vessel)")
        if not np.any(c == VESSEL):
            raise ValueError("mesh must contain at least one vessel-labeled face")
        for a in (v, f, c):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "face_class", c)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def diameter(self) -> float:
        """Scene diameter: twice the max vertex distance from the centroid."""
        return 2.0 * float(np.linalg.norm(self.vertices - self.centroid(), axis=1).max())


@dataclass(frozen=True)
class PoseSamplingConfig:
    """Upper-hemisphere look-at sampling around the mesh centroid.

    Radii in mm, angles in radians. Elevation is measured from the centroid
    plane (z = centroid_z), so elevation_range must stay strictly positive to
    keep cameras above the mesh. Azimuth defaults to the full circle.
    """

    n_poses: int
    radius_range: tuple[float, float]
    elevation_range: tuple[float, float]
    roll_range: tuple[float, float] = (0.0, 0.0)
    azimuth_range: tuple[float, float] = (0.0, 2.0 * math.pi)
    lookat_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_poses < 1:
            raise ValueError("n_poses must be >= 1")
        for name in ("radius_range", "elevation_range", "roll_range", "azimuth_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name}: min must be <= max")
        if self.elevation_range[0] <= 0:
            raise ValueError("elevation_range min must be > 0 (upper hemisphere)")
        if self.elevation_range[1] > math.pi / 2:
            raise ValueError("elevation_range max must be <= pi/2")
        if self.lookat_jitter < 0:
            raise ValueError("lookat_jitter must be >= 0")


def look_at_pose(camera_center, target, roll: float = 0.0) -> Pose:
    """Pose whose optical axis runs from `camera_center` through `target`.

    The image-down direction is aligned with world -z as closely as the
    geometry allows; positive roll then rotates the camera about its optical
    axis (right-hand rule about +z_cam).
    """
    C = np.asarray(camera_center, dtype=float).reshape(3)
    T = np.asarray(target, dtype=float).reshape(3)
    fwd = T - C
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("camera center and look-at target coincide")
    z = fwd / n
    down = np.array([0.0, 0.0, -1.0])
    y = down - (down @ z) * z
    if np.linalg.norm(y) < 1e-9:
        # Optical axis (anti)parallel to world z; pick a fixed fallback.
        alt = np.array([0.0, 1.0, 0.0])
        y = alt - (alt @ z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    cr, sr = math.cos(roll), math.sin(roll)
    xr = cr * x + sr * y
    yr = -sr * x + cr * y
    R = np.stack([xr, yr, z], axis=0)
    return Pose(matrix_to_rodrigues(R), -R @ C)


def project_points(intr: CameraIntrinsics, pose: Pose, pts):
    """Project (N, 3) mm points to (N, 2) pixel coordinates plus (N,) depths.

    Raises BehindCameraError naming the offending indices when any point has
    depth <= eps.
    """
    cam = pose.transform(np.asarray(pts, dtype=float).reshape(-1, 3))
    z = cam[:, 2]
    bad = np.nonzero(z <= _DEPTH_EPS)[0]
    if bad.size:
        raise BehindCameraError(bad)
    px = np.empty((cam.shape[0], 2))
    px[:, 0] = intr.fx * cam[:, 0] / z + intr.cx
    px[:, 1] = intr.fy * cam[:, 1] / z + intr.cy
    return px, z.copy()


def _mesh_visible(mesh: SurfaceMesh, intr: CameraIntrinsics, pose: Pose) -> bool:
    cam = pose.transform(mesh.vertices)
    z = cam[:, 2]
    if np.any(z <= _DEPTH_EPS):
        return False
    u = intr.fx * cam[:, 0] / z + intr.cx
    v = intr.fy * cam[:, 1] / z + intr.cy
    return bool(
        (u >= 0).all() and (u < intr.width).all() and (v >= 0).all() and (v < intr.height).all()
    )


def sample_hemisphere_poses(
    mesh: SurfaceMesh,
    intr: CameraIntrinsics,
    cfg: PoseSamplingConfig,
    max_attempts_per_pose: int = 200,
) -> list[Pose]:
    """Draw cfg.n_poses look-at poses on the upper hemisphere over the mesh.

    Per attempt the RNG draws, in order: radius, azimuth, elevation, roll,
    then a jitter offset (uniform in the lookat_jitter ball, via a unit
    direction and a cube-root-scaled radius). Poses that do not keep every
    vertex in front of the camera and inside the image are redrawn;
    systematic failure raises ValueError (radius_range cannot keep the mesh
    inside the view frustum).
    """
    rng = np.random.default_rng(cfg.seed)
    center = mesh.centroid()
    poses: list[Pose] = []
    while len(poses) < cfg.n_poses:
        for attempt in range(max_attempts_per_pose):
            radius = rng.uniform(*cfg.radius_range)
            azimuth = rng.uniform(*cfg.azimuth_range)
            elevation = rng.uniform(*cfg.elevation_range)
            roll = rng.uniform(*cfg.roll_range)
            direction = rng.normal(size=3)
            scale = rng.uniform() ** (1.0 / 3.0)
            if cfg.lookat_jitter > 0:
                direction /= max(np.linalg.norm(direction), 1e-12)
                target = center + cfg.lookat_jitter * scale * direction
            else:
                target = center
            cam_center = center + radius * np.array(
                [
                    math.cos(elevation) * math.cos(azimuth),
                    math.cos(elevation) * math.sin(azimuth),
                    math.sin(elevation),
                ]
            )
            pose = look_at_pose(cam_center, target, roll)
            if _mesh_visible(mesh, intr, pose):
                poses.append(pose)
                break
        else:
            raise ValueError(
                "could not keep the mesh inside the view frustum after "
                f"{max_attempts_per_pose} attempts; widen radius_range or the FOV"
            )
    return poses


def add_metric(vertices, pose_gt: Pose, pose_est: Pose) -> float:
    """Average distance (mm) between vertices transformed by the two poses."""
    pts = np.asarray(vertices, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 1:
        raise ValueError("need at least one vertex")
    d = pose_gt.transform(pts) - pose_est.transform(pts)
    return float(np.linalg.norm(d, axis=1).mean())


def translation_error_mm(pose_gt: Pose, pose_est: Pose) -> float:
    return float(np.linalg.norm(pose_gt.t - pose_est.t))


def rotation_error_deg(pose_gt: Pose, pose_est: Pose) -> float:
    """Geodesic angle (degrees) of R_gt^T @ R_est."""
    Rrel = pose_gt.rotation().T @ pose_est.rotation()
    cos_theta = np.clip((np.trace(Rrel) - 1.0) / 2.0, -1.0, 1.0)
    return math.degrees(math.acos(cos_theta))


def within_threshold(pose_gt: Pose, pose_est: Pose, t_thresh: float, r_thresh: float) -> bool:
    """Composite Xmm-Xdeg correctness check (inclusive comparisons)."""
    if t_thresh <= 0 or r_thresh <= 0:
        raise ValueError("thresholds must be positive")
    return (
        translation_error_mm(pose_gt, pose_est) <= t_thresh
        and rotation_error_deg(pose_gt, pose_est) <= r_thresh
    )


def reprojection_error(intr: CameraIntrinsics, pose: Pose, pts3d, pts2d) -> float:
    """Mean L2 pixel distance between projected 3D points and their 2D matches."""
    p3 = np.asarray(pts3d, dtype=float).reshape(-1, 3)
    p2 = np.asarray(pts2d, dtype=float).reshape(-1, 2)
    if p3.shape[0] == 0:
        raise ValueError("empty correspondence set")
    if p3.shape[0] != p2.shape[0]:
        raise ValueError("pts3d and pts2d must have equal length")
    proj, _ = project_points(intr, pose, p3)
    return float(np.linalg.norm(proj - p2, axis=1).mean())
