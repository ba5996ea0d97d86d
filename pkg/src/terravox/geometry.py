"""Rigid transforms, pinhole projection, semantic backprojection, plane fitting.

All operations here are pure functions of their inputs; nothing in this
module holds mutable state, so everything is safe to call from any thread.

Conventions:
    - world frame: x forward-ish, z up
    - camera frame: +z forward, +x right, +y down (standard pinhole)
    - a Pose maps points FROM its local frame INTO the frame named by
      ``frame_id`` (p_world = R @ p_local + t)
"""

import numpy as np

from .errors import ConfigurationError, ImplausibleSurfaceError, InsufficientDataError


class Pose:
    """Rigid transform: rotation (3x3 orthonormal) plus translation."""

    __slots__ = ("rotation", "translation", "frame_id")

    def __init__(self, rotation, translation, frame_id: str = "world"):
        R = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ConfigurationError(f"rotation must be 3x3, got {R.shape}")
        # orthonormality gate; construction-time noise is ~1e-16, so 1e-6
        # only catches genuinely broken matrices
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ConfigurationError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ConfigurationError("rotation has negative determinant (reflection)")
        self.rotation = R
        self.translation = t
        self.frame_id = frame_id

    @classmethod
    def identity(cls, frame_id: str = "world") -> "Pose":
        return cls(np.eye(3), np.zeros(3), frame_id)

    @classmethod
    def from_yaw(cls, yaw: float, translation, frame_id: str = "world") -> "Pose":
        """Pose rotated about +z by ``yaw`` radians."""
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, translation, frame_id)

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self.compose(other)).transform(p) == self.transform(other.transform(p))."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            self.frame_id,
        )

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, self.frame_id)

    def transform(self, points):
        """Apply to one (3,) point or an (N,3) batch."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def to_matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @classmethod
    def from_matrix(cls, M, frame_id: str = "world") -> "Pose":
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (4, 4):
            raise ConfigurationError(f"expected 4x4 matrix, got {M.shape}")
        return cls(M[:3, :3], M[:3, 3], frame_id)

    def __repr__(self):
        return f"Pose(t={self.translation.tolist()}, frame={self.frame_id!r})"


def transform_point(pose: Pose, point):
    """rotation @ point + translation for a single 3-vector."""
    return pose.transform(np.asarray(point, dtype=np.float64))


class CameraIntrinsics:
    """Pinhole parameters. No distortion model."""

    __slots__ = ("fx", "fy", "cx", "cy", "width", "height")

    def __init__(self, fx, fy, cx, cy, width, height):
        if fx <= 0 or fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if not (0 <= cx < width and 0 <= cy < height):
            raise ConfigurationError("principal point must lie inside the image")
        self.fx = float(fx)
        self.fy = float(fy)
        self.cx = float(cx)
        self.cy = float(cy)
        self.width = int(width)
        self.height = int(height)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        try:
            return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"])
        except KeyError as e:
            raise ConfigurationError(f"intrinsics missing field {e.args[0]!r}") from e

    def __repr__(self):
        return (f"CameraIntrinsics(fx={self.fx}, fy={self.fy}, cx={self.cx}, "
                f"cy={self.cy}, {self.width}x{self.height})")


def project_to_image(intr: CameraIntrinsics, point_cam):
    """Project one camera-frame point to continuous pixel coordinates.

    Returns (u, v) floats, or None when the point is behind the camera
    (z <= 0) or falls outside [0,width) x [0,height). Out-of-frame is a
    valid no-projection result, not an error.
    """
    x, y, z = np.asarray(point_cam, dtype=np.float64)
    if z <= 0.0:
        return None
    u = intr.fx * x / z + intr.cx
    v = intr.fy * y / z + intr.cy
    if not (0.0 <= u < intr.width and 0.0 <= v < intr.height):
        return None
    return (u, v)


def nearest_pixel(u, v):
    """Continuous pixel coords -> integer indices, rounding half toward zero.

    ceil(x - 0.5) implements round-half-toward-zero for x >= 0, which is the
    only regime reachable here (validity is checked on the continuous
    coordinates first). No bilinear blending: class boundaries stay crisp.
    """
    ui = np.ceil(np.asarray(u, dtype=np.float64) - 0.5).astype(np.int64)
    vi = np.ceil(np.asarray(v, dtype=np.float64) - 0.5).astype(np.int64)
    return ui, vi


class SemanticCloud:
    """World-frame points with per-point class confidences and capture ranges.

    confidence is (N, C) float32 where NaN marks "no measurement" for that
    class; a row may be entirely NaN (point never seen by any camera).
    ranges is (N,) float32, the Euclidean distance from the capturing
    sensor's world-frame origin to the point. origin keeps that sensor
    origin so downstream consumers (water injection) know where the cloud
    was captured from.
    """

    __slots__ = ("points", "confidence", "ranges", "origin")

    def __init__(self, points, confidence, ranges, origin=None):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        confidence = np.asarray(confidence, dtype=np.float32)
        ranges = np.asarray(ranges, dtype=np.float32).reshape(-1)
        if confidence.ndim != 2 or confidence.shape[0] != points.shape[0]:
            raise ConfigurationError(
                f"confidence shape {confidence.shape} does not match {points.shape[0]} points")
        if ranges.shape[0] != points.shape[0]:
            raise ConfigurationError("ranges length does not match point count")
        if confidence.size:
            finite = confidence[np.isfinite(confidence)]
            if finite.size and (finite.min() < 0.0 or finite.max() > 1.0):
                raise ConfigurationError("finite confidences must lie in [0, 1]")
        self.points = points
        self.confidence = confidence
        self.ranges = ranges
        self.origin = None if origin is None else np.asarray(origin, dtype=np.float64).reshape(3)

    def __len__(self):
        return self.points.shape[0]

    @property
    def n_classes(self) -> int:
        return self.confidence.shape[1]

    @classmethod
    def empty(cls, n_classes: int) -> "SemanticCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, n_classes), np.float32),
                   np.zeros(0, np.float32))


def backproject_cloud(points_sensor, sensor_pose_world: Pose, cam_pose_world: Pose,
                      intr: CameraIntrinsics, sem_image) -> SemanticCloud:
    """Attach image semantics to a sensor-frame cloud.

    Each point is transformed to world, then into the camera frame and
    projected; valid projections pick up the confidence vector of the
    nearest integer pixel. Points behind the camera or out of frame keep an
    all-NaN vector rather than being dropped, so geometric occupancy can
    still be fused. Output order and count equal the input's.
    """
    sem_image = np.asarray(sem_image, dtype=np.float32)
    if sem_image.ndim != 3:
        raise ConfigurationError("sem_image must be (height, width, n_classes)")
    if sem_image.shape[0] != intr.height or sem_image.shape[1] != intr.width:
        raise ConfigurationError(
            f"sem_image is {sem_image.shape[1]}x{sem_image.shape[0]}, "
            f"intrinsics say {intr.width}x{intr.height}")
    if sensor_pose_world.frame_id != cam_pose_world.frame_id:
        raise ConfigurationError("sensor and camera poses are in different frames")

    pts = np.asarray(points_sensor, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    n_cls = sem_image.shape[2]
    if n == 0:
        out = SemanticCloud.empty(n_cls)
        out.origin = sensor_pose_world.translation.copy()
        return out

    pw = sensor_pose_world.transform(pts)
    pc = cam_pose_world.inverse().transform(pw)

    conf = np.full((n, n_cls), np.nan, dtype=np.float32)
    z = pc[:, 2]
    front = z > 0.0
    if np.any(front):
        u = intr.fx * pc[front, 0] / z[front] + intr.cx
        v = intr.fy * pc[front, 1] / z[front] + intr.cy
        ok = (u >= 0.0) & (u < intr.width) & (v >= 0.0) & (v < intr.height)
        ui, vi = nearest_pixel(u[ok], v[ok])
        # rounding can land exactly on width/height for coords just inside
        # the far edge; clamp back to the last pixel
        np.clip(ui, 0, intr.width - 1, out=ui)
        np.clip(vi, 0, intr.height - 1, out=vi)
        rows = np.flatnonzero(front)[ok]
        conf[rows] = sem_image[vi, ui]

    d = pw - sensor_pose_world.translation
    ranges = np.sqrt(np.einsum("ij,ij->i", d, d)).astype(np.float32)
    return SemanticCloud(pw, conf, ranges, origin=sensor_pose_world.translation)


class Plane:
    """normal . p = offset, with a unit normal."""

    __slots__ = ("normal", "offset")

    def __init__(self, normal, offset):
        n = np.asarray(normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if abs(norm - 1.0) > 1e-9:
            raise ConfigurationError("plane normal must be unit length")
        self.normal = n
        self.offset = float(offset)

    def height_at(self, x, y):
        """z of the plane surface at horizontal position (x, y)."""
        nx, ny, nz = self.normal
        if abs(nz) < 1e-12:
            raise ConfigurationError("plane is vertical, no height at (x, y)")
        return (self.offset - nx * np.asarray(x) - ny * np.asarray(y)) / nz

    def tilt_deg(self) -> float:
        """Angle between the normal and vertical, in degrees."""
        return float(np.degrees(np.arccos(np.clip(abs(self.normal[2]), -1.0, 1.0))))

    def __repr__(self):
        return f"Plane(normal={self.normal.tolist()}, offset={self.offset})"


def fit_water_plane(points, min_points: int = 20, max_tilt_deg: float = 5.0) -> Plane:
    """Least-squares plane through world-frame water points.

    Ordinary least squares on z = a*x + b*y + c; the recovered normal
    (-a, -b, 1)/norm always points up. Water is level, so fits tilted more
    than max_tilt_deg from vertical are rejected instead of running an
    outlier-rejection loop. Below min_points stereo hole noise dominates
    and the fit is refused.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < min_points:
        raise InsufficientDataError(
            f"plane fit needs at least {min_points} points, got {pts.shape[0]}")
    G = np.column_stack([pts[:, 0], pts[:, 1], np.ones(pts.shape[0])])
    (a, b, c), *_ = np.linalg.lstsq(G, pts[:, 2], rcond=None)
    s = np.sqrt(a * a + b * b + 1.0)
    plane = Plane(np.array([-a, -b, 1.0]) / s, c / s)
    tilt = plane.tilt_deg()
    if tilt > max_tilt_deg:
        raise ImplausibleSurfaceError(
            f"fitted surface tilts {tilt:.2f} deg from level (gate {max_tilt_deg} deg)")
    return plane
