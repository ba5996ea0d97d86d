"""Deterministic synthetic scenes, sensor models, and scripted runs.

The scene vocabulary is deliberately small: a flat painted ground, opaque
boxes, transmissive bushes, elevated slabs, and water regions. It is just
enough to stage the situations the mapping stack must handle: an obstacle
revealed from behind sparse vegetation, an overhang above a drivable
floor, labels bleeding across a boundary at long range, and a water
surface invisible to LiDAR.

Sensor behavior worth knowing:
    - LiDAR rays pass through bushes per-ray with the bush's hit
      probability, and die without a return when they cross a water
      surface.
    - Cameras label each pixel with the first surface they see: a bush
      fully occluding a rock yields vegetation pixels over the rock.
    - Stereo is camera-like (water is an opaque surface to it) and exists
      to feed the water plane fit; over water it drops and reflects points.

Every random draw comes from a generator seeded by (seed, tick, sensor),
so runs are bit-reproducible and no sensor's draws disturb another's.
"""

import math

import numpy as np
import yaml

from .errors import (ConfigurationError, ImplausibleSurfaceError,
                     InsufficientDataError)
from .geometry import (CameraIntrinsics, Pose, SemanticCloud,
                       backproject_cloud, fit_water_plane)
from .semantics import ONTOLOGY_10, Ontology, threshold_scores
from .voxelmap import VoxelMap

SENSOR_LIDAR = 0
SENSOR_STEREO = 1

# camera axes (+z forward, +x right, +y down) expressed in the vehicle
# frame (+x forward, +y left, +z up)
CAM_IN_VEHICLE = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])

_EPS = 1e-9
_TINY = 1e-300


def points_in_polygon(x, y, poly) -> np.ndarray:
    """Even-odd test of (x, y) arrays against an (M, 2) polygon."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = np.zeros(x.shape, dtype=bool)
    m = poly.shape[0]
    for i in range(m):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % m]
        crosses = (y1 > y) != (y2 > y)
        if y2 == y1:
            continue
        xin = x1 + (y - y1) / (y2 - y1) * (x2 - x1)
        inside ^= crosses & (x < xin)
    return inside


class GroundModel:
    """Flat ground at a fixed height with painted class regions."""

    __slots__ = ("height", "default_class", "paint")

    def __init__(self, height: float, default_class: int, paint):
        self.height = float(height)
        self.default_class = int(default_class)
        # paint: list of (class index, (M,2) polygon); first match wins
        self.paint = [(int(c), np.asarray(p, np.float64).reshape(-1, 2))
                      for c, p in paint]

    def class_at(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        cls = np.full(x.shape, self.default_class, dtype=np.int16)
        undecided = np.ones(x.shape, dtype=bool)
        for c, poly in self.paint:
            hit = undecided & points_in_polygon(x, y, poly)
            cls[hit] = c
            undecided &= ~hit
        return cls


class SceneObject:
    """One primitive: an axis-aligned box, optionally transmissive."""

    __slots__ = ("kind", "cls", "lo", "hi", "hit_prob")

    def __init__(self, kind: str, cls: int, center, size, hit_prob=None):
        self.kind = kind
        self.cls = int(cls)
        center = np.asarray(center, np.float64).reshape(3)
        size = np.asarray(size, np.float64).reshape(3)
        if (size <= 0).any():
            raise ConfigurationError(f"{kind} size must be positive, got {size.tolist()}")
        self.lo = center - size / 2.0
        self.hi = center + size / 2.0
        if kind == "bush":
            if hit_prob is None or not (0.0 < hit_prob < 1.0):
                raise ConfigurationError("bush hit_prob must lie strictly in (0, 1)")
            self.hit_prob = float(hit_prob)
        else:
            self.hit_prob = None


class WaterRegion:
    __slots__ = ("polygon", "surface_height", "cls")

    def __init__(self, polygon, surface_height: float, cls: int):
        self.polygon = np.asarray(polygon, np.float64).reshape(-1, 2)
        if self.polygon.shape[0] < 3:
            raise ConfigurationError("water polygon needs at least 3 vertices")
        self.surface_height = float(surface_height)
        self.cls = int(cls)


class Scene:
    __slots__ = ("name", "ground", "objects", "water", "ontology")

    def __init__(self, name: str, ground: GroundModel, objects, water,
                 ontology: Ontology = ONTOLOGY_10):
        self.name = name
        self.ground = ground
        self.objects = list(objects)
        self.water = list(water)
        self.ontology = ontology


def load_scene(path, ontology: Ontology = ONTOLOGY_10) -> Scene:
    with open(path) as f:
        doc = yaml.safe_load(f)
    try:
        g = doc["ground"]
        if g.get("kind", "flat") != "flat":
            raise ConfigurationError(f"unsupported ground kind {g.get('kind')!r}")
        default_cls = ontology.index(doc["default_ground_class"])
        paint = [(ontology.index(p["class"]), p["polygon"])
                 for p in doc.get("paint", [])]
        ground = GroundModel(g["height"], default_cls, paint)
        objects, water = [], []
        for o in doc.get("objects", []):
            kind = o["kind"]
            if kind == "water":
                water.append(WaterRegion(o["polygon"], o["surface_height"],
                                         ontology.index(o.get("class", "water"))))
            elif kind in ("box", "bush", "slab"):
                objects.append(SceneObject(kind, ontology.index(o["class"]),
                                           o["center"], o["size"],
                                           o.get("hit_prob")))
            else:
                raise ConfigurationError(f"unknown object kind {kind!r}")
        return Scene(doc.get("name", "scene"), ground, objects, water, ontology)
    except KeyError as e:
        raise ConfigurationError(f"scene file {path} missing field {e.args[0]!r}") from e


# -- ray casting -------------------------------------------------------------


def _safe_div_dirs(dirs: np.ndarray) -> np.ndarray:
    # avoid 0/0 NaNs in the slab test; exact-zero components become a
    # signless tiny positive value, which the interval logic tolerates
    return np.where(np.abs(dirs) < _TINY, _TINY, dirs)


def _ray_aabb(origin, dirs, lo, hi) -> np.ndarray:
    """Entry parameter t per ray for one box; +inf where missed."""
    inv = 1.0 / _safe_div_dirs(dirs)
    t1 = (lo - origin) * inv
    t2 = (hi - origin) * inv
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmax > _EPS) & (tmin > _EPS)
    return np.where(hit, tmin, np.inf)


def _ray_ground(origin, dirs, height) -> np.ndarray:
    dz = _safe_div_dirs(dirs[:, 2:3])[:, 0]
    t = (height - origin[2]) / dz
    return np.where(t > _EPS, t, np.inf)


def _ray_water(origin, dirs, region: WaterRegion) -> np.ndarray:
    t = _ray_ground(origin, dirs, region.surface_height)
    fin = np.isfinite(t)
    out = np.full(t.shape, np.inf)
    if fin.any():
        px = origin[0] + t[fin] * dirs[fin, 0]
        py = origin[1] + t[fin] * dirs[fin, 1]
        inside = points_in_polygon(px, py, region.polygon)
        out[fin] = np.where(inside, t[fin], np.inf)
    return out


def _first_surface(scene: Scene, origin, dirs, object_active=None,
                   water_opaque: bool = True):
    """First-hit parameter and class per ray.

    object_active: optional (n_objects, n_rays) bool — rows disable an
    object per ray (a bush a ray slips through). Returns (t, cls) with
    t = +inf and cls = -1 for rays that hit nothing; when water_opaque is
    False, rays whose water-surface crossing precedes their first opaque
    hit also return nothing (the no-return rule).
    """
    n = dirs.shape[0]
    best_t = _ray_ground(origin, dirs, scene.ground.height)
    best_cls = np.full(n, -2, dtype=np.int16)  # -2 marks "ground, paint later"
    for i, obj in enumerate(scene.objects):
        t = _ray_aabb(origin, dirs, obj.lo, obj.hi)
        if object_active is not None:
            t = np.where(object_active[i], t, np.inf)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_cls = np.where(closer, np.int16(obj.cls), best_cls)
    water_t = np.full(n, np.inf)
    water_cls = np.full(n, -1, dtype=np.int16)
    for region in scene.water:
        t = _ray_water(origin, dirs, region)
        closer = t < water_t
        water_t = np.where(closer, t, water_t)
        water_cls = np.where(closer, np.int16(region.cls), water_cls)
    if water_opaque:
        closer = water_t < best_t
        best_t = np.where(closer, water_t, best_t)
        best_cls = np.where(closer, water_cls, best_cls)
    else:
        # no return when the ray pierces a surface, and none from a hit
        # lying underwater (rays can enter the volume through its side)
        dead = water_t < best_t
        fin = np.isfinite(best_t) & ~dead
        if fin.any() and scene.water:
            hx = origin[0] + best_t[fin] * dirs[fin, 0]
            hy = origin[1] + best_t[fin] * dirs[fin, 1]
            hz = origin[2] + best_t[fin] * dirs[fin, 2]
            sub = np.zeros(hx.shape, dtype=bool)
            for region in scene.water:
                below = hz < region.surface_height
                if below.any():
                    sub |= below & points_in_polygon(hx, hy, region.polygon)
            dead[np.flatnonzero(fin)[sub]] = True
        best_t = np.where(dead, np.inf, best_t)
    miss = ~np.isfinite(best_t)
    best_cls[miss] = -1
    ground_hit = best_cls == -2
    if ground_hit.any():
        gx = origin[0] + best_t[ground_hit] * dirs[ground_hit, 0]
        gy = origin[1] + best_t[ground_hit] * dirs[ground_hit, 1]
        best_cls[ground_hit] = scene.ground.class_at(gx, gy)
    return best_t, best_cls


# -- sensors -----------------------------------------------------------------


class LidarSpec:
    __slots__ = ("rings", "azimuth_steps", "max_range", "rate",
                 "elevation_deg", "position")

    def __init__(self, rings, azimuth_steps, max_range, rate,
                 elevation_deg=(-45.0, 15.0), position=(0.0, 0.0, 1.8)):
        if rings < 1 or azimuth_steps < 1:
            raise ConfigurationError("lidar ray grid must be non-empty")
        if max_range <= 0 or rate <= 0:
            raise ConfigurationError("lidar max_range and rate must be positive")
        self.rings = int(rings)
        self.azimuth_steps = int(azimuth_steps)
        self.max_range = float(max_range)
        self.rate = float(rate)
        self.elevation_deg = (float(elevation_deg[0]), float(elevation_deg[1]))
        if self.elevation_deg[0] >= self.elevation_deg[1]:
            raise ConfigurationError("elevation_deg must be (low, high)")
        self.position = np.asarray(position, np.float64).reshape(3)

    def ray_directions(self) -> np.ndarray:
        els = np.deg2rad(np.linspace(self.elevation_deg[0], self.elevation_deg[1],
                                     self.rings))
        azs = np.deg2rad(np.arange(self.azimuth_steps) *
                         (360.0 / self.azimuth_steps))
        el = np.repeat(els, self.azimuth_steps)
        az = np.tile(azs, self.rings)
        ce = np.cos(el)
        return np.column_stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)])


def raycast_lidar(scene: Scene, sensor_pose: Pose, spec: LidarSpec, seed):
    """One sweep. Returns (points in the sensor frame, true class per point).

    Each ray takes its first hit among ground and objects; a bush blocks
    a ray with probability hit_prob (seeded), otherwise the ray ignores
    it entirely. Rays that would cross a water surface first return
    nothing at all.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d_sensor = spec.ray_directions()
    d_world = d_sensor @ sensor_pose.rotation.T
    origin = sensor_pose.translation
    n = d_world.shape[0]
    active = None
    if any(o.kind == "bush" for o in scene.objects):
        active = np.ones((len(scene.objects), n), dtype=bool)
        for i, obj in enumerate(scene.objects):
            if obj.kind == "bush":
                active[i] = rng.random(n) < obj.hit_prob
    t, cls = _first_surface(scene, origin, d_world, object_active=active,
                            water_opaque=False)
    keep = np.isfinite(t) & (t <= spec.max_range)
    return d_sensor[keep] * t[keep, None], cls[keep].astype(np.int8)


def render_semantic_image(scene: Scene, cam_pose: Pose, intr: CameraIntrinsics,
                          confidence: float = 1.0) -> np.ndarray:
    """Per-pixel class confidence image of what the camera actually sees.

    The winning class per pixel is the first visible surface (water
    surfaces included; misses are sky) at the given confidence, with the
    remainder spread uniformly over the other classes so rows sum to 1.
    confidence 1.0 gives exact one-hot vectors.
    """
    if not 0.0 < confidence <= 1.0:
        raise ConfigurationError("confidence must lie in (0, 1]")
    n_cls = scene.ontology.n_cls
    w, h = intr.width, intr.height
    u, v = np.meshgrid(np.arange(w, dtype=np.float64),
                       np.arange(h, dtype=np.float64))
    d_cam = np.column_stack([
        ((u.ravel() - intr.cx) / intr.fx),
        ((v.ravel() - intr.cy) / intr.fy),
        np.ones(w * h),
    ])
    d_world = d_cam @ cam_pose.rotation.T
    _, cls = _first_surface(scene, cam_pose.translation, d_world,
                            water_opaque=True)
    sky = scene.ontology.index("sky")
    cls = np.where(cls < 0, np.int16(sky), cls)
    rest = (1.0 - confidence) / (n_cls - 1)
    img = np.full((h * w, n_cls), rest, dtype=np.float32)
    img[np.arange(h * w), cls] = confidence
    return img.reshape(h, w, n_cls)


class StereoSpec:
    __slots__ = ("rate", "camera", "range_limit", "stride", "hole_fraction",
                 "reflect_fraction", "noise_sigma", "min_water_pixels")

    def __init__(self, rate=10.0, camera="front", range_limit=15.0, stride=2,
                 hole_fraction=0.35, reflect_fraction=0.02, noise_sigma=0.01,
                 min_water_pixels=50):
        if rate <= 0 or range_limit <= 0 or stride < 1:
            raise ConfigurationError("stereo rate, range_limit, stride must be positive")
        if not (0.0 <= hole_fraction < 1.0 and 0.0 <= reflect_fraction < 1.0
                and hole_fraction + reflect_fraction < 1.0):
            raise ConfigurationError("stereo hole/reflect fractions must fit in [0, 1)")
        self.rate = float(rate)
        self.camera = str(camera)
        self.range_limit = float(range_limit)
        self.stride = int(stride)
        self.hole_fraction = float(hole_fraction)
        self.reflect_fraction = float(reflect_fraction)
        self.noise_sigma = float(noise_sigma)
        self.min_water_pixels = int(min_water_pixels)


class StereoReturn:
    __slots__ = ("points", "classes", "pixels")

    def __init__(self, points, classes, pixels):
        self.points = points      # (M, 3) world frame
        self.classes = classes    # (M,) int8 true class of the hit surface
        self.pixels = pixels      # (M, 2) integer (u, v) of the source pixel

    def __len__(self):
        return self.points.shape[0]


def simulate_stereo(scene: Scene, cam_pose: Pose, spec: StereoSpec,
                    intr: CameraIntrinsics, seed) -> StereoReturn:
    """Near-field depth points along the camera's pixel rays.

    Water is an opaque surface here (stereo sees its texture). Over
    water, a hole fraction of points vanishes and a reflect fraction
    lands spuriously below the surface; everything gets range noise.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    us = np.arange(0, intr.width, spec.stride, dtype=np.int64)
    vs = np.arange(0, intr.height, spec.stride, dtype=np.int64)
    uu, vv = np.meshgrid(us, vs)
    uu, vv = uu.ravel(), vv.ravel()
    d_cam = np.column_stack([
        (uu - intr.cx) / intr.fx,
        (vv - intr.cy) / intr.fy,
        np.ones(uu.shape[0]),
    ])
    d_world = d_cam @ cam_pose.rotation.T
    origin = cam_pose.translation
    t, cls = _first_surface(scene, origin, d_world, water_opaque=True)
    norms = np.linalg.norm(d_world, axis=1)
    rng_m = t * norms
    keep = np.isfinite(t) & (rng_m <= spec.range_limit)
    d_unit = d_world[keep] / norms[keep, None]
    r = rng_m[keep] + rng.normal(0.0, spec.noise_sigma, int(keep.sum()))
    cls = cls[keep].astype(np.int8)
    uu, vv = uu[keep], vv[keep]

    water_cls = {region.cls for region in scene.water}
    is_water = np.isin(cls, list(water_cls)) if water_cls else np.zeros(cls.shape, bool)
    drop = np.zeros(cls.shape, bool)
    if is_water.any():
        u01 = rng.random(int(is_water.sum()))
        wdrop = u01 < spec.hole_fraction
        wrefl = (~wdrop) & (u01 < spec.hole_fraction + spec.reflect_fraction)
        widx = np.flatnonzero(is_water)
        drop[widx[wdrop]] = True
        refl = widx[wrefl]
        # overshoot along the ray: the virtual image lands under the surface
        r[refl] = r[refl] + rng.uniform(0.2, 1.0, refl.shape[0])
    pts = origin + d_unit * r[:, None]
    keep2 = ~drop
    return StereoReturn(pts[keep2], cls[keep2],
                        np.column_stack([uu[keep2], vv[keep2]]))


# -- rig and trajectory ------------------------------------------------------


class CameraSpec:
    __slots__ = ("name", "rate", "position", "yaw_deg", "intrinsics")

    def __init__(self, name, rate, position, yaw_deg, intrinsics: CameraIntrinsics):
        if rate <= 0:
            raise ConfigurationError(f"camera {name!r} rate must be positive")
        self.name = str(name)
        self.rate = float(rate)
        self.position = np.asarray(position, np.float64).reshape(3)
        self.yaw_deg = float(yaw_deg)
        self.intrinsics = intrinsics

    def mount_pose(self) -> Pose:
        """Camera-frame-to-vehicle-frame pose."""
        yaw = math.radians(self.yaw_deg)
        return Pose.from_yaw(yaw, self.position).compose(
            Pose(CAM_IN_VEHICLE, np.zeros(3)))


class SensorRig:
    __slots__ = ("name", "lidar", "cameras", "stereo")

    def __init__(self, name, lidar: LidarSpec, cameras, stereo=None):
        self.name = str(name)
        self.lidar = lidar
        self.cameras = dict(cameras)
        if not self.cameras:
            raise ConfigurationError("rig needs at least one camera")
        self.stereo = stereo
        for cam in self.cameras.values():
            self._ratio(cam.rate, f"camera {cam.name!r}")
        if stereo is not None:
            self._ratio(stereo.rate, "stereo")
            if stereo.camera not in self.cameras:
                raise ConfigurationError(
                    f"stereo references unknown camera {stereo.camera!r}")

    def _ratio(self, rate: float, what: str) -> int:
        ratio = self.lidar.rate / rate
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ConfigurationError(
                f"{what} rate {rate} must integrally divide the lidar rate {self.lidar.rate}")
        return int(round(ratio))

    def tick_ratio(self, rate: float) -> int:
        return self._ratio(rate, "sensor")


def load_rig(path) -> SensorRig:
    with open(path) as f:
        doc = yaml.safe_load(f)
    try:
        L = doc["lidar"]
        lidar = LidarSpec(L["rings"], L["azimuth_steps"], L["max_range"],
                          L["rate"], tuple(L.get("elevation_deg", (-45.0, 15.0))),
                          L.get("position", (0.0, 0.0, 1.8)))
        cameras = {}
        for name, c in doc["cameras"].items():
            cameras[name] = CameraSpec(
                name, c["rate"], c["position"], c.get("yaw_deg", 0.0),
                CameraIntrinsics.from_dict(c["intrinsics"]))
        stereo = None
        if "stereo" in doc:
            s = doc["stereo"]
            stereo = StereoSpec(
                rate=s.get("rate", 10.0), camera=s.get("camera", "front"),
                range_limit=s.get("range_limit", 15.0), stride=s.get("stride", 2),
                hole_fraction=s.get("hole_fraction", 0.35),
                reflect_fraction=s.get("reflect_fraction", 0.02),
                noise_sigma=s.get("noise_sigma", 0.01),
                min_water_pixels=s.get("min_water_pixels", 50))
        return SensorRig(doc.get("name", "rig"), lidar, cameras, stereo)
    except KeyError as e:
        raise ConfigurationError(f"rig file {path} missing field {e.args[0]!r}") from e


class Trajectory:
    """Piecewise-linear vehicle path; each leg carries a motion tag."""

    __slots__ = ("name", "times", "xs", "ys", "yaws", "tags")

    def __init__(self, name, waypoints):
        if len(waypoints) < 2:
            raise ConfigurationError("trajectory needs at least 2 waypoints")
        self.name = str(name)
        self.times = np.array([w["t"] for w in waypoints], np.float64)
        if not np.all(np.diff(self.times) > 0):
            raise ConfigurationError("waypoint timestamps must strictly increase")
        self.xs = np.array([w["x"] for w in waypoints], np.float64)
        self.ys = np.array([w["y"] for w in waypoints], np.float64)
        self.yaws = np.array([w.get("yaw", 0.0) for w in waypoints], np.float64)
        # leg i (from waypoint i to i+1) is tagged by the destination waypoint
        self.tags = [str(w.get("tag", "forward")) for w in waypoints]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def sample(self, t: float):
        """(x, y, yaw, tag) at time t, clamped to the path's span."""
        t = min(max(t, float(self.times[0])), float(self.times[-1]))
        i = int(np.searchsorted(self.times, t, side="right") - 1)
        i = min(max(i, 0), len(self.times) - 2)
        span = self.times[i + 1] - self.times[i]
        a = (t - self.times[i]) / span
        x = self.xs[i] + a * (self.xs[i + 1] - self.xs[i])
        y = self.ys[i] + a * (self.ys[i + 1] - self.ys[i])
        yaw = self.yaws[i] + a * (self.yaws[i + 1] - self.yaws[i])
        return float(x), float(y), float(yaw), self.tags[i + 1]


def load_trajectory(path) -> Trajectory:
    with open(path) as f:
        doc = yaml.safe_load(f)
    try:
        return Trajectory(doc.get("name", "trajectory"), doc["waypoints"])
    except KeyError as e:
        raise ConfigurationError(
            f"trajectory file {path} missing field {e.args[0]!r}") from e


# -- scenario runner ---------------------------------------------------------


class FrameRecord:
    """Everything the evaluation needs about one fused tick."""

    __slots__ = ("idx", "t", "pose", "tag", "keys", "obs_range", "obs_class",
                 "true_class", "stats", "map_argmax", "water_offset",
                 "water_injected", "snapshot_due", "images")

    def __init__(self, idx, t, pose, tag, keys, obs_range, obs_class,
                 true_class, stats, map_argmax, water_offset, water_injected,
                 snapshot_due, images=None):
        self.idx = idx
        self.t = t
        self.pose = pose                  # (x, y, yaw)
        self.tag = tag
        self.keys = keys                  # (P,) packed voxel key per point
        self.obs_range = obs_range        # (P,) float32
        self.obs_class = obs_class        # (P,) int8 argmax of the merged semantics, -1 = none
        self.true_class = true_class      # (P,) int8 scene truth per point
        self.stats = stats
        self.map_argmax = map_argmax      # (n_rows,) int8 map argmax after this frame
        self.water_offset = water_offset  # fitted plane offset or None
        self.water_injected = water_injected
        self.snapshot_due = snapshot_due
        self.images = images


class ScenarioTimeline:
    __slots__ = ("scene_name", "trajectory_name", "rig_name", "strategy",
                 "seed", "resolution", "map_rate", "ontology", "frames",
                 "rowkeys", "final_snapshot", "map")

    def __init__(self, scene_name, trajectory_name, rig_name, strategy, seed,
                 resolution, map_rate, ontology, frames, rowkeys,
                 final_snapshot, vmap=None):
        self.scene_name = scene_name
        self.trajectory_name = trajectory_name
        self.rig_name = rig_name
        self.strategy = strategy
        self.seed = seed
        self.resolution = resolution
        self.map_rate = map_rate
        self.ontology = ontology
        self.frames = frames
        self.rowkeys = rowkeys            # (n_rows,) packed key per map row
        self.final_snapshot = final_snapshot
        self.map = vmap

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def observed_keys(self) -> np.ndarray:
        """Every voxel key any frame's cloud touched, sorted unique."""
        if not self.frames:
            return np.zeros(0, np.int64)
        return np.unique(np.concatenate([f.keys for f in self.frames]))


def _merge_semantics(primary: SemanticCloud, secondary: SemanticCloud) -> np.ndarray:
    """Primary's confidences, with all-NaN rows filled from secondary."""
    conf = primary.confidence.copy()
    empty = ~np.isfinite(conf).any(axis=1)
    conf[empty] = secondary.confidence[empty]
    return conf


def run_scenario(scene: Scene, trajectory: Trajectory, rig: SensorRig,
                 strategy: str, seed: int, resolution: float = 0.2,
                 map_rate: float = 5.0, on_snapshot=None,
                 keep_images: bool = False, vmap=None) -> ScenarioTimeline:
    """Step the whole pipeline over the trajectory at the lidar rate.

    Per tick: cast the sweep, render whichever cameras are due,
    backproject semantics onto the sweep (front camera first, rear fills
    points the front cannot see), fuse, then fit and inject the water
    plane when the stereo view holds enough water pixels. Snapshots are
    taken at map_rate through on_snapshot. Deterministic given the seed.

    vmap lets a caller hand in a pre-seeded map (e.g. primed with stale
    votes); it must agree with the requested strategy and resolution.
    """
    if seed is None:
        raise ConfigurationError("seed is required")
    seed = int(seed)
    if vmap is None:
        vmap = VoxelMap(resolution, scene.ontology, strategy)
    elif (vmap.strategy != strategy or vmap.ontology != scene.ontology
          or vmap.resolution != resolution):
        raise ConfigurationError(
            "provided map disagrees with the requested strategy/ontology/resolution")
    snap_every = rig.tick_ratio(map_rate)
    tick_dt = 1.0 / rig.lidar.rate
    n_ticks = int(round(trajectory.duration * rig.lidar.rate)) + 1
    cam_ratio = {name: rig.tick_ratio(cam.rate) for name, cam in rig.cameras.items()}
    stereo_ratio = rig.tick_ratio(rig.stereo.rate) if rig.stereo else None
    water_cls = {r.cls for r in scene.water}

    frames = []
    for tick in range(n_ticks):
        t = trajectory.times[0] + tick * tick_dt
        x, y, yaw, tag = trajectory.sample(t)
        veh = Pose.from_yaw(yaw, (x, y, 0.0))
        lidar_pose = veh.compose(Pose(np.eye(3), rig.lidar.position))

        pts_sensor, true_cls = raycast_lidar(
            scene, lidar_pose, rig.lidar,
            np.random.default_rng([seed, tick, SENSOR_LIDAR]))

        cam_poses, cam_images = {}, {}
        for name, cam in rig.cameras.items():
            if tick % cam_ratio[name] == 0:
                cam_poses[name] = veh.compose(cam.mount_pose())
                cam_images[name] = render_semantic_image(
                    scene, cam_poses[name], cam.intrinsics)

        order = [n for n in ("front", "rear") if n in cam_images]
        order += [n for n in cam_images if n not in order]
        if not order:
            raise ConfigurationError("no camera due on tick 0; rates are broken")
        first = order[0]
        cloud = backproject_cloud(pts_sensor, lidar_pose, cam_poses[first],
                                  rig.cameras[first].intrinsics, cam_images[first])
        conf = cloud.confidence
        for name in order[1:]:
            other = backproject_cloud(pts_sensor, lidar_pose, cam_poses[name],
                                      rig.cameras[name].intrinsics, cam_images[name])
            conf = _merge_semantics(
                SemanticCloud(cloud.points, conf, cloud.ranges), other)
        cloud = SemanticCloud(cloud.points, conf, cloud.ranges,
                              origin=lidar_pose.translation)
        stats = vmap.fuse_cloud(cloud)

        water_offset, injected = None, 0
        if (rig.stereo is not None and water_cls and tick % stereo_ratio == 0
                and rig.stereo.camera in cam_images):
            cam_name = rig.stereo.camera
            sr = simulate_stereo(scene, cam_poses[cam_name], rig.stereo,
                                 rig.cameras[cam_name].intrinsics,
                                 np.random.default_rng([seed, tick, SENSOR_STEREO]))
            if len(sr):
                img = cam_images[cam_name]
                pixel_cls = img[sr.pixels[:, 1], sr.pixels[:, 0]].argmax(axis=1)
                wmask = np.isin(pixel_cls, list(water_cls))
                if int(wmask.sum()) >= rig.stereo.min_water_pixels:
                    try:
                        wpts = sr.points[wmask]
                        plane = fit_water_plane(wpts)
                        cols = np.unique(
                            np.floor(wpts[:, :2] / resolution).astype(np.int64),
                            axis=0)
                        footprint = []
                        for iy in np.unique(cols[:, 1]):
                            xs = cols[cols[:, 1] == iy, 0]
                            footprint.extend(
                                (int(ix), int(iy))
                                for ix in range(int(xs.min()), int(xs.max()) + 1))
                        injected = vmap.inject_water_plane(
                            plane, footprint,
                            sensor_origin=cam_poses[cam_name].translation)
                        # surface height where the fit has support, not the
                        # plane's extrapolated z-intercept at the map origin
                        water_offset = float(plane.height_at(
                            wpts[:, 0].mean(), wpts[:, 1].mean()))
                    except (InsufficientDataError, ImplausibleSurfaceError):
                        pass

        obs_class = threshold_scores(conf, 0.0).astype(np.int8)
        snapshot_due = tick % snap_every == 0
        if snapshot_due and on_snapshot is not None:
            on_snapshot(tick, vmap.snapshot())
        frames.append(FrameRecord(
            idx=tick, t=t, pose=(x, y, yaw), tag=tag,
            keys=vmap._bin_points(cloud.points),
            obs_range=cloud.ranges.copy(),
            obs_class=obs_class,
            true_class=true_cls,
            stats=stats,
            map_argmax=vmap.argmax_rows().astype(np.int8),
            water_offset=water_offset,
            water_injected=injected,
            snapshot_due=snapshot_due,
            images=dict(cam_images) if keep_images else None,
        ))

    final = vmap.snapshot()
    return ScenarioTimeline(
        scene_name=scene.name, trajectory_name=trajectory.name,
        rig_name=rig.name, strategy=strategy, seed=seed,
        resolution=resolution, map_rate=map_rate, ontology=scene.ontology,
        frames=frames, rowkeys=final.keys.copy(), final_snapshot=final,
        vmap=vmap)
