"""Sparse semantic voxel map with range-priority fusion and baselines.

The map bins world points into cells of fixed resolution (floor-based)
and fuses per-point class confidences per cell. The default strategy
keeps, per class, the confidence captured at the smallest sensor range
seen so far; three reference strategies (bayesian log-odds, argmax
voting, running average) exist for head-to-head evaluation only.

Storage is struct-of-arrays, unbounded and sparse. One writer at a time:
fuse/inject/snapshot/query serialize on an internal lock, and snapshots
are immutable point-in-time copies that readers may share freely across
threads.
"""

import threading
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels as K
from .errors import ConfigurationError, ImplausibleSurfaceError, InvalidMeasurementError
from .geometry import Plane, SemanticCloud
from .semantics import ONTOLOGY_10, Ontology, threshold_scores

STRATEGIES = ("range_based", "bayesian", "vote", "average")

LOG_ODDS_CLAMP = 10.0
BAYES_EPS = 1e-4


class FusionStats(NamedTuple):
    created: int                # voxels newly allocated by this cloud
    updated: int                # distinct pre-existing voxels touched
    semantic_replacements: int  # finite stored entries overwritten


class Voxel:
    """Read-only copy of one cell's state handed out by query().

    aux carries accumulator state for the single-point baseline fusers
    and stays None for map-produced voxels.
    """

    __slots__ = ("key", "confidence", "class_ranges", "range", "hits",
                 "last_update", "aux")

    def __init__(self, key, confidence, class_ranges, rng, hits, last_update):
        self.key = key
        self.confidence = confidence
        self.class_ranges = class_ranges
        self.range = rng
        self.hits = hits
        self.last_update = last_update
        self.aux = None

    def __repr__(self):
        return (f"Voxel(key={self.key}, range={self.range}, hits={self.hits}, "
                f"conf={np.array2string(self.confidence, precision=3)})")


def argmax_class(voxel: Optional[Voxel], threshold: float = 0.5):
    """Class index a voxel reports under the threshold rule, or None."""
    if voxel is None:
        return None
    cls = int(threshold_scores(voxel.confidence[None, :], threshold)[0])
    return None if cls < 0 else cls


def _check_range(incoming_range) -> np.float32:
    r = float(incoming_range)
    if not np.isfinite(r) or r <= 0.0:
        raise InvalidMeasurementError(f"capture range must be positive and finite, got {r}")
    return np.float32(r)


def _check_conf(incoming_conf) -> np.ndarray:
    c = np.asarray(incoming_conf, dtype=np.float32).reshape(-1)
    fin = c[np.isfinite(c)]
    if fin.size and (fin.min() < 0.0 or fin.max() > 1.0):
        raise InvalidMeasurementError("finite confidences must lie in [0, 1]")
    return c


def fuse_point_range_based(voxel: Optional[Voxel], incoming_conf, incoming_range) -> Voxel:
    """Fuse one measurement into one cell under the range-priority rule.

    Empty cell stores the incoming vector (an all-NaN vector creates a
    geometry-only cell). Per class, the stored value survives when it was
    captured at most as close (tie keeps existing) or when the incoming
    entry is NaN; otherwise the incoming value and its range are taken.
    The exposed per-voxel range is the min over classes, i.e. the range
    of the closest semantics-bearing measurement. Hits always grow by 1.
    """
    r = _check_range(incoming_range)
    c = _check_conf(incoming_conf)
    if voxel is None:
        cr = np.where(np.isfinite(c), r, np.float32(np.inf)).astype(np.float32)
        return Voxel(None, c.copy(), cr, float(cr.min()) if cr.size else np.inf, 1, 0)
    conf = voxel.confidence.copy()
    cr = voxel.class_ranges.copy()
    take = np.isfinite(c) & (r < cr)
    conf[take] = c[take]
    cr[take] = r
    return Voxel(voxel.key, conf, cr, float(cr.min()), voxel.hits + 1, voxel.last_update)


class _BaselineAux:
    """Per-voxel accumulator state for the three reference strategies."""

    __slots__ = ("odds", "count", "votes", "total", "vsum")

    def __init__(self, n_cls):
        self.odds = np.zeros(n_cls, np.float64)   # bayesian log-odds
        self.count = np.zeros(n_cls, np.int64)    # bayesian / average samples
        self.votes = np.zeros(n_cls, np.int64)    # vote counters
        self.total = 0                            # total votes cast
        self.vsum = np.zeros(n_cls, np.float64)   # average running sum


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p.astype(np.float64), BAYES_EPS, 1.0 - BAYES_EPS)
    return np.log(p / (1.0 - p))


def _bayes_conf(odds, count) -> np.ndarray:
    out = (1.0 / (1.0 + np.exp(-np.clip(odds, -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP))))
    return np.where(count > 0, out, np.nan).astype(np.float32)


def _fuse_point_baseline(voxel, incoming_conf, incoming_range, kind) -> Voxel:
    r = _check_range(incoming_range)
    c = _check_conf(incoming_conf)
    if voxel is None:
        voxel = Voxel(None, np.full(c.shape[0], np.nan, np.float32),
                      np.full(c.shape[0], np.inf, np.float32), np.inf, 0, 0)
        aux = _BaselineAux(c.shape[0])
    else:
        aux = voxel.aux
    fin = np.isfinite(c)
    if kind == "bayesian":
        aux.odds[fin] += _logit(c[fin])
        np.clip(aux.odds, -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP, out=aux.odds)
        aux.count[fin] += 1
        conf = _bayes_conf(aux.odds, aux.count)
    elif kind == "vote":
        if fin.any():
            filled = np.where(fin, c, -np.inf)
            aux.votes[int(filled.argmax())] += 1
            aux.total += 1
        with np.errstate(invalid="ignore"):
            conf = (aux.votes / aux.total).astype(np.float32) if aux.total \
                else np.full(c.shape[0], np.nan, np.float32)
    elif kind == "average":
        aux.vsum[fin] += c[fin].astype(np.float64)
        aux.count[fin] += 1
        with np.errstate(invalid="ignore", divide="ignore"):
            conf = np.where(aux.count > 0, aux.vsum / np.maximum(aux.count, 1),
                            np.nan).astype(np.float32)
    else:
        raise ConfigurationError(f"unknown baseline {kind!r}")
    rng = min(voxel.range, float(r)) if fin.any() else voxel.range
    out = Voxel(voxel.key, conf, voxel.class_ranges, rng, voxel.hits + 1, voxel.last_update)
    out.aux = aux
    return out


def fuse_point_bayesian(voxel, incoming_conf, incoming_range) -> Voxel:
    """Per-class log-odds accumulation with clamped odds."""
    return _fuse_point_baseline(voxel, incoming_conf, incoming_range, "bayesian")


def fuse_point_vote(voxel, incoming_conf, incoming_range) -> Voxel:
    """Argmax-vote counters; stored confidence is the vote share."""
    return _fuse_point_baseline(voxel, incoming_conf, incoming_range, "vote")


def fuse_point_average(voxel, incoming_conf, incoming_range) -> Voxel:
    """Running per-class mean of finite confidences."""
    return _fuse_point_baseline(voxel, incoming_conf, incoming_range, "average")


class VoxelMap:
    """Sparse VoxelKey -> cell association with one active fusion strategy."""

    def __init__(self, resolution: float, ontology: Ontology = ONTOLOGY_10,
                 strategy: str = "range_based", initial_capacity: int = 4096,
                 use_numba: Optional[bool] = None):
        if resolution <= 0:
            raise ConfigurationError("resolution must be positive")
        if strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}")
        if use_numba is None:
            use_numba = K.HAS_NUMBA
        elif use_numba and not K.HAS_NUMBA:
            raise ConfigurationError("numba path requested but unavailable")
        self.resolution = float(resolution)
        self.ontology = ontology
        self.strategy = strategy
        self.use_numba = bool(use_numba)
        self._lock = threading.Lock()
        self._n = 0
        self._frame = 0
        self._last_origin = None
        cap = 1 << max(4, int(initial_capacity - 1).bit_length())
        self._alloc(cap)
        if self.use_numba:
            self._slots = np.full(2 * cap, -1, dtype=np.int64)
        else:
            self._sorted_keys = np.empty(0, np.int64)
            self._sorted_rows = np.empty(0, np.int64)
            self._cache_n = 0

    # -- storage management -------------------------------------------------

    def _alloc(self, cap: int):
        C = self.ontology.n_cls
        self._rowkeys = np.empty(cap, np.int64)
        self._range = np.full(cap, np.inf, np.float32)
        self._hits = np.zeros(cap, np.int64)
        self._last = np.zeros(cap, np.int32)
        if self.strategy == "range_based":
            self._conf = np.full((cap, C), np.nan, np.float32)
            self._crange = np.full((cap, C), np.inf, np.float32)
            self._epoch = np.zeros((cap, C), np.int32)
        elif self.strategy == "bayesian":
            self._odds = np.zeros((cap, C), np.float64)
            self._cnt = np.zeros((cap, C), np.int64)
        elif self.strategy == "vote":
            self._votes = np.zeros((cap, C), np.int64)
        else:
            self._sum = np.zeros((cap, C), np.float64)
            self._cnt = np.zeros((cap, C), np.int64)

    def _grow_rows(self, need: int):
        cap = self._rowkeys.shape[0]
        if need <= cap:
            return
        new = cap
        while new < need:
            new *= 2
        C = self.ontology.n_cls
        n = self._n

        def bigger(a, fill, shape2=None):
            shape = (new,) if shape2 is None else (new, shape2)
            out = np.full(shape, fill, dtype=a.dtype) if fill is not None \
                else np.empty(shape, dtype=a.dtype)
            out[:n] = a[:n]
            return out

        self._rowkeys = bigger(self._rowkeys, None)
        self._range = bigger(self._range, np.inf)
        self._hits = bigger(self._hits, 0)
        self._last = bigger(self._last, 0)
        if self.strategy == "range_based":
            self._conf = bigger(self._conf, np.nan, C)
            self._crange = bigger(self._crange, np.inf, C)
            self._epoch = bigger(self._epoch, 0, C)
        elif self.strategy == "bayesian":
            self._odds = bigger(self._odds, 0.0, C)
            self._cnt = bigger(self._cnt, 0, C)
        elif self.strategy == "vote":
            self._votes = bigger(self._votes, 0, C)
        else:
            self._sum = bigger(self._sum, 0.0, C)
            self._cnt = bigger(self._cnt, 0, C)

    def _ensure_capacity(self, incoming: int):
        need = self._n + incoming
        self._grow_rows(need)
        if self.use_numba:
            # keep load factor under 1/2 even if every incoming key is new
            size = self._slots.shape[0]
            if 2 * need > size:
                while 2 * need > size:
                    size *= 2
                self._slots = np.full(size, -1, dtype=np.int64)
                K.nb_rebuild_slots(self._rowkeys, self._n, self._slots)

    def _fresh_sort_cache(self):
        if self._cache_n != self._n:
            order = np.argsort(self._rowkeys[:self._n], kind="stable")
            self._sorted_keys = self._rowkeys[:self._n][order]
            self._sorted_rows = order
            self._cache_n = self._n

    # -- binning ------------------------------------------------------------

    def world_to_key(self, p):
        """Floor-based bin of one world point."""
        p = np.asarray(p, dtype=np.float64)
        ijk = np.floor(p / self.resolution).astype(np.int64)
        return (int(ijk[0]), int(ijk[1]), int(ijk[2]))

    def key_to_center(self, key) -> np.ndarray:
        return (np.asarray(key, dtype=np.float64) + 0.5) * self.resolution

    def _bin_points(self, points) -> np.ndarray:
        ijk = np.floor(points / self.resolution).astype(np.int64)
        if ijk.size and np.abs(ijk).max() > K.MAX_INDEX:
            raise ConfigurationError(
                f"points exceed the indexable extent of +-{K.MAX_INDEX} cells")
        return K.pack_keys(ijk)

    # -- fusion -------------------------------------------------------------

    def fuse_cloud(self, cloud: SemanticCloud, strategy: Optional[str] = None) -> FusionStats:
        """Bin every point and fuse it under the map's strategy.

        The strategy argument, when given, must name the one this map was
        built with (a map runs exactly one strategy for its lifetime).
        """
        if strategy is not None and strategy != self.strategy:
            raise ConfigurationError(
                f"map is bound to {self.strategy!r}, cannot fuse with {strategy!r}")
        if cloud.n_classes != self.ontology.n_cls:
            raise ConfigurationError(
                f"cloud has {cloud.n_classes} classes, map ontology has {self.ontology.n_cls}")
        n_pts = len(cloud)
        with self._lock:
            self._frame += 1
            frame = self._frame
            if cloud.origin is not None:
                self._last_origin = cloud.origin.copy()
            if n_pts == 0:
                return FusionStats(0, 0, 0)
            rng = cloud.ranges
            if not np.all(np.isfinite(rng) & (rng > 0)):
                raise InvalidMeasurementError("every capture range must be positive and finite")
            keys = self._bin_points(cloud.points)
            self._ensure_capacity(n_pts)
            n_start = self._n
            if self.strategy == "range_based":
                if self.use_numba:
                    self._n, created, updated, replaced = K.nb_fuse_range(
                        keys, cloud.confidence, rng, self._slots, self._rowkeys,
                        self._conf, self._crange, self._range, self._hits,
                        self._last, self._epoch, self._n, np.int32(frame))
                else:
                    self._fresh_sort_cache()
                    rows, new_keys = K.np_assign_rows(
                        keys, self._sorted_keys, self._sorted_rows, self._n)
                    created = new_keys.shape[0]
                    self._rowkeys[self._n:self._n + created] = new_keys
                    self._n += created
                    updated, replaced = K.np_fuse_range(
                        rows, cloud.confidence, rng, self._conf, self._crange,
                        self._range, self._hits, self._last, n_start, frame)
            else:
                rows, created = self._assign(keys)
                updated, replaced = self._fuse_baseline(rows, cloud.confidence,
                                                        rng, n_start, frame)
            return FusionStats(created, updated, replaced)

    def _assign(self, keys):
        if self.use_numba:
            n0 = self._n
            rows, self._n = K.nb_assign_rows(keys, self._slots, self._rowkeys, self._n)
            return rows, self._n - n0
        self._fresh_sort_cache()
        rows, new_keys = K.np_assign_rows(keys, self._sorted_keys, self._sorted_rows, self._n)
        self._rowkeys[self._n:self._n + new_keys.shape[0]] = new_keys
        self._n += new_keys.shape[0]
        return rows, new_keys.shape[0]

    def _fuse_baseline(self, rows, conf, rng, n_start, frame):
        C = self.ontology.n_cls
        finite = ~np.isnan(conf)
        any_fin = finite.any(axis=1)
        replaced = 0
        if self.strategy == "vote":
            if any_fin.any():
                filled = np.where(finite, conf, -np.inf)
                best = filled.argmax(axis=1)
                flat = rows[any_fin] * C + best[any_fin]
                touched_slots = np.unique(flat)
                replaced = int(np.count_nonzero(self._votes.reshape(-1)[touched_slots] > 0))
                np.add.at(self._votes.reshape(-1), flat, 1)
        elif self.strategy == "bayesian":
            pi, ci = np.nonzero(finite)
            if pi.size:
                flat = rows[pi] * C + ci
                touched_slots = np.unique(flat)
                replaced = int(np.count_nonzero(self._cnt.reshape(-1)[touched_slots] > 0))
                np.add.at(self._odds.reshape(-1), flat, _logit(conf[pi, ci]))
                np.add.at(self._cnt.reshape(-1), flat, 1)
                trows = np.unique(rows[pi])
                self._odds[trows] = np.clip(self._odds[trows],
                                            -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP)
        else:  # average
            pi, ci = np.nonzero(finite)
            if pi.size:
                flat = rows[pi] * C + ci
                touched_slots = np.unique(flat)
                replaced = int(np.count_nonzero(self._cnt.reshape(-1)[touched_slots] > 0))
                np.add.at(self._sum.reshape(-1), flat, conf[pi, ci].astype(np.float64))
                np.add.at(self._cnt.reshape(-1), flat, 1)
        if any_fin.any():
            np.minimum.at(self._range, rows[any_fin], rng[any_fin])
        np.add.at(self._hits, rows, 1)
        touched = np.unique(rows)
        updated = int(np.count_nonzero(touched < n_start))
        self._last[touched] = frame
        return updated, replaced

    # -- water plane injection ---------------------------------------------

    def inject_water_plane(self, plane: Plane, footprint, sensor_origin=None,
                           max_tilt_deg: float = 5.0) -> int:
        """Mark the surface cell of each footprint column as water.

        Each (ix, iy) column gets water confidence 1.0 (other classes
        no-measurement) in the voxel containing the plane height at the
        column center, at a range measured from the most recent sensor
        origin. Fused under the map's strategy; for range_based the
        operation is idempotent at equal range. Hits grow only when the
        cell is newly created (injection is not a geometric return).
        Returns the number of cells created or semantically changed.
        """
        if plane.tilt_deg() > max_tilt_deg:
            raise ImplausibleSurfaceError(
                f"water plane tilts {plane.tilt_deg():.2f} deg, gate is {max_tilt_deg}")
        cols = np.asarray(sorted(set(map(tuple, footprint))), dtype=np.int64).reshape(-1, 2)
        if cols.shape[0] == 0:
            return 0
        with self._lock:
            origin = sensor_origin if sensor_origin is not None else self._last_origin
            if origin is None:
                raise ConfigurationError(
                    "no sensor origin known; fuse a cloud first or pass sensor_origin")
            origin = np.asarray(origin, dtype=np.float64).reshape(3)
            self._frame += 1
            frame = self._frame
            res = self.resolution
            cx = (cols[:, 0] + 0.5) * res
            cy = (cols[:, 1] + 0.5) * res
            cz = np.asarray(plane.height_at(cx, cy), dtype=np.float64)
            iz = np.floor(cz / res).astype(np.int64)
            ijk = np.stack([cols[:, 0], cols[:, 1], iz], axis=1)
            if np.abs(ijk).max() > K.MAX_INDEX:
                raise ConfigurationError("footprint exceeds the indexable extent")
            keys = K.pack_keys(ijk)
            d = np.stack([cx, cy, cz], axis=1) - origin
            rngs = np.sqrt(np.einsum("ij,ij->i", d, d)).astype(np.float32)
            if not np.all(rngs > 0):
                raise InvalidMeasurementError("sensor origin lies on the water surface")
            self._ensure_capacity(keys.shape[0])
            n_start = self._n
            rows, created = self._assign(keys)
            new = rows >= n_start
            w = self.ontology.index("water")
            if self.strategy == "range_based":
                accept = rngs < self._crange[rows, w]
                self._conf[rows[accept], w] = np.float32(1.0)
                self._crange[rows[accept], w] = rngs[accept]
                changed = int(np.count_nonzero(accept))
            elif self.strategy == "vote":
                self._votes[rows, w] += 1
                changed = rows.shape[0]
            elif self.strategy == "bayesian":
                self._odds[rows, w] += float(_logit(np.array([1.0]))[0])
                self._odds[rows] = np.clip(self._odds[rows],
                                           -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP)
                self._cnt[rows, w] += 1
                changed = rows.shape[0]
            else:
                self._sum[rows, w] += 1.0
                self._cnt[rows, w] += 1
                changed = rows.shape[0]
            np.minimum.at(self._range, rows, rngs)
            self._hits[rows[new]] += 1
            self._last[rows] = frame
            return changed

    # -- reads --------------------------------------------------------------

    def _derived_conf(self, rows) -> np.ndarray:
        if self.strategy == "range_based":
            return self._conf[rows].copy()
        if self.strategy == "bayesian":
            return _bayes_conf(self._odds[rows], self._cnt[rows])
        if self.strategy == "vote":
            votes = self._votes[rows]
            total = votes.sum(axis=1, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                return np.where(total > 0, votes / np.maximum(total, 1),
                                np.nan).astype(np.float32)
        cnt = self._cnt[rows]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(cnt > 0, self._sum[rows] / np.maximum(cnt, 1),
                            np.nan).astype(np.float32)

    def _row_of_key(self, packed: int):
        if self.use_numba:
            mask = self._slots.shape[0] - 1
            h = K.mix_py(int(packed)) & mask
            while True:
                s = int(self._slots[h])
                if s == -1:
                    return None
                if int(self._rowkeys[s]) == packed:
                    return s
                h = (h + 1) & mask
        self._fresh_sort_cache()
        rows = K.np_lookup_rows(np.array([packed], np.int64),
                                self._sorted_keys, self._sorted_rows)
        return None if rows[0] < 0 else int(rows[0])

    def _voxel_at_row(self, row: int, key) -> Voxel:
        conf = self._derived_conf(np.array([row]))[0]
        cr = self._crange[row].copy() if self.strategy == "range_based" else None
        return Voxel(tuple(key), conf, cr, float(self._range[row]),
                     int(self._hits[row]), int(self._last[row]))

    def query(self, key) -> Optional[Voxel]:
        packed = int(K.pack_keys(np.asarray(key, np.int64)[None, :])[0])
        with self._lock:
            row = self._row_of_key(packed)
            if row is None:
                return None
            return self._voxel_at_row(row, key)

    @property
    def n_voxels(self) -> int:
        return self._n

    @property
    def frame(self) -> int:
        return self._frame

    def snapshot(self) -> "MapSnapshot":
        """Immutable point-in-time copy, consistent between clouds."""
        with self._lock:
            n = self._n
            rows = np.arange(n)
            return MapSnapshot(
                resolution=self.resolution,
                ontology=self.ontology,
                strategy=self.strategy,
                frame=self._frame,
                keys=self._rowkeys[:n].copy(),
                confidence=self._derived_conf(rows),
                class_ranges=(self._crange[:n].copy()
                              if self.strategy == "range_based" else None),
                ranges=self._range[:n].copy(),
                hits=self._hits[:n].copy(),
                last_update=self._last[:n].copy(),
            )

    def argmax_rows(self, threshold: float = 0.5) -> np.ndarray:
        """Per-row thresholded argmax class (int16, -1 = none), row order."""
        with self._lock:
            return threshold_scores(self._derived_conf(np.arange(self._n)), threshold)


class MapSnapshot:
    """Frozen copy of a map's stored state. Arrays are read-only."""

    def __init__(self, resolution, ontology, strategy, frame, keys, confidence,
                 class_ranges, ranges, hits, last_update):
        self.resolution = resolution
        self.ontology = ontology
        self.strategy = strategy
        self.frame = frame
        self.keys = keys
        self.confidence = confidence
        self.class_ranges = class_ranges
        self.ranges = ranges
        self.hits = hits
        self.last_update = last_update
        for a in (keys, confidence, class_ranges, ranges, hits, last_update):
            if a is not None:
                a.setflags(write=False)
        self._index = None

    @property
    def n_voxels(self) -> int:
        return self.keys.shape[0]

    def keys_ijk(self) -> np.ndarray:
        return K.unpack_keys(self.keys)

    def argmax_classes(self, threshold: float = 0.5) -> np.ndarray:
        return threshold_scores(self.confidence, threshold)

    def query(self, key) -> Optional[Voxel]:
        if self._index is None:
            self._index = {int(k): i for i, k in enumerate(self.keys)}
        packed = int(K.pack_keys(np.asarray(key, np.int64)[None, :])[0])
        row = self._index.get(packed)
        if row is None:
            return None
        cr = self.class_ranges[row].copy() if self.class_ranges is not None else None
        return Voxel(tuple(key), self.confidence[row].copy(), cr,
                     float(self.ranges[row]), int(self.hits[row]),
                     int(self.last_update[row]))


# -- export ------------------------------------------------------------------

def _fmt(x) -> str:
    return f"{float(x):.9g}"


def write_dump_csv(snap: MapSnapshot, path) -> None:
    """Delimiter-separated dump: ix,iy,iz,per-class confidences,R,hits.

    Rows sorted by packed key so dumps diff cleanly across runs and paths.
    """
    order = np.argsort(snap.keys, kind="stable")
    ijk = snap.keys_ijk()[order]
    conf = snap.confidence[order]
    rng = snap.ranges[order]
    hits = snap.hits[order]
    cols = ["ix", "iy", "iz"] + [f"conf_{c}" for c in snap.ontology.classes] + ["range", "hits"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for i in range(ijk.shape[0]):
            row = [str(int(v)) for v in ijk[i]]
            row += [_fmt(v) for v in conf[i]]
            row += [_fmt(rng[i]), str(int(hits[i]))]
            f.write(",".join(row) + "\n")


def load_dump_csv(path, ontology: Ontology):
    """Read a dump back as (ijk, confidence, ranges, hits)."""
    with open(path) as f:
        header = f.readline().strip().split(",")
        expect = ["ix", "iy", "iz"] + [f"conf_{c}" for c in ontology.classes] + ["range", "hits"]
        if header != expect:
            raise ConfigurationError(f"dump header does not match ontology: {header[:5]}...")
        data = np.loadtxt(f, delimiter=",", ndmin=2, dtype=np.float64)
    if data.size == 0:
        data = data.reshape(0, len(expect))
    C = ontology.n_cls
    ijk = data[:, 0:3].astype(np.int64)
    conf = data[:, 3:3 + C].astype(np.float32)
    rng = data[:, 3 + C].astype(np.float32)
    hits = data[:, 4 + C].astype(np.int64)
    return ijk, conf, rng, hits


def write_ply(snap: MapSnapshot, path, threshold: float = 0.5) -> None:
    """ASCII PLY, one vertex per voxel center with class, confidence, range, hits."""
    order = np.argsort(snap.keys, kind="stable")
    ijk = snap.keys_ijk()[order]
    centers = (ijk + 0.5) * snap.resolution
    conf = snap.confidence[order]
    cls = threshold_scores(conf, threshold)
    best = np.where(cls >= 0, cls, 0)
    cmax = np.where(cls >= 0,
                    np.take_along_axis(np.nan_to_num(conf, nan=0.0),
                                       best[:, None].astype(np.int64), axis=1)[:, 0],
                    0.0)
    rng = np.where(np.isfinite(snap.ranges[order]), snap.ranges[order], 0.0)
    hits = snap.hits[order]
    n = ijk.shape[0]
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {n}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar class_index\nproperty float confidence\n")
        f.write("property float range\nproperty int hits\n")
        f.write("end_header\n")
        for i in range(n):
            ci = int(cls[i]) if cls[i] >= 0 else 255
            f.write(f"{_fmt(centers[i, 0])} {_fmt(centers[i, 1])} {_fmt(centers[i, 2])} "
                    f"{ci} {_fmt(cmax[i])} {_fmt(rng[i])} {int(hits[i])}\n")
