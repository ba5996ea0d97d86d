"""Scoring fused maps against analytically known scene truth.

Truth here is hindsight: after a run, every voxel the pipeline ever
observed is classified straight from the scene description (which
surface actually passes through that cell), so map quality reduces to a
label-against-label comparison using the same confusion machinery the
image metrics use. Cells the sensors touched but that hold no surface
(mid-air returns clipped into empty space) are marked free and stay out
of every score.

The behavioral metrics all read the per-frame observation record the
scenario runner keeps: popup latency (how many fused frames between a
hazard first being seen correctly up close and the map agreeing),
reverse stability (label flips while every fresh look at a cell is from
farther away than what the map already holds), and bleed correction
(far-range mislabels fixed by later closer looks).
"""

import numpy as np

from . import _kernels as K
from .errors import ConfigurationError
from .semantics import (
    ConfusionMatrix,
    Ontology,
    SparseLabelMask,
    accumulate_confusion,
    iou_per_class,
    miou,
)
from .simulator import Scene, ScenarioTimeline, points_in_polygon

__all__ = [
    "FREE_CELL",
    "HindsightMap",
    "VoxelIoU",
    "FusionReport",
    "build_hindsight_map",
    "map_iou",
    "popup_hazard_keys",
    "popup_latency",
    "reverse_stability",
    "bleed_correction_rate",
    "evaluate_timeline",
]

FREE_CELL = -1

# slack when deciding whether a fresh observation is really farther than
# the stored capture range; matches the fusion rule's float32 regime
_RANGE_EPS = 1e-6


class HindsightMap:
    """True class per observed voxel, derived from the scene geometry."""

    __slots__ = ("resolution", "ontology", "keys", "classes")

    def __init__(self, resolution: float, ontology: Ontology, keys, classes):
        self.resolution = float(resolution)
        self.ontology = ontology
        self.keys = np.asarray(keys, np.int64)
        self.classes = np.asarray(classes, np.int16)
        if self.keys.shape != self.classes.shape:
            raise ConfigurationError("keys and classes must align")

    @property
    def n_cells(self) -> int:
        return self.keys.shape[0]

    @property
    def n_free(self) -> int:
        return int((self.classes == FREE_CELL).sum())

    def surface_keys(self, cls=None) -> np.ndarray:
        """Keys holding a surface; optionally only those of one class."""
        if cls is None:
            return self.keys[self.classes != FREE_CELL]
        return self.keys[self.classes == int(cls)]

    def class_of(self, keys) -> np.ndarray:
        """Vectorized lookup; unknown keys come back as free."""
        keys = np.asarray(keys, np.int64)
        idx = np.searchsorted(self.keys, keys)
        idx = np.clip(idx, 0, max(self.n_cells - 1, 0))
        out = np.full(keys.shape, FREE_CELL, np.int16)
        if self.n_cells:
            hit = self.keys[idx] == keys
            out[hit] = self.classes[idx[hit]]
        return out


def build_hindsight_map(scene: Scene, observed_keys, resolution: float) -> HindsightMap:
    """Classify every observed voxel directly from the scene description.

    A cell belongs to the first surface whose extent touches it, testing
    water sheets, then scene objects in declaration order, then the
    ground plane. Cell bounds are closed on both faces so returns that
    land exactly on a face agree with the binning of the points that
    produced them. Cells touching nothing are free.
    """
    keys = np.unique(np.asarray(observed_keys, np.int64))
    res = float(resolution)
    if res <= 0:
        raise ConfigurationError("resolution must be positive")
    ijk = K.unpack_keys(keys)
    lo = ijk * res
    hi = (ijk + 1) * res
    cx = (ijk[:, 0] + 0.5) * res
    cy = (ijk[:, 1] + 0.5) * res
    cls = np.full(keys.shape[0], FREE_CELL, np.int16)
    undecided = np.ones(keys.shape[0], dtype=bool)

    for region in scene.water:
        h = region.surface_height
        m = undecided & (lo[:, 2] <= h) & (h <= hi[:, 2])
        if m.any():
            m[m] = points_in_polygon(cx[m], cy[m], region.polygon)
            cls[m] = region.cls
            undecided &= ~m
    for obj in scene.objects:
        m = undecided.copy()
        for d in range(3):
            m &= (lo[:, d] <= obj.hi[d]) & (hi[:, d] >= obj.lo[d])
        cls[m] = obj.cls
        undecided &= ~m
    gh = scene.ground.height
    m = undecided & (lo[:, 2] <= gh) & (gh <= hi[:, 2])
    if m.any():
        cls[m] = scene.ground.class_at(cx[m], cy[m])
    return HindsightMap(res, scene.ontology, keys, cls)


class VoxelIoU:
    """Per-class and mean IoU of a map snapshot against hindsight truth."""

    __slots__ = ("cm", "per_class", "mean", "n_scored")

    def __init__(self, cm: ConfusionMatrix):
        self.cm = cm
        self.per_class = iou_per_class(cm)
        self.mean = miou(cm)
        self.n_scored = int(cm.counts.sum()) + cm.ignored

    def class_iou(self, cls: int) -> float:
        return float(self.per_class[int(cls)])


def map_iou(snapshot, gt: HindsightMap, threshold: float = 0.5) -> VoxelIoU:
    """Score a map snapshot cell-by-cell against the hindsight truth.

    Only keys present in both are compared; free cells never score. Map
    cells whose winning confidence misses the threshold count as
    ignored, exactly like unpredicted pixels in the image metrics.
    """
    if snapshot.resolution != gt.resolution:
        raise ConfigurationError(
            f"map resolution {snapshot.resolution} does not match "
            f"truth resolution {gt.resolution}")
    if snapshot.ontology != gt.ontology:
        raise ConfigurationError("map and truth use different ontologies")
    _, ia, ib = np.intersect1d(snapshot.keys, gt.keys, assume_unique=True,
                               return_indices=True)
    g = gt.classes[ib]
    keep = g != FREE_CELL
    pred = snapshot.argmax_classes(threshold)[ia][keep].astype(np.int16)
    labels = g[keep].astype(np.uint8).reshape(1, -1)
    mask = SparseLabelMask(labels, gt.ontology)
    cm = accumulate_confusion(mask, pred.reshape(1, -1))
    return VoxelIoU(cm)


def _row_index(timeline: ScenarioTimeline):
    order = np.argsort(timeline.rowkeys, kind="stable")
    return order, timeline.rowkeys[order]


def _frame_rows(frame, order, sorted_keys, labeled):
    return order[np.searchsorted(sorted_keys, frame.keys[labeled])]


def popup_hazard_keys(timeline: ScenarioTimeline, hazard_class: int):
    """Find the reveal moment of an occluded hazard.

    Returns (frame index, keys): the first frame holding an observation
    that is truly the hazard, labeled as the hazard, and captured closer
    than anything the map stored for that cell, plus the voxel keys of
    those observations. (None, empty) when the run never gets one.
    """
    hz = int(hazard_class)
    order, skeys = _row_index(timeline)
    stored = np.full(skeys.shape[0], np.inf)
    for f in timeline.frames:
        labeled = f.obs_class >= 0
        rows = _frame_rows(f, order, skeys, labeled)
        rng = f.obs_range[labeled].astype(np.float64)
        correct = ((f.true_class[labeled] == hz) & (f.obs_class[labeled] == hz)
                   & (rng < stored[rows]))
        if correct.any():
            return f.idx, np.unique(f.keys[labeled][correct])
        np.minimum.at(stored, rows, rng)
    return None, np.zeros(0, np.int64)


def popup_latency(timeline: ScenarioTimeline, hazard_keys, hazard_class: int,
                  threshold: float = 0.9):
    """Fused frames between the hazard's reveal and the map agreeing.

    The reveal is the first frame where any of hazard_keys gets a
    correct hazard observation closer than its stored range; the map
    agrees once at least `threshold` of the keys hold the hazard as
    their winning class. Returns None when the reveal never happens and
    inf when it does but the map never catches up.
    """
    hz = int(hazard_class)
    hazard_keys = np.unique(np.asarray(hazard_keys, np.int64))
    if hazard_keys.size == 0:
        raise ConfigurationError("hazard_keys must be non-empty")
    order, skeys = _row_index(timeline)
    pos = np.searchsorted(skeys, hazard_keys)
    if pos.max(initial=-1) >= skeys.shape[0] or \
            not (skeys[np.clip(pos, 0, skeys.shape[0] - 1)] == hazard_keys).all():
        raise ConfigurationError("hazard_keys include cells the run never observed")
    hazard_rows = order[pos]

    stored = np.full(skeys.shape[0], np.inf)
    f0 = None
    for f in timeline.frames:
        labeled = f.obs_class >= 0
        rows = _frame_rows(f, order, skeys, labeled)
        rng = f.obs_range[labeled].astype(np.float64)
        tracked = np.isin(f.keys[labeled], hazard_keys)
        correct = (tracked & (f.true_class[labeled] == hz)
                   & (f.obs_class[labeled] == hz) & (rng < stored[rows]))
        if correct.any():
            f0 = f.idx
            break
        np.minimum.at(stored, rows, rng)
    if f0 is None:
        return None

    need = threshold * hazard_rows.shape[0]
    for f in timeline.frames[f0:]:
        am = f.map_argmax
        inside = hazard_rows < am.shape[0]
        good = int((am[hazard_rows[inside]] == hz).sum())
        if good >= need:
            return f.idx - f0
    return float("inf")


def reverse_stability(timeline: ScenarioTimeline, protected_keys) -> int:
    """Count label flips that no closer observation can excuse.

    From the first reverse-tagged frame on, a protected voxel whose
    winning class changes counts as a violation when every labeled
    observation of it in that frame sits strictly farther than the
    closest one already stored (or when the frame holds none at all).
    """
    tags = [f.tag for f in timeline.frames]
    if "reverse" not in tags:
        raise ConfigurationError("trajectory has no reverse-tagged leg")
    rev0 = tags.index("reverse")
    protected_keys = np.unique(np.asarray(protected_keys, np.int64))
    if protected_keys.size == 0:
        return 0
    order, skeys = _row_index(timeline)
    n_rows = skeys.shape[0]
    protected = np.zeros(n_rows, dtype=bool)
    pos = np.searchsorted(skeys, protected_keys)
    ok = pos < n_rows
    ok[ok] = skeys[pos[ok]] == protected_keys[ok]
    protected[order[pos[ok]]] = True

    stored = np.full(n_rows, np.inf)
    prev = None
    violations = 0
    for i, f in enumerate(timeline.frames):
        labeled = f.obs_class >= 0
        rows = _frame_rows(f, order, skeys, labeled)
        closest = np.full(n_rows, np.inf)
        np.minimum.at(closest, rows, f.obs_range[labeled].astype(np.float64))
        if prev is not None and i >= rev0:
            n = prev.shape[0]
            changed = np.flatnonzero(protected[:n] & (f.map_argmax[:n] != prev))
            violations += int((closest[changed] > stored[changed] + _RANGE_EPS).sum())
        stored = np.minimum(stored, closest)
        prev = f.map_argmax
    return violations


def bleed_correction_rate(timeline: ScenarioTimeline, gt: HindsightMap):
    """Fraction of initially mislabeled cells the run later fixed.

    A cell is initially wrong when its first winning class disagrees
    with the hindsight truth; it counts as corrected when the final map
    agrees. None when nothing ever started out wrong.
    """
    n_rows = timeline.rowkeys.shape[0]
    first = np.full(n_rows, -2, np.int16)
    for f in timeline.frames:
        am = f.map_argmax
        fresh = np.flatnonzero((first[:am.shape[0]] == -2) & (am >= 0))
        first[fresh] = am[fresh]
    final = timeline.frames[-1].map_argmax
    truth = gt.class_of(timeline.rowkeys)
    scored = (truth != FREE_CELL) & (first >= 0)
    wrong = scored & (first != truth)
    if not wrong.any():
        return None
    corrected = wrong & (final[:n_rows] == truth)
    return float(corrected.sum()) / float(wrong.sum())


class FusionReport:
    """One scenario-strategy evaluation, printable and machine-readable."""

    __slots__ = ("scenario", "strategy", "seed", "ontology", "n_frames",
                 "n_voxels", "iou", "popup_latency_frames",
                 "reverse_violations", "bleed_correction")

    def __init__(self, scenario, strategy, seed, ontology: Ontology,
                 n_frames, n_voxels, iou: VoxelIoU,
                 popup_latency_frames=None, reverse_violations=None,
                 bleed_correction=None):
        if ontology.n_cls != iou.cm.n_cls:
            raise ConfigurationError("IoU table does not match the ontology")
        if popup_latency_frames is not None and popup_latency_frames < 0:
            raise ConfigurationError("popup latency cannot be negative")
        if reverse_violations is not None and reverse_violations < 0:
            raise ConfigurationError("violation count cannot be negative")
        if bleed_correction is not None and not 0.0 <= bleed_correction <= 1.0:
            raise ConfigurationError("correction rate must lie in [0, 1]")
        self.scenario = scenario
        self.strategy = strategy
        self.seed = seed
        self.ontology = ontology
        self.n_frames = n_frames
        self.n_voxels = n_voxels
        self.iou = iou
        self.popup_latency_frames = popup_latency_frames
        self.reverse_violations = reverse_violations
        self.bleed_correction = bleed_correction

    @staticmethod
    def _fmt(v):
        if v is None:
            return "n/a"
        if isinstance(v, float):
            return "inf" if np.isinf(v) else f"{v:.4f}"
        return str(v)

    def to_text(self) -> str:
        lines = [
            f"fusion report: {self.scenario} / {self.strategy} (seed {self.seed})",
            f"frames: {self.n_frames}   map voxels: {self.n_voxels}   "
            f"scored cells: {self.iou.n_scored}",
            f"mean voxel IoU: {self._fmt(self.iou.mean)}",
        ]
        for i, name in enumerate(self.ontology.classes):
            v = self.iou.per_class[i]
            lines.append(
                f"  {name:<18} {self._fmt(None if np.isnan(v) else float(v))}")
        lines.append(f"popup latency (frames): {self._fmt(self.popup_latency_frames)}")
        lines.append(f"reverse violations: {self._fmt(self.reverse_violations)}")
        lines.append(f"bleed correction rate: {self._fmt(self.bleed_correction)}")
        return "\n".join(lines) + "\n"

    def header(self) -> str:
        cols = ["scenario", "strategy", "seed", "frames", "voxels", "scored",
                "miou"]
        cols += [f"iou_{name}" for name in self.ontology.classes]
        cols += ["popup_latency", "reverse_violations", "bleed_correction"]
        return ",".join(cols)

    def to_row(self) -> str:
        vals = [self.scenario, self.strategy, str(self.seed),
                str(self.n_frames), str(self.n_voxels),
                str(self.iou.n_scored), self._csv(self.iou.mean)]
        for v in self.iou.per_class:
            vals.append(self._csv(None if np.isnan(v) else float(v)))
        vals += [self._csv(self.popup_latency_frames),
                 self._csv(self.reverse_violations),
                 self._csv(self.bleed_correction)]
        return ",".join(vals)

    @staticmethod
    def _csv(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return "inf" if np.isinf(v) else f"{v:.4f}"
        return str(v)


def evaluate_timeline(timeline: ScenarioTimeline, scene: Scene,
                      hazard_class=None, latency_threshold: float = 0.9,
                      iou_threshold: float = 0.5) -> FusionReport:
    """Full report for one finished run against its scene.

    hazard_class picks which class drives the popup and reverse metrics;
    when omitted, the first box object's class is used if the scene has
    one. Metrics whose precondition the run does not meet (no hazard, no
    reverse leg) come back as n/a rather than failing.
    """
    if timeline.ontology != scene.ontology:
        raise ConfigurationError("timeline and scene use different ontologies")
    gt = build_hindsight_map(scene, timeline.observed_keys(), timeline.resolution)
    iou = map_iou(timeline.final_snapshot, gt, threshold=iou_threshold)

    if hazard_class is None:
        boxes = [o for o in scene.objects if o.kind == "box"]
        hazard_class = boxes[0].cls if boxes else None

    latency = None
    violations = None
    if hazard_class is not None:
        _, keys = popup_hazard_keys(timeline, hazard_class)
        if keys.size:
            latency = popup_latency(timeline, keys, hazard_class,
                                    threshold=latency_threshold)
        if any(f.tag == "reverse" for f in timeline.frames):
            protected = gt.surface_keys(hazard_class)
            violations = reverse_stability(timeline, protected)

    return FusionReport(
        scenario=timeline.scene_name, strategy=timeline.strategy,
        seed=timeline.seed, ontology=scene.ontology,
        n_frames=timeline.n_frames, n_voxels=timeline.rowkeys.shape[0],
        iou=iou, popup_latency_frames=latency,
        reverse_violations=violations,
        bleed_correction=bleed_correction_rate(timeline, gt))
