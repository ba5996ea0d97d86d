"""Class ontologies, sparse label masks, remapping, and segmentation metrics.

Everything here is a pure function over immutable inputs. Confusion
matrices merge associatively, so per-image accumulation can run in
parallel and reduce.

Label mask convention (in memory and on disk): 8-bit single-channel
raster, 255 = unlabeled, 0..N_cls-1 = class indices. Prediction arrays
use int16 with -1 = no prediction.
"""

import numpy as np
import yaml
from PIL import Image

from .errors import ConfigurationError, CorruptMaskError, InsufficientDataError

UNLABELED = 255
NO_PREDICTION = -1


class Ontology:
    """Ordered list of unique class names."""

    __slots__ = ("classes", "_index")

    def __init__(self, classes):
        classes = tuple(str(c) for c in classes)
        if len(classes) < 2:
            raise ConfigurationError("an ontology needs at least 2 classes")
        if len(set(classes)) != len(classes) or any(not c for c in classes):
            raise ConfigurationError("class names must be unique and non-empty")
        if len(classes) >= UNLABELED:
            raise ConfigurationError(f"at most {UNLABELED - 1} classes supported")
        self.classes = classes
        self._index = {c: i for i, c in enumerate(classes)}

    def __len__(self):
        return len(self.classes)

    @property
    def n_cls(self) -> int:
        return len(self.classes)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ConfigurationError(f"unknown class {name!r}") from None

    def __contains__(self, name):
        return name in self._index

    def __eq__(self, other):
        return isinstance(other, Ontology) and self.classes == other.classes

    def __hash__(self):
        return hash(self.classes)

    def __repr__(self):
        return f"Ontology({list(self.classes)})"


# the mapping ontology carried by the voxel map and simulator
ONTOLOGY_10 = Ontology([
    "ground", "trail", "grass", "dry_vegetation", "lush_vegetation",
    "trunk", "log", "obstacle_rock", "water", "sky",
])

# the 6-class evaluation ontology shared across datasets
ONTOLOGY_6 = Ontology(["ground", "grass", "vegetation", "obstacle", "water", "sky"])

BUILTIN_ONTOLOGIES = {"ours10": ONTOLOGY_10, "eval6": ONTOLOGY_6}

# names that count as vegetation / traversable ground when scoring the
# 10-class map against 6-class style claims
VEGETATION_CLASSES_10 = ("dry_vegetation", "lush_vegetation", "trunk")
GROUND_CLASSES_10 = ("ground", "trail")


class SparseLabelMask:
    """Per-pixel optional class indices; unlabeled is a first-class state."""

    __slots__ = ("labels", "ontology")

    def __init__(self, labels, ontology: Ontology):
        labels = np.asarray(labels, dtype=np.uint8)
        if labels.ndim != 2:
            raise ConfigurationError("mask labels must be a 2D array")
        bad = (labels != UNLABELED) & (labels >= ontology.n_cls)
        if bad.any():
            raise CorruptMaskError(
                f"mask holds {int(bad.sum())} pixels outside the {ontology.n_cls}-class ontology")
        self.labels = labels
        self.ontology = ontology

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def labeled_fraction(self) -> float:
        return float(np.count_nonzero(self.labels != UNLABELED)) / self.labels.size


def load_mask(path, ontology: Ontology) -> SparseLabelMask:
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    return SparseLabelMask(np.asarray(img, dtype=np.uint8), ontology)


def save_mask(mask: SparseLabelMask, path) -> None:
    Image.fromarray(mask.labels, mode="L").save(path, format="PNG")


class RemapTable:
    """Total surjective-onto-used mapping from one ontology onto another."""

    __slots__ = ("source", "target", "mapping")

    def __init__(self, source: Ontology, target: Ontology, mapping):
        mapping = np.asarray(mapping, dtype=np.int64)
        if mapping.shape != (source.n_cls,):
            raise ConfigurationError(
                f"mapping must cover all {source.n_cls} source classes")
        if mapping.min() < 0 or mapping.max() >= target.n_cls:
            raise ConfigurationError("mapping points outside the target ontology")
        self.source = source
        self.target = target
        self.mapping = mapping

    @classmethod
    def from_groups(cls, source: Ontology, target: Ontology, groups: dict) -> "RemapTable":
        """groups: target class name -> list of source class names."""
        mapping = np.full(source.n_cls, -1, dtype=np.int64)
        for tgt_name, src_names in groups.items():
            t = target.index(tgt_name)
            for s in src_names:
                i = source.index(s)
                if mapping[i] != -1:
                    raise ConfigurationError(f"source class {s!r} mapped twice")
                mapping[i] = t
        if (mapping == -1).any():
            missing = [source.classes[i] for i in np.flatnonzero(mapping == -1)]
            raise ConfigurationError(f"source classes never mapped: {missing}")
        return cls(source, target, mapping)


def load_remap_table(path) -> RemapTable:
    """YAML layout: source_classes, target_classes, map: {target: [sources]}."""
    with open(path) as f:
        doc = yaml.safe_load(f)
    try:
        source = Ontology(doc["source_classes"])
        target = Ontology(doc["target_classes"])
        groups = doc["map"]
    except (KeyError, TypeError) as e:
        raise ConfigurationError(f"remap table {path} missing field: {e}") from e
    return RemapTable.from_groups(source, target, groups)


def remap_mask(mask: SparseLabelMask, table: RemapTable) -> SparseLabelMask:
    """Replace each labeled pixel's class by its target class.

    Unlabeled pixels stay unlabeled; dimensions unchanged; the labeled
    pixel set is preserved exactly.
    """
    if mask.ontology != table.source:
        raise CorruptMaskError("mask ontology does not match the table's source")
    lut = np.full(256, UNLABELED, dtype=np.uint8)
    lut[:table.source.n_cls] = table.mapping.astype(np.uint8)
    return SparseLabelMask(lut[mask.labels], table.target)


def threshold_scores(scores, threshold: float):
    """Argmax-with-threshold over the trailing class axis.

    scores: (..., C) float array, NaN = no measurement. Returns int16
    (...,) with the argmax class where its score >= threshold, else
    NO_PREDICTION. Ties break to the lowest class index; all-NaN rows
    never predict.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ConfigurationError("threshold must lie in [0, 1]")
    s = np.asarray(scores, dtype=np.float32)
    filled = np.where(np.isnan(s), -np.inf, s)
    best = filled.argmax(axis=-1)  # first max wins: lowest-index tie-break
    best_score = np.take_along_axis(filled, best[..., None], axis=-1)[..., 0]
    return np.where(best_score >= threshold, best, NO_PREDICTION).astype(np.int16)


def threshold_prediction(conf_image, threshold: float = 0.5):
    """Per-pixel class decision from an (H, W, C) confidence image."""
    conf_image = np.asarray(conf_image)
    if conf_image.ndim != 3:
        raise ConfigurationError("conf_image must be (height, width, n_classes)")
    return threshold_scores(conf_image, threshold)


class ConfusionMatrix:
    """counts[gt, pred] over evaluated pixels; rows are ground truth.

    ignored counts GT-labeled pixels that had no prediction, so
    counts.sum() + ignored equals the number of GT-labeled pixels
    evaluated. GT-unlabeled pixels are skipped entirely.
    """

    __slots__ = ("counts", "ignored")

    def __init__(self, n_cls: int):
        self.counts = np.zeros((n_cls, n_cls), dtype=np.int64)
        self.ignored = 0

    @property
    def n_cls(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_cls != self.n_cls:
            raise ConfigurationError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.n_cls)
        out.counts = self.counts + other.counts
        out.ignored = self.ignored + other.ignored
        return out

    def __add__(self, other):
        return self.merge(other)


def accumulate_confusion(gt: SparseLabelMask, pred, cm: ConfusionMatrix = None) -> ConfusionMatrix:
    """Tally gt-vs-pred over one image into a (new or given) matrix."""
    pred = np.asarray(pred, dtype=np.int16)
    if pred.shape != gt.labels.shape:
        raise ConfigurationError(
            f"prediction shape {pred.shape} does not match mask {gt.labels.shape}")
    n = gt.ontology.n_cls
    if cm is None:
        cm = ConfusionMatrix(n)
    elif cm.n_cls != n:
        raise ConfigurationError("confusion matrix size does not match the ontology")
    labeled = gt.labels != UNLABELED
    valid = labeled & (pred >= 0)
    g = gt.labels[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    cm.counts += np.bincount(n * g + p, minlength=n * n).reshape(n, n)
    cm.ignored += int(labeled.sum()) - int(valid.sum())
    return cm


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class IoU scaled to [0, 100]; NaN where the union is zero."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, 100.0 * tp / union, np.nan)
    return iou


def miou(cm: ConfusionMatrix):
    """Mean IoU over classes with nonzero union; None when nothing scored."""
    iou = iou_per_class(cm)
    present = ~np.isnan(iou)
    if not present.any():
        return None
    return float(iou[present].mean())


class DatasetStats:
    """Aggregate labeling statistics over a set of masks."""

    __slots__ = ("n_images", "total_px", "labeled_px", "class_px", "ontology")

    def __init__(self, n_images, total_px, labeled_px, class_px, ontology):
        self.n_images = n_images
        self.total_px = total_px
        self.labeled_px = labeled_px
        self.class_px = class_px
        self.ontology = ontology

    @property
    def labeled_pct(self) -> float:
        return 100.0 * self.labeled_px / self.total_px if self.total_px else 0.0

    @property
    def class_share_pct(self) -> np.ndarray:
        """Share of labeled pixels per class, percent; sums to 100 when any."""
        if self.labeled_px == 0:
            return np.zeros(len(self.ontology.classes))
        return 100.0 * self.class_px / self.labeled_px


def dataset_stats(masks) -> DatasetStats:
    masks = list(masks)
    if not masks:
        raise InsufficientDataError("no masks given")
    ont = masks[0].ontology
    n = ont.n_cls
    class_px = np.zeros(n, dtype=np.int64)
    total = 0
    for m in masks:
        if m.ontology != ont:
            raise ConfigurationError("masks mix ontologies")
        total += m.labels.size
        lab = m.labels[m.labels != UNLABELED]
        class_px += np.bincount(lab.astype(np.int64), minlength=n)
    return DatasetStats(len(masks), total, int(class_px.sum()), class_px, ont)


def class_weights(share_pct, floor: float = 0.1) -> np.ndarray:
    """Floored inverse-frequency weights, normalized to mean 1.

    Rarer classes get strictly larger weights; a zero-share class is
    weighted at the floor and stays finite.
    """
    if floor <= 0:
        raise ConfigurationError("floor must be positive")
    share = np.asarray(share_pct, dtype=np.float64)
    w = 1.0 / np.maximum(share, floor)
    return w / w.mean()
