"""Accuracy metrics, classification maps and hidden-layer feature export."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import PatchSource, SampleSet, check_pair, enumerate_samples
from .errors import DimensionError, EmptySetError, LabelError, UsageError
from .model import Model, forward, predict_batched

# index 0 is unlabeled background; raw label v >= 1 uses entry 1 + (v - 1) % 16
PALETTE = np.array([
    (0, 0, 0),
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
], dtype=np.uint8)

MAP_MODES = ("full", "labeled-only", "ground-truth")


def _check_model_cube(model, cube):
    if cube.shape[-1] != model.config.n_bands:
        raise DimensionError(f"cube has {cube.shape[-1]} bands, model expects "
                             f"{model.config.n_bands}", expected=model.config.n_bands,
                             actual=cube.shape[-1])


def confusion_from_predictions(true, pred, n_classes: int) -> np.ndarray:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    flat = np.bincount(true * n_classes + pred, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes)


def confusion_matrix(model: Model, samples: SampleSet, cube) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    _check_model_cube(model, cube)
    source = PatchSource(np.asarray(cube))
    pred = predict_batched(model, source(samples.xs, samples.ys))
    return confusion_from_predictions(samples.classes, pred, model.config.n_classes)


def overall_accuracy(cm) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise UsageError("confusion matrix is empty")
    return float(np.trace(cm) / total)


def per_class_recall(cm) -> np.ndarray:
    cm = np.asarray(cm)
    rows = cm.sum(axis=1)
    if np.any(rows == 0):
        raise LabelError(f"class {int(np.flatnonzero(rows == 0)[0])} has no samples",
                         label=int(np.flatnonzero(rows == 0)[0]))
    return np.diag(cm) / rows


def average_accuracy(cm) -> float:
    return float(np.mean(per_class_recall(cm)))


@dataclass
class MetricsReport:
    oa: float
    aa: float
    per_class: np.ndarray
    counts: np.ndarray
    class_values: np.ndarray | None = None

    @classmethod
    def from_confusion(cls, cm, class_values=None) -> "MetricsReport":
        cm = np.asarray(cm)
        return cls(overall_accuracy(cm), average_accuracy(cm), per_class_recall(cm),
                   cm.sum(axis=1), None if class_values is None else np.asarray(class_values))

    def _names(self):
        if self.class_values is None:
            return [str(i) for i in range(len(self.per_class))]
        return [str(int(v)) for v in self.class_values]

    def format(self, dataset: str = "scene") -> str:
        """Plain-text table: overall/average accuracy, then per-class recall."""
        lines = [
            "CLASSIFICATION RESULTS",
            f"{'Dataset':<12}{'OA':>10}{'AA':>10}{'Samples':>10}",
            f"{dataset:<12}{self.oa:>10.4f}{self.aa:>10.4f}{int(self.counts.sum()):>10d}",
            "",
            f"{'Class':<12}{'Recall':>10}{'Samples':>10}",
        ]
        for name, r, n in zip(self._names(), self.per_class, self.counts):
            lines.append(f"{name:<12}{r:>10.4f}{int(n):>10d}")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "recall", "samples"])
            for name, r, n in zip(self._names(), self.per_class, self.counts):
                w.writerow([name, repr(float(r)), int(n)])
            w.writerow(["OA", repr(self.oa), int(self.counts.sum())])
            w.writerow(["AA", repr(self.aa), int(self.counts.sum())])


def _colorize(raw):
    idx = np.where(raw > 0, 1 + (raw - 1) % (len(PALETTE) - 1), 0)
    return PALETTE[idx]


def render_map(model: Model | None, cube, labels, mode: str = "full",
               batch_size: int = 1024) -> np.ndarray:
    """Palette-coded (height, width, 3) uint8 map in raw label space.

    ``full`` predicts every pixel, ``labeled-only`` only pixels with a
    nonzero label (others stay black), ``ground-truth`` draws ``labels``
    directly and ignores the model.
    """
    labels = np.asarray(labels)
    if mode not in MAP_MODES:
        raise UsageError(f"unknown map mode {mode!r}; choose from {MAP_MODES}")
    if mode == "ground-truth":
        if cube is not None:
            check_pair(np.asarray(cube), labels)
        return _colorize(labels)
    if model is None:
        raise UsageError(f"mode {mode!r} needs a model")
    cube = np.asarray(cube)
    check_pair(cube, labels)
    _check_model_cube(model, cube)
    class_values = enumerate_samples(labels).class_values
    if len(class_values) > model.config.n_classes:
        raise DimensionError("labels contain more classes than the model predicts",
                             expected=model.config.n_classes, actual=len(class_values))

    if mode == "full":
        ys, xs = np.mgrid[0:labels.shape[0], 0:labels.shape[1]]
        ys, xs = ys.ravel(), xs.ravel()
    else:
        ys, xs = np.nonzero(labels)
    source = PatchSource(cube)
    pred = np.concatenate([
        predict_batched(model, source(xs[i:i + batch_size], ys[i:i + batch_size]))
        for i in range(0, len(xs), batch_size)
    ]) if len(xs) else np.zeros(0, dtype=np.int64)
    # predictions beyond the classes present in this raster keep their index + 1
    lut = np.concatenate([class_values,
                          np.arange(len(class_values), model.config.n_classes) + 1])
    raw = np.zeros(labels.shape, dtype=np.int64)
    raw[ys, xs] = lut[pred]
    return _colorize(raw)


def save_ppm(image, path) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError("expected a (height, width, 3) image", actual=image.shape)
    height, width = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


@dataclass
class FeatureTable:
    indices: np.ndarray
    classes: np.ndarray
    features: np.ndarray
    layer: str

    def __len__(self):
        return len(self.indices)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "class"] + [f"{self.layer}_{j}" for j in range(self.features.shape[1])])
            for i, c, row in zip(self.indices, self.classes, self.features):
                w.writerow([int(i), int(c)] + [repr(float(v)) for v in row])


_FEATURE_LAYERS = {"fc1": "h1", "fc2": "h2"}


def export_features(model: Model, samples: SampleSet, cube, layer: str = "fc2",
                    indices=None, batch_size: int = 512) -> FeatureTable:
    """Post-ReLU activations of FC1 or FC2 for each sample.

    ``indices`` labels the rows (defaults to 0..n-1), e.g. positions in the
    full sample set when exporting a train or test subset.
    """
    if layer not in _FEATURE_LAYERS:
        raise UsageError(f"unknown feature layer {layer!r}; choose fc1 or fc2")
    if len(samples) == 0:
        raise EmptySetError("no samples to export")
    _check_model_cube(model, cube)
    source = PatchSource(np.asarray(cube))
    key = _FEATURE_LAYERS[layer]
    chunks = []
    for i in range(0, len(samples), batch_size):
        _, cache = forward(model, source(samples.xs[i:i + batch_size], samples.ys[i:i + batch_size]))
        chunks.append(cache[key])
    idx = np.arange(len(samples)) if indices is None else np.asarray(indices)
    return FeatureTable(idx, samples.classes.copy(), np.concatenate(chunks), layer)
