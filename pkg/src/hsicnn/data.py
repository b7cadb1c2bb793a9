"""Hyperspectral cubes and label rasters: file I/O, normalization, patches, splits.

In memory a cube is a float ``(height, width, bands)`` array and a label
raster an integer ``(height, width)`` array, so pixel ``(x, y)`` lives at
``cube[y, x]``.  Raw label 0 marks unlabeled background.
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DimensionError, EmptySetError, FormatError, LabelError

CUBE_MAGIC = b"HSIC"
CUBE_VERSION = 1
_DTYPE_F32 = 0
_CUBE_HEADER = struct.Struct("<4sIIIII")  # magic, version, width, height, bands, dtype code
STD_EPS = 1e-12


# ---------------------------------------------------------------------------
# cube / label files
# ---------------------------------------------------------------------------

def save_cube(cube, path) -> None:
    """Write a cube as ``HSIC`` header + band-sequential little-endian float32."""
    cube = np.asarray(cube)
    if cube.ndim != 3 or 0 in cube.shape:
        raise DimensionError("cube must be a non-empty (height, width, bands) array",
                             actual=cube.shape)
    if not np.all(np.isfinite(cube)):
        raise ValueError("cube contains non-finite values")
    height, width, bands = cube.shape
    payload = np.ascontiguousarray(cube.transpose(2, 0, 1), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_CUBE_HEADER.pack(CUBE_MAGIC, CUBE_VERSION, width, height, bands, _DTYPE_F32))
        fh.write(payload.tobytes())


def load_cube(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _CUBE_HEADER.size:
        raise FormatError(f"{path}: shorter than the cube header",
                          expected_bytes=_CUBE_HEADER.size, actual_bytes=len(data))
    magic, version, width, height, bands, dtype = _CUBE_HEADER.unpack_from(data)
    if magic != CUBE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CUBE_MAGIC!r}")
    if version != CUBE_VERSION:
        raise FormatError(f"{path}: unsupported cube version {version}")
    if dtype != _DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if width == 0 or height == 0 or bands == 0:
        raise FormatError(f"{path}: header declares an empty cube "
                          f"(width={width}, height={height}, bands={bands})")
    expected = width * height * bands * 4
    actual = len(data) - _CUBE_HEADER.size
    if actual != expected:
        raise FormatError(f"{path}: payload is {actual} bytes, header implies {expected}",
                          expected_bytes=expected, actual_bytes=actual)
    values = np.frombuffer(data, dtype="<f4", offset=_CUBE_HEADER.size)
    cube = values.reshape(bands, height, width).transpose(1, 2, 0).astype(np.float32)
    if not np.all(np.isfinite(cube)):
        raise FormatError(f"{path}: cube contains non-finite values")
    return cube


def save_labels(labels, path) -> None:
    """Write a label raster as an 8-bit binary PGM (P5)."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DimensionError("labels must be a 2-D array", actual=labels.shape)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise LabelError("label values must lie in [0, 255] for an 8-bit PGM")
    height, width = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(labels.astype(np.uint8).tobytes())


def load_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: bad magic {tokens[0]!r}, expected b'P5'")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: empty raster {width}x{height}")
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: only 8-bit PGM rasters are supported (maxval {maxval})")
    expected = width * height
    actual = len(data) - pos
    if actual != expected:
        raise FormatError(f"{path}: raster is {actual} bytes, header implies {expected}",
                          expected_bytes=expected, actual_bytes=actual)
    return np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(height, width).astype(np.int32)


def check_pair(cube, labels) -> None:
    if cube.shape[:2] != labels.shape:
        raise DimensionError(
            f"cube is {cube.shape[1]}x{cube.shape[0]} pixels but labels are "
            f"{labels.shape[1]}x{labels.shape[0]}", expected=cube.shape[:2], actual=labels.shape)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

class BandStats(NamedTuple):
    mean: np.ndarray
    std: np.ndarray


def normalize_cube(cube):
    """Per-band z-score over the whole scene (population std).

    Bands whose std is below 1e-12 map to zero.  Statistics are accumulated
    in float64; the result is float32.
    """
    values = np.asarray(cube, dtype=np.float64)
    flat = values.reshape(-1, values.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    safe = np.where(std < STD_EPS, 1.0, std)
    out = np.where(std < STD_EPS, 0.0, (values - mean) / safe)
    return out.astype(np.float32), BandStats(mean, std)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def _neighbors(center, size):
    idx = np.array([center - 1, center, center + 1])
    if size == 1:
        return np.zeros(3, dtype=int)
    idx[idx < 0] = 1
    idx[idx >= size] = size - 2
    return idx


def extract_patch(cube, x: int, y: int) -> np.ndarray:
    """3x3xB window centred on pixel (x, y), mirror-padded at scene borders.

    ``patch[1 + dy, 1 + dx]`` is the spectrum at ``(x + dx, y + dy)``.
    """
    height, width = cube.shape[:2]
    if not (0 <= x < width and 0 <= y < height):
        raise IndexError(f"pixel ({x}, {y}) outside {width}x{height} scene")
    rows = _neighbors(y, height)
    cols = _neighbors(x, width)
    return cube[rows[:, None], cols[None, :]]


class PatchSource:
    """Batched patch extraction from a cube padded once up front."""

    def __init__(self, cube):
        cube = np.asarray(cube)
        pad = [("reflect" if n > 1 else "edge") for n in cube.shape[:2]]
        padded = np.pad(cube, ((1, 1), (0, 0), (0, 0)), mode=pad[0])
        self.padded = np.pad(padded, ((0, 0), (1, 1), (0, 0)), mode=pad[1])
        self.height, self.width, self.bands = cube.shape

    def __call__(self, xs, ys) -> np.ndarray:
        xs = np.asarray(xs)
        ys = np.asarray(ys)
        off = np.arange(3)
        rows = ys[:, None, None] + off[None, :, None]
        cols = xs[:, None, None] + off[None, None, :]
        return self.padded[rows, cols]


# ---------------------------------------------------------------------------
# labeled samples and splits
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    """Labeled pixels in scan order with 0-based class indices.

    ``class_values[c]`` is the raw raster label of class index ``c``.
    """

    xs: np.ndarray
    ys: np.ndarray
    classes: np.ndarray
    class_values: np.ndarray

    def __len__(self):
        return len(self.classes)

    @property
    def n_classes(self) -> int:
        return len(self.class_values)

    def subset(self, indices) -> "SampleSet":
        indices = np.asarray(indices, dtype=np.int64)
        return SampleSet(self.xs[indices], self.ys[indices], self.classes[indices],
                         self.class_values)


def enumerate_samples(labels) -> SampleSet:
    labels = np.asarray(labels)
    ys, xs = np.nonzero(labels)
    if len(xs) == 0:
        raise EmptySetError("label raster has no labeled (nonzero) pixels")
    raw = labels[ys, xs]
    class_values = np.unique(raw)
    classes = np.searchsorted(class_values, raw)
    return SampleSet(xs.astype(np.int64), ys.astype(np.int64), classes.astype(np.int64),
                     class_values.astype(np.int64))


@dataclass
class SplitIndices:
    train: np.ndarray
    test: np.ndarray
    seed: int
    ratio: float


def train_count(n: int, ratio: float) -> int:
    # tiny slack keeps e.g. 0.7 * 10 from flooring to 6
    return int(min(max(np.floor(ratio * n + 1e-9), 1), n - 1))


def stratified_split(samples: SampleSet, ratio: float = 0.8, seed: int = 0) -> SplitIndices:
    """Per-class random split; each class keeps at least one sample on each side."""
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(samples.n_classes):
        idx = np.flatnonzero(samples.classes == c)
        if len(idx) < 2:
            raw = int(samples.class_values[c])
            raise LabelError(f"class {raw} has {len(idx)} sample(s); at least 2 are needed",
                             label=raw)
        perm = rng.permutation(idx)
        k = train_count(len(idx), ratio)
        train.append(perm[:k])
        test.append(perm[k:])
    return SplitIndices(np.sort(np.concatenate(train)), np.sort(np.concatenate(test)),
                        seed, ratio)


def save_split(split: SplitIndices, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"seed {split.seed}\nratio {split.ratio!r}\n")
        fh.write("train " + " ".join(map(str, split.train.tolist())) + "\n")
        fh.write("test " + " ".join(map(str, split.test.tolist())) + "\n")


def load_split(path) -> SplitIndices:
    fields = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, rest = line.partition(" ")
            fields[key] = rest
    try:
        return SplitIndices(
            train=np.array(fields["train"].split(), dtype=np.int64),
            test=np.array(fields["test"].split(), dtype=np.int64),
            seed=int(fields["seed"]),
            ratio=float(fields["ratio"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed split manifest ({exc})") from None


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def synth_generate(n_classes: int, bands: int, width: int, height: int,
                   noise_std: float = 0.1, seed: int = 0):
    """Synthetic labeled scene with one smooth spectral signature per class.

    Classes grow outward from jittered grid points in lockstep, so every class
    forms one contiguous region and every pixel is labeled 1..n_classes.
    Returns ``(cube, labels)``.
    """
    if n_classes < 2 or n_classes > 255:
        raise ConfigError(f"n_classes must be in [2, 255], got {n_classes}")
    if bands < 1 or width < 1 or height < 1:
        raise ConfigError(f"invalid scene size {width}x{height}x{bands}")
    if n_classes > width * height:
        raise ConfigError(f"{n_classes} classes do not fit in {width * height} pixels")
    if noise_std < 0:
        raise ConfigError("noise_std must be >= 0")
    rng = np.random.default_rng(seed)

    b = np.arange(bands, dtype=np.float64)
    signatures = np.empty((n_classes, bands))
    for c in range(n_classes):
        sig = np.full(bands, rng.uniform(0.5, 1.5))
        for _ in range(3):
            center = rng.uniform(0, bands)
            width_b = rng.uniform(0.05, 0.25) * bands + 1
            sig += rng.uniform(-1, 1) * np.exp(-0.5 * ((b - center) / width_b) ** 2)
        signatures[c] = sig

    # seed points: one per grid cell, cells chosen at random, jittered inside the cell
    cols = int(np.ceil(np.sqrt(n_classes * width / height)))
    rows = int(np.ceil(n_classes / cols))
    cells = rng.permutation(rows * cols)[:n_classes]
    seeds = set()
    points = []
    for cell in cells:
        r, q = divmod(int(cell), cols)
        y0, y1 = r * height // rows, max((r + 1) * height // rows, r * height // rows + 1)
        x0, x1 = q * width // cols, max((q + 1) * width // cols, q * width // cols + 1)
        p = (int(rng.integers(x0, x1)), int(rng.integers(y0, y1)))
        while p in seeds:
            p = (int(rng.integers(width)), int(rng.integers(height)))
        seeds.add(p)
        points.append(p)

    # grow all regions breadth-first at equal speed; each region stays 4-connected
    labels = np.zeros((height, width), dtype=np.int32)
    queue = deque()
    for c, (x, y) in enumerate(points, start=1):
        labels[y, x] = c
        queue.append((x, y))
    while queue:
        x, y = queue.popleft()
        for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if 0 <= nx < width and 0 <= ny < height and not labels[ny, nx]:
                labels[ny, nx] = labels[y, x]
                queue.append((nx, ny))

    cube = signatures[labels - 1]
    if noise_std > 0:
        cube = cube + rng.normal(0.0, noise_std, size=cube.shape)
    return cube.astype(np.float32), labels
