"""HSI-CNN: hyperspectral pixel classification with a spectral-to-image reshape CNN."""

from .data import (BandStats, PatchSource, SampleSet, SplitIndices, enumerate_samples,
                   extract_patch, load_cube, load_labels, normalize_cube, save_cube,
                   save_labels, stratified_split, synth_generate)
from .errors import (ConfigError, DimensionError, EmptySetError, FormatError, HsiCnnError,
                     LabelError, UsageError)
from .evaluation import (MetricsReport, average_accuracy, confusion_matrix, export_features,
                         overall_accuracy, render_map)
from .gradcheck import grad_check
from .model import (ArchConfig, LayerShapes, Model, backward, build_model, derive_shapes,
                    forward, load_checkpoint, predict, save_checkpoint)
from .training import TrainConfig, TrainHistory, lr_at, sgd_update, train

__version__ = "0.1.0"
