"""Central finite-difference verification of the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .model import LAYER_NAMES, ArchConfig, Model, backward, build_model, forward, loss
from .nn import LayerParams

TINY_CONFIG = ArchConfig(
    n_bands=10, n_classes=3, conv1_height=4, conv1_stride=2, conv1_kernels=4,
    conv2_stride=1, conv2_kernels=2, fc1_nodes=8, fc2_nodes=6,
)


def relative_error(analytic, numeric):
    a = np.abs(analytic)
    n = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-12)


@dataclass
class GradCheckReport:
    tolerance: float
    max_errors: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_errors.items() if not v < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.max_errors.values(), default=0.0)

    def format(self) -> str:
        lines = [f"{name:<16} {err:.3e}{'  FAIL' if not err < self.tolerance else ''}"
                 for name, err in self.max_errors.items()]
        lines.append(f"max relative error {self.max_error:.3e} "
                     f"(tolerance {self.tolerance:.0e}): {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def random_model(config: ArchConfig = TINY_CONFIG, seed: int = 0, scale: float = 0.5) -> Model:
    """A float64 model with every weight *and* bias drawn from N(0, scale^2)."""
    rng = np.random.default_rng(seed)
    model = build_model(config, seed, dtype=np.float64)
    layers = {
        name: LayerParams(rng.normal(0, scale, p.weights.shape), rng.normal(0, scale, p.biases.shape))
        for name, p in model.layers.items()
    }
    return Model(config, layers, seed=seed)


def random_sample(config: ArchConfig = TINY_CONFIG, seed: int = 0):
    rng = np.random.default_rng(seed + 10_000)
    patch = rng.normal(size=(3, 3, config.n_bands))
    return patch, int(rng.integers(config.n_classes))


def grad_check(model: Model, sample, step: float = 1e-5, tolerance: float = 1e-6,
               gradients=None) -> GradCheckReport:
    """Compare analytic gradients of one sample's loss with central differences.

    ``gradients`` overrides the analytic side (used to confirm that a wrong
    gradient gets flagged).  The report also covers the input patch.
    """
    if model.dtype != np.float64:
        raise UsageError("gradient checking needs a float64 model; use model.astype(np.float64)")
    patch, label = sample
    patch = np.array(patch, dtype=np.float64)
    if gradients is None:
        _, cache = forward(model, patch)
        gradients, d_patch = backward(model, cache, label)
    else:
        _, cache = forward(model, patch)
        _, d_patch = backward(model, cache, label)

    probe = model.copy()
    report = GradCheckReport(tolerance)
    for name in LAYER_NAMES:
        for part in ("weights", "biases"):
            target = getattr(probe.layers[name], part)
            numeric = _central_difference(lambda: loss(probe, patch, label), target, step)
            report.max_errors[f"{name}.{part}"] = float(
                relative_error(getattr(gradients[name], part), numeric).max())
    numeric = _central_difference(lambda: loss(probe, patch, label), patch, step)
    report.max_errors["input"] = float(relative_error(d_patch, numeric).max())
    return report


def _central_difference(f, array, step):
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return grad
