"""Feature-to-attribute regressor: CLS feature -> synthetic attribute vector."""

from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from .errors import IndexOutOfRange, KindMismatch, ShapeMismatch
from .layers import Linear, Module

ATTRIBUTE_KINDS = ("real", "synthetic", "one_hot_probe")
PROBE_VALUE = 10.0


@dataclass
class AttributeVector:
    values: np.ndarray
    kind: str = "real"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in ATTRIBUTE_KINDS:
            raise ValueError(f"unknown attribute kind {self.kind!r}")
        if self.kind == "one_hot_probe" and np.count_nonzero(self.values) != 1:
            raise ValueError("a one-hot probe has exactly one non-zero entry")

    def __len__(self):
        return self.values.shape[-1]


def make_one_hot_attribute(index, num_attributes):
    if not 0 <= index < num_attributes:
        raise IndexOutOfRange(f"attribute index {index} outside [0, {num_attributes})")
    values = np.zeros(num_attributes)
    values[index] = PROBE_VALUE
    return AttributeVector(values, "one_hot_probe")


class FeatureToAttribute(Module):
    """Two linear layers with a leaky ReLU in between; no output activation."""

    def __init__(self, feature_dim, attr_dim, hidden=None, rng=None, slope=dn.LEAKY_SLOPE, dtype=np.float32):
        hidden = hidden or max(attr_dim, feature_dim)
        self.slope = slope
        self.fc1 = Linear(feature_dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, attr_dim, rng, dtype=dtype)

    @property
    def attr_dim(self):
        return self.fc2.n_out

    def __call__(self, cls):
        cls = dn.as_tensor(cls)
        if cls.shape[-1] != self.fc1.n_in:
            raise ShapeMismatch(f"CLS width {cls.shape[-1]} != expected {self.fc1.n_in}")
        return self.fc2(dn.leaky_relu(self.fc1(cls), self.slope))

    def synthesize_attribute(self, cls):
        with dn.no_tape():
            return AttributeVector(self(cls).data, "synthetic")


def f2a_mse_loss(pred, target):
    """Mean squared error over attribute dimensions (and rows, if batched).

    ``target`` may be an :class:`AttributeVector`, in which case it must be a
    real attribute.
    """
    if isinstance(target, AttributeVector):
        if target.kind != "real":
            raise KindMismatch(f"regression target must be a real attribute, got {target.kind}")
        target = target.values
    if isinstance(pred, AttributeVector):
        pred = pred.values
    return dn.mse_loss(pred, target)
