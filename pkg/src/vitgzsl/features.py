"""Final image features from backbone layers: CLS, patch average, AAM, or the
CLS+AAM concatenation."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LayerOutOfRange, MissingModule

_ALIASES = {
    "cls": "cls_only",
    "cls_only": "cls_only",
    "avg": "avg",
    "aam": "aam_only",
    "aam_only": "aam_only",
    "cls+aam": "cls_plus_aam",
    "cls_plus_aam": "cls_plus_aam",
}
SHORT_NAMES = {"cls_only": "cls", "avg": "avg", "aam_only": "aam", "cls_plus_aam": "cls+aam"}


def canonical_variant(name):
    try:
        return _ALIASES[name]
    except KeyError:
        raise ConfigError(f"unknown feature variant {name!r}; choose from cls, avg, aam, cls+aam") from None


def needs_attention(variant):
    return canonical_variant(variant) in ("aam_only", "cls_plus_aam")


@dataclass
class VitFeature:
    vector: np.ndarray  # (..., dim)
    cls_layer: int
    aam_layer: int
    variant: str


def average_patches(patches):
    """Mean over the patch axis (second to last).

    Values are sorted along that axis first so the summation order, and hence
    the result, is bitwise independent of patch order.
    """
    return np.sort(np.asarray(patches, dtype=np.float64), axis=-2).mean(axis=-2)


def _l2(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norm == 0.0, 1.0, norm)


def assemble(features, extractor, variant, cls_layer, aam_layer, l2norm=False):
    """Build the feature vector(s) of ``variant`` from backbone layer features.

    ``cls_layer`` feeds the CLS part, ``aam_layer`` feeds both AVG and AAM.
    The concatenated variant is ordered CLS first, AAM second.
    """
    variant = canonical_variant(variant)
    for index in (cls_layer, aam_layer):
        if not 1 <= index <= features.num_layers:
            raise LayerOutOfRange(f"layer {index} outside [1, {features.num_layers}]")
    if variant in ("aam_only", "cls_plus_aam") and (extractor is None or not extractor.trained):
        raise MissingModule(f"variant {variant} needs a trained attribute extractor")

    cls, _ = features.layer(cls_layer)
    _, patches = features.layer(aam_layer)
    single = cls.ndim == 1
    if single:
        cls, patches = cls[None], patches[None]

    parts = []
    if variant in ("cls_only", "cls_plus_aam"):
        parts.append(np.asarray(cls, dtype=np.float64))
    if variant == "avg":
        parts.append(average_patches(patches))
    if variant in ("aam_only", "cls_plus_aam"):
        parts.append(extractor.features(cls, patches))
    if l2norm:
        parts = [_l2(p) for p in parts]
    vector = np.concatenate(parts, axis=-1)
    return VitFeature(vector[0] if single else vector, cls_layer, aam_layer, variant)
