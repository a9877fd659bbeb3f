"""Synthetic GZSL data with known attribute locations, plus attribute CSV and
feature-store persistence.

Every attribute owns a fixed grating template and a fixed set of patch
positions.  A class image is the superposition of its active attributes'
templates, scaled by the attribute strengths, plus Gaussian pixel noise.
"""

import csv
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import (
    BadMagic,
    CorruptLength,
    DataError,
    ParseError,
    RaggedRow,
    SpecInvalid,
    TaintViolation,
    VersionMismatch,
)
from .weightfile import atomic_write

SEEN_TRAIN, SEEN_TEST, UNSEEN_TEST, SYNTHETIC = 0, 1, 2, 3
TAG_NAMES = {SEEN_TRAIN: "seen_train", SEEN_TEST: "seen_test", UNSEEN_TEST: "unseen_test", SYNTHETIC: "synthetic"}


@dataclass(frozen=True)
class SyntheticSpec:
    num_seen: int = 12
    num_unseen: int = 4
    num_attributes: int = 20
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    attributes_per_class: int = 3
    samples_per_class: int = 40
    noise: float = 0.1
    seen_test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        ints = ("num_seen", "num_unseen", "num_attributes", "image_size", "patch_size", "channels", "samples_per_class")
        for key in ints:
            if int(getattr(self, key)) < 1:
                raise SpecInvalid(f"{key} must be positive")
        if self.image_size % self.patch_size:
            raise SpecInvalid("image_size must be a multiple of patch_size")
        if not 0 <= self.attributes_per_class <= self.num_attributes:
            raise SpecInvalid("attributes_per_class must lie in [0, num_attributes]")
        if self.noise < 0:
            raise SpecInvalid("noise must be non-negative")
        if not 0.0 <= self.seen_test_fraction < 1.0:
            raise SpecInvalid("seen_test_fraction must lie in [0, 1)")

    @property
    def num_classes(self):
        return self.num_seen + self.num_unseen

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid**2


@dataclass
class GzslDataset:
    images: np.ndarray  # (n, C, H, W)
    labels: np.ndarray  # (n,) class ids
    tags: np.ndarray  # (n,) split tags
    class_attributes: np.ndarray  # (num_classes, A)
    seen_classes: np.ndarray
    unseen_classes: np.ndarray
    attribute_patches: np.ndarray = None  # (A, N) bool ground truth
    templates: np.ndarray = None  # (A, C, P, P)
    spec: SyntheticSpec = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen, unseen = set(self.seen_classes.tolist()), set(self.unseen_classes.tolist())
        if seen & unseen:
            raise DataError("seen and unseen classes overlap")
        if len(self.class_attributes) != len(seen | unseen):
            raise DataError("every class needs exactly one attribute row")
        labels = self.labels.tolist()
        for lab, tag in zip(labels, self.tags.tolist()):
            if lab not in seen and lab not in unseen:
                raise DataError(f"label {lab} is in neither class set")
            if lab in unseen and tag != UNSEEN_TEST:
                raise DataError(f"unseen class {lab} has a sample tagged {TAG_NAMES.get(tag, tag)}")
            if lab in seen and tag not in (SEEN_TRAIN, SEEN_TEST):
                raise DataError(f"seen class {lab} has a sample tagged {TAG_NAMES.get(tag, tag)}")

    @property
    def num_classes(self):
        return len(self.class_attributes)

    @property
    def num_attributes(self):
        return self.class_attributes.shape[1]

    def split(self, tag):
        return np.flatnonzero(self.tags == tag)

    def image_mask(self, index):
        """Ground-truth patch mask (N,) of the attributes active in one image."""
        active = self.class_attributes[self.labels[index]] != 0
        return self.attribute_patches[active].any(axis=0)

    # -- persistence ---------------------------------------------------------

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        buf = io.BytesIO()
        np.savez(
            buf,
            images=self.images.astype(np.float32),
            labels=self.labels,
            tags=self.tags,
            class_attributes=self.class_attributes,
            seen_classes=self.seen_classes,
            unseen_classes=self.unseen_classes,
            attribute_patches=self.attribute_patches,
            templates=self.templates,
        )
        atomic_write(os.path.join(directory, "dataset.npz"), buf.getvalue())
        save_attributes(os.path.join(directory, "attributes.csv"), self.class_attributes)
        if self.spec is not None:
            text = json.dumps(asdict(self.spec), indent=2, sort_keys=True) + "\n"
            atomic_write(os.path.join(directory, "spec.json"), text.encode())

    @classmethod
    def load(cls, directory):
        path = os.path.join(directory, "dataset.npz")
        try:
            z = np.load(path, allow_pickle=False)
        except FileNotFoundError:
            raise DataError(f"no dataset at {directory}") from None
        spec = None
        spec_path = os.path.join(directory, "spec.json")
        if os.path.exists(spec_path):
            with open(spec_path) as fh:
                spec = SyntheticSpec(**json.load(fh))
        return cls(
            images=z["images"],
            labels=z["labels"],
            tags=z["tags"],
            class_attributes=z["class_attributes"],
            seen_classes=z["seen_classes"],
            unseen_classes=z["unseen_classes"],
            attribute_patches=z["attribute_patches"] if "attribute_patches" in z else None,
            templates=z["templates"] if "templates" in z else None,
            spec=spec,
        )


# -- generation ----------------------------------------------------------------


def _grating(rng, channels, p):
    yy, xx = np.mgrid[0:p, 0:p]
    fx, fy = rng.integers(-2, 3, size=2)
    if fx == 0 and fy == 0:
        fx = 1
    phase = rng.uniform(0, 2 * np.pi, size=channels)
    t = np.sin(2 * np.pi * (fx * xx + fy * yy) / p + phase[:, None, None])
    return t / np.sqrt((t**2).mean())


def _assign_patches(rng, spec):
    a, n = spec.num_attributes, spec.num_patches
    masks = np.zeros((a, n), dtype=bool)
    wide = rng.choice(a, size=max(1, a // 10), replace=False) if a >= 10 else []
    for k in range(a):
        count = max(2, n // 4) if k in wide else rng.choice([1, 2, 3], p=[0.5, 0.3, 0.2])
        masks[k, rng.choice(n, size=min(count, n), replace=False)] = True
    return masks


def _class_attributes(rng, spec):
    c, a, m = spec.num_classes, spec.num_attributes, spec.attributes_per_class
    for _ in range(1000):
        rows = np.zeros((c, a))
        chosen = set()
        for i in range(c):
            active = tuple(sorted(rng.choice(a, size=m, replace=False)))
            rows[i, list(active)] = rng.uniform(0.5, 1.0, size=m)
            chosen.add(active)
        if m == 0:
            return rows
        # distinct classes, and every attribute used by an unseen class also appears in a seen class
        seen_used = (rows[: spec.num_seen] != 0).any(axis=0)
        unseen_used = (rows[spec.num_seen :] != 0).any(axis=0)
        if len(chosen) == c and not np.any(unseen_used & ~seen_used):
            return rows
    raise SpecInvalid("could not draw distinct, transferable class attribute sets")


def render(templates, attribute_patches, attributes, patch_size, grid):
    """Noise-free image for one attribute vector: the weighted superposition of
    each active attribute's template on its patches."""
    channels = templates.shape[1]
    p = patch_size
    image = np.zeros((channels, grid * p, grid * p))
    for k in np.flatnonzero(attributes):
        for patch in np.flatnonzero(attribute_patches[k]):
            r, c = divmod(patch, grid)
            image[:, r * p : (r + 1) * p, c * p : (c + 1) * p] += attributes[k] * templates[k]
    return image


def generate(spec=SyntheticSpec(), rng=None):
    """Draw a synthetic dataset; deterministic for a given ``spec.seed``.

    Classes are drawn in a seed-fixed order, then permuted into seen/unseen
    ids.  Seen classes hold out ``seen_test_fraction`` of their samples.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    a, p, g = spec.num_attributes, spec.patch_size, spec.grid
    templates = np.stack([_grating(rng, spec.channels, p) for _ in range(a)])
    masks = _assign_patches(rng, spec)
    attrs = _class_attributes(rng, spec)

    order = rng.permutation(spec.num_classes)
    seen_classes = np.sort(order[: spec.num_seen])
    unseen_classes = np.sort(order[spec.num_seen :])
    # attribute rows were drawn seen-first; place them at their class ids
    class_attributes = np.zeros_like(attrs)
    class_attributes[seen_classes] = attrs[: spec.num_seen]
    class_attributes[unseen_classes] = attrs[spec.num_seen :]

    n_test = int(round(spec.samples_per_class * spec.seen_test_fraction))
    images, labels, tags = [], [], []
    for cid in range(spec.num_classes):
        clean = render(templates, masks, class_attributes[cid], p, g)
        noise = rng.standard_normal((spec.samples_per_class,) + clean.shape) * spec.noise
        images.append(clean[None] + noise)
        labels.append(np.full(spec.samples_per_class, cid))
        if cid in unseen_classes:
            tags.append(np.full(spec.samples_per_class, UNSEEN_TEST))
        else:
            t = np.full(spec.samples_per_class, SEEN_TRAIN)
            t[rng.permutation(spec.samples_per_class)[:n_test]] = SEEN_TEST
            tags.append(t)
    return GzslDataset(
        images=np.concatenate(images).astype(np.float32),
        labels=np.concatenate(labels).astype(np.int64),
        tags=np.concatenate(tags).astype(np.uint8),
        class_attributes=class_attributes,
        seen_classes=seen_classes,
        unseen_classes=unseen_classes,
        attribute_patches=masks,
        templates=templates,
        spec=spec,
    )


# -- attribute CSV ------------------------------------------------------------


def save_attributes(path, matrix, class_ids=None):
    matrix = np.asarray(matrix, dtype=np.float64)
    class_ids = range(len(matrix)) if class_ids is None else class_ids
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["class_id"] + [f"attr_{j}" for j in range(matrix.shape[1])])
    for cid, row in zip(class_ids, matrix):
        writer.writerow([int(cid)] + [repr(float(v)) for v in row])
    atomic_write(path, out.getvalue().encode("utf-8"))


def load_attributes(path):
    """Read an attribute CSV; returns ``(class_ids, matrix)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty attribute file", 1) from None
        if not header or header[0].strip() != "class_id":
            raise ParseError("header must start with class_id", 1)
        width = len(header)
        ids, rows = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise RaggedRow(f"expected {width} columns, found {len(row)}", line)
            try:
                ids.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), line) from None
    return np.array(ids, dtype=np.int64), np.array(rows, dtype=np.float64).reshape(len(rows), width - 1)


# -- feature store ------------------------------------------------------------

FEATURE_MAGIC = b"VGZF"
FEATURE_VERSION = 1


@dataclass
class FeatureStore:
    """Feature rows with class labels and split/taint tags."""

    features: np.ndarray
    labels: np.ndarray
    tags: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.tags = np.asarray(self.tags, dtype=np.uint8)

    def select(self, *tags):
        keep = np.isin(self.tags, tags)
        return FeatureStore(self.features[keep], self.labels[keep], self.tags[keep])

    def __len__(self):
        return len(self.labels)


def encode_features(store):
    rows, cols = store.features.shape
    return b"".join(
        [
            FEATURE_MAGIC,
            struct.pack("<III", FEATURE_VERSION, rows, cols),
            store.tags.astype("u1").tobytes(),
            store.labels.astype("<u4").tobytes(),
            np.ascontiguousarray(store.features, dtype="<f4").tobytes(),
        ]
    )


def decode_features(blob):
    if len(blob) < 16 or blob[:4] != FEATURE_MAGIC:
        raise BadMagic("not a VGZF feature store")
    version, rows, cols = struct.unpack_from("<III", blob, 4)
    if version != FEATURE_VERSION:
        raise VersionMismatch(f"unsupported VGZF version {version}")
    expected = 16 + rows + 4 * rows + 4 * rows * cols
    if len(blob) != expected:
        raise CorruptLength(f"expected {expected} bytes, found {len(blob)}")
    pos = 16
    tags = np.frombuffer(blob, "u1", rows, pos)
    pos += rows
    labels = np.frombuffer(blob, "<u4", rows, pos)
    pos += 4 * rows
    feats = np.frombuffer(blob, "<f4", rows * cols, pos).reshape(rows, cols)
    return FeatureStore(feats.copy(), labels.astype(np.int64), tags.copy())


def save_features(path, features, labels=None, tags=None):
    store = features if isinstance(features, FeatureStore) else FeatureStore(features, labels, tags)
    atomic_write(path, encode_features(store))


def load_features(path):
    with open(path, "rb") as fh:
        return decode_features(fh.read())


# -- taint audit ---------------------------------------------------------------


class TaintAudit:
    """Records which split tags each training stage consumed and rejects any
    evaluation-only rows."""

    FORBIDDEN = (SEEN_TEST, UNSEEN_TEST)

    def __init__(self):
        self.records = []

    def admit(self, stage, tags):
        tags = np.asarray(tags)
        bad = np.isin(tags, self.FORBIDDEN)
        if bad.any():
            names = sorted({TAG_NAMES[int(t)] for t in tags[bad]})
            raise TaintViolation(f"{stage}: evaluation rows ({', '.join(names)}) offered for training")
        counts = {TAG_NAMES[int(t)]: int(n) for t, n in zip(*np.unique(tags, return_counts=True))}
        self.records.append((stage, counts))

    def stages_touching(self, tag):
        name = TAG_NAMES[tag]
        return [stage for stage, counts in self.records if counts.get(name)]


def spec_from_mapping(values):
    """Build a :class:`SyntheticSpec` from string values (config files)."""
    known = {f.name: f.type for f in fields(SyntheticSpec)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise SpecInvalid(f"unknown spec key {key!r}")
        caster = float if known[key] in (float, "float") else int
        try:
            kwargs[key] = caster(raw)
        except ValueError:
            raise SpecInvalid(f"{key}: cannot parse {raw!r}") from None
    return SyntheticSpec(**kwargs)
