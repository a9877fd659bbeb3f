"""Attribute attention: a synthetic attribute queries the patch features of one
backbone layer, and the attention-weighted patches form the AAM feature."""

import math
import os
from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from .dataset import TaintAudit
from .diffnum import Adam, Tape
from .errors import ConfigError, ShapeMismatch, UnseenClassInBatch
from .f2a import AttributeVector, FeatureToAttribute
from .layers import Linear, Module


class AttributeAttention(Module):
    """Multi-head cross-attention from one attribute query to N patches.

    ``Q = Linear_Q(a)``, ``K = Linear_K(X)``, ``V = X + Linear_V(X)``; each head
    attends with ``softmax(Q_h K_h^T / sqrt(s))`` where ``s`` is the head width
    (``scale="head"``) or the model width (``scale="model"``).  Dropout acts on
    the three projection outputs in training mode only.
    """

    def __init__(self, attr_dim, dim, num_classes, num_heads=2, dropout=0.5, scale="head", rng=None, dtype=np.float32):
        if dim % num_heads:
            raise ConfigError(f"model width {dim} is not divisible by {num_heads} heads")
        if scale not in ("head", "model"):
            raise ConfigError(f"scale must be 'head' or 'model', got {scale!r}")
        self.num_heads = num_heads
        self.dropout = dropout
        self.scale = scale
        self.query = Linear(attr_dim, dim, rng, dtype=dtype)
        self.key = Linear(dim, dim, rng, dtype=dtype)
        self.value = Linear(dim, dim, rng, dtype=dtype)
        self.classifier = Linear(dim, num_classes, rng, dtype=dtype)

    @property
    def dim(self):
        return self.key.n_in

    @property
    def head_dim(self):
        return self.dim // self.num_heads

    def project_qkv(self, attr, patches, training=False, rng=None):
        attr, patches = dn.as_tensor(attr), dn.as_tensor(patches)
        if attr.shape[-1] != self.query.n_in:
            raise ShapeMismatch(f"attribute length {attr.shape[-1]} != {self.query.n_in}")
        if patches.shape[-1] != self.dim:
            raise ShapeMismatch(f"patch width {patches.shape[-1]} != {self.dim}")
        q = dn.dropout(self.query(attr), self.dropout, rng, training)
        q = q.reshape(*q.shape[:-1], 1, self.dim)
        k = dn.dropout(self.key(patches), self.dropout, rng, training)
        v = patches + dn.dropout(self.value(patches), self.dropout, rng, training)
        return q, k, v

    def _heads(self, x):
        *lead, t, d = x.shape
        n = len(lead)
        return x.reshape(*lead, t, self.num_heads, self.head_dim).transpose(*range(n), n + 1, n, n + 2)

    def patch_attention(self, q, k):
        """Per-head attention weights of shape (..., heads, 1, N)."""
        width = self.head_dim if self.scale == "head" else self.dim
        scores = dn.matmul(self._heads(q), self._heads(k).transpose()) * (1.0 / math.sqrt(width))
        return dn.softmax_rows(scores)

    def __call__(self, attr, patches, training=False, rng=None):
        """Return ``(x_aam, attention)`` with x_aam of shape (..., d)."""
        q, k, v = self.project_qkv(attr, patches, training, rng)
        attn = self.patch_attention(q, k)
        out = dn.matmul(attn, self._heads(v))  # (..., H, 1, dh)
        lead = out.shape[:-3]
        n = len(lead)
        out = out.transpose(*range(n), n + 1, n, n + 2).reshape(*lead, self.dim)
        return out, attn

    def aux_classify(self, x, slope=dn.LEAKY_SLOPE):
        return self.classifier(dn.leaky_relu(x, slope))


@dataclass
class AttentionMap:
    per_head: np.ndarray  # (heads, 1, N)
    averaged: np.ndarray  # (N,)
    grid: np.ndarray  # (sqrt N, sqrt N)
    normalized: np.ndarray  # grid min-max scaled to [0, 1]


def min_max(x):
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def attention_map(aam, attr, patches):
    """Attention of one query over one image's patches, in eval mode."""
    if isinstance(attr, AttributeVector):
        attr = attr.values
    patches = np.asarray(patches)
    if patches.ndim != 2:
        raise ShapeMismatch("attention_map takes the (N, d) patches of one image")
    with dn.no_tape():
        _, attn = aam(np.asarray(attr)[None], patches[None])
    per_head = attn.data[0]
    averaged = per_head.mean(axis=0)[0]
    side = math.isqrt(len(averaged))
    if side * side != len(averaged):
        raise ShapeMismatch(f"{len(averaged)} patches do not form a square grid")
    grid = averaged.reshape(side, side)
    return AttentionMap(per_head, averaged, grid, min_max(grid))


def write_pgm(path, values):
    """Write a [0, 1] array as an ASCII (P2) greyscale image, 0-255."""
    img = np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(int)
    h, w = img.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in img]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pgm(path):
    with open(path) as fh:
        tokens = fh.read().split()
    if tokens[0] != "P2":
        raise ValueError("not an ASCII PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4 : 4 + w * h], dtype=int).reshape(h, w), maxval


def export_attention(amap, stem):
    """Write ``<stem>_head<k>.pgm`` per head and ``<stem>_avg.pgm``; returns paths."""
    side = amap.grid.shape[0]
    paths = []
    for k, head in enumerate(amap.per_head):
        path = f"{stem}_head{k}.pgm"
        write_pgm(path, min_max(head.reshape(side, side)))
        paths.append(path)
    path = f"{stem}_avg.pgm"
    write_pgm(path, amap.normalized)
    paths.append(path)
    directory = os.path.dirname(os.path.abspath(stem))
    return [os.path.join(directory, os.path.basename(p)) for p in paths]


# -- joint F2A + AAM model -----------------------------------------------------


class AttributeFeatureExtractor(Module):
    """F2A and AAM trained together on seen classes.

    ``seen_classes`` maps global class ids onto auxiliary classifier rows.
    """

    def __init__(
        self,
        feature_dim,
        attr_dim,
        seen_classes,
        num_heads=2,
        dropout=0.5,
        scale="head",
        f2a_hidden=None,
        rng=None,
        dtype=np.float32,
    ):
        self.seen_classes = np.asarray(seen_classes, dtype=np.int64)
        self.f2a = FeatureToAttribute(feature_dim, attr_dim, f2a_hidden, rng, dtype=dtype)
        self.aam = AttributeAttention(attr_dim, feature_dim, len(self.seen_classes), num_heads, dropout, scale, rng, dtype)
        self.trained = False

    def seen_index(self, labels):
        labels = np.asarray(labels)
        lookup = {int(c): i for i, c in enumerate(self.seen_classes)}
        try:
            return np.array([lookup[int(l)] for l in labels], dtype=np.int64)
        except KeyError as exc:
            raise UnseenClassInBatch(f"class {exc.args[0]} is not a seen class") from None

    def synthetic_attributes(self, cls):
        return self.f2a(cls)

    def features(self, cls, patches, batch_size=512):
        """Eval-mode AAM features (n, d) for CLS / patch feature arrays."""
        out = []
        with dn.no_tape():
            for lo in range(0, len(cls), batch_size):
                a_hat = self.f2a(cls[lo : lo + batch_size])
                x, _ = self.aam(a_hat, patches[lo : lo + batch_size])
                out.append(x.data)
        return np.concatenate(out) if out else np.zeros((0, self.aam.dim))

    def attention(self, cls, patches, attr=None):
        """Attention map for one image, queried by ``attr`` or by F2A output."""
        if attr is None:
            attr = self.f2a.synthesize_attribute(np.asarray(cls)[None]).values[0]
        return attention_map(self.aam, attr, patches)

    def joint_loss(self, cls, patches, target_attrs, labels, use_mse=True, training=False, rng=None, mse_weight=1.0):
        """Squared error of the F2A output (summed over attributes, averaged over
        rows) plus CE of the aux classifier on the AAM feature.

        Returns ``(loss, {"mse": float, "ce": float})``.  With ``use_mse`` off
        the loss is the cross-entropy term alone.
        """
        idx = self.seen_index(labels)
        a_hat = self.f2a(cls)
        x, _ = self.aam(a_hat, patches, training, rng)
        ce = dn.cross_entropy(self.aam.aux_classify(x), idx)
        mse = dn.mse_loss(a_hat, np.asarray(target_attrs), "row_sum")
        loss = mse * mse_weight + ce if use_mse else ce
        return loss, {"mse": mse.item(), "ce": ce.item()}


def train_attribute_extractor(
    model,
    cls,
    patches,
    labels,
    class_attributes,
    epochs=60,
    lr=1e-3,
    batch_size=64,
    use_mse=True,
    rng=None,
    tags=None,
    audit=None,
    mse_weight=1.0,
):
    """Jointly fit F2A, AAM and the auxiliary classifier with Adam.

    Returns the per-epoch history of mean (loss, mse, ce).
    """
    labels = np.asarray(labels)
    if tags is not None:
        (audit or TaintAudit()).admit("aam", tags)
    model.seen_index(labels)  # rejects unseen classes before any update
    rng = np.random.default_rng(0) if rng is None else rng
    targets = np.asarray(class_attributes)[labels]
    opt = Adam(model.parameters(), lr=lr)
    n = len(labels)
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            opt.zero_grad()
            with Tape() as tape:
                loss, parts = model.joint_loss(cls[idx], patches[idx], targets[idx], labels[idx], use_mse, True, rng, mse_weight)
                tape.backward(loss)
            opt.step()
            sums += len(idx) * np.array([loss.item(), parts["mse"], parts["ce"]])
        history.append(tuple(sums / n))
    model.trained = True
    return history
