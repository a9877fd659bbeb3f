"""A small pre-norm Vision Transformer that exposes every layer's CLS and
patch features."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffnum as dn
from .diffnum import Adam, Parameter, Tape, no_tape
from .errors import (
    ConfigError,
    EmptyDataset,
    FrozenModel,
    IndivisibleImage,
    LayerOutOfRange,
    MissingTensor,
    ShapeMismatch,
)
from .layers import Linear, Module, trunc_normal
from .weightfile import load_tensors, save_tensors


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 32
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    channels: int = 1
    num_classes: int = 0

    def __post_init__(self):
        for key, value in asdict(self).items():
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise ConfigError(f"{key} must be a non-negative integer, got {value!r}")
        for key in ("image_size", "patch_size", "embed_dim", "num_layers", "num_heads", "mlp_ratio", "channels"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.image_size % self.patch_size:
            raise IndivisibleImage(f"image size {self.image_size} is not a multiple of patch size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid**2

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self):
        return self.channels * self.patch_size**2

    def as_vector(self):
        return np.array(list(asdict(self).values()), dtype=np.float32)

    @classmethod
    def from_vector(cls, values):
        names = list(cls.__dataclass_fields__)
        if len(values) != len(names):
            raise ConfigError("config vector has the wrong length")
        return cls(**{k: int(round(float(v))) for k, v in zip(names, values)})


def patchify(images, patch_size):
    """Split ``(..., C, H, W)`` images into ``(..., N, C*P*P)`` patch rows.

    Patches run top-left to bottom-right in row-major order; each row holds
    the patch channel by channel, row-major inside the channel.
    """
    images = np.asarray(images)
    *lead, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise IndivisibleImage(f"{h}x{w} image is not divisible into {p}x{p} patches")
    gh, gw = h // p, w // p
    x = images.reshape(*lead, c, gh, p, gw, p)
    nd = len(lead)
    x = np.moveaxis(x, [nd + 1, nd + 3], [nd, nd + 1])  # (..., gh, gw, c, p, p)
    return x.reshape(*lead, gh * gw, c * p * p)


@dataclass
class LayerFeatures:
    """CLS and patch outputs of every layer.

    ``cls`` has shape ``(L, ..., D)`` and ``patches`` ``(L, ..., N, D)``;
    layers are addressed 1-based through :meth:`layer`.
    """

    cls: np.ndarray
    patches: np.ndarray

    @property
    def num_layers(self):
        return self.cls.shape[0]

    def layer(self, index):
        if not 1 <= index <= self.num_layers:
            raise LayerOutOfRange(f"layer {index} outside [1, {self.num_layers}]")
        return self.cls[index - 1], self.patches[index - 1]

    def subset(self, rows):
        return LayerFeatures(self.cls[:, rows], self.patches[:, rows])


class TransformerLayer(Module):
    def __init__(self, dim, heads, mlp_ratio, rng=None, dtype=np.float32):
        self.heads = heads
        self.ln1_gain = Parameter(np.ones(dim), "ln1_gain", dtype)
        self.ln1_bias = Parameter(np.zeros(dim), "ln1_bias", dtype)
        self.attn_q = Linear(dim, dim, rng, "trunc_normal", dtype=dtype)
        self.attn_k = Linear(dim, dim, rng, "trunc_normal", dtype=dtype)
        self.attn_v = Linear(dim, dim, rng, "trunc_normal", dtype=dtype)
        self.attn_out = Linear(dim, dim, rng, "trunc_normal", dtype=dtype)
        self.ln2_gain = Parameter(np.ones(dim), "ln2_gain", dtype)
        self.ln2_bias = Parameter(np.zeros(dim), "ln2_bias", dtype)
        self.mlp_fc1 = Linear(dim, mlp_ratio * dim, rng, "trunc_normal", dtype=dtype)
        self.mlp_fc2 = Linear(mlp_ratio * dim, dim, rng, "trunc_normal", dtype=dtype)

    def _split(self, x):
        *lead, t, d = x.shape
        dh = d // self.heads
        x = x.reshape(*lead, t, self.heads, dh)
        n = len(lead)
        return x.transpose(*range(n), n + 1, n, n + 2)

    def _merge(self, x):
        *lead, h, t, dh = x.shape
        n = len(lead)
        return x.transpose(*range(n), n + 1, n, n + 2).reshape(*lead, t, h * dh)

    def attention(self, xhat):
        """Multi-head self-attention; returns ``(output, per-head maps)``."""
        q = self._split(self.attn_q(xhat))
        k = self._split(self.attn_k(xhat))
        v = self._split(self.attn_v(xhat))
        scale = 1.0 / math.sqrt(q.shape[-1])
        attn = dn.softmax_rows(dn.matmul(q, k.transpose()) * scale)
        out = self.attn_out(self._merge(dn.matmul(attn, v)))
        return out, attn

    def __call__(self, x, return_attention=False):
        if x.shape[-1] != self.ln1_gain.shape[0]:
            raise ShapeMismatch(f"token width {x.shape[-1]} != layer width {self.ln1_gain.shape[0]}")
        mhsa, attn = self.attention(dn.layer_norm(x, self.ln1_gain, self.ln1_bias))
        z = mhsa + x
        out = self.mlp_fc2(dn.gelu(self.mlp_fc1(dn.layer_norm(z, self.ln2_gain, self.ln2_bias)))) + z
        return (out, attn) if return_attention else out


class VisionTransformer(Module):
    def __init__(self, config=VitConfig(), rng=None, dtype=np.float32):
        self.config = config
        self.frozen = False
        d = config.embed_dim
        init = (lambda shape: trunc_normal(rng, shape)) if rng is not None else np.zeros
        self.patch_embed = Linear(config.patch_dim, d, rng, "trunc_normal", dtype=dtype)
        self.cls_token = Parameter(init((1, d)), "cls_token", dtype)
        self.pos_embed = Parameter(init((config.num_patches + 1, d)), "pos_embed", dtype)
        self.blocks = [TransformerLayer(d, config.num_heads, config.mlp_ratio, rng, dtype) for _ in range(config.num_layers)]
        if config.num_classes:
            self.head_gain = Parameter(np.ones(d), "head_gain", dtype)
            self.head_bias = Parameter(np.zeros(d), "head_bias", dtype)
            self.head = Linear(d, config.num_classes, rng, "trunc_normal", dtype=dtype)

    def freeze(self):
        self.frozen = True
        return self

    def embed(self, patches):
        """Project patch rows to tokens, prepend the CLS token, add positions."""
        patches = dn.as_tensor(patches)
        cfg = self.config
        if patches.shape[-1] != cfg.patch_dim or patches.shape[-2] != cfg.num_patches:
            raise ShapeMismatch(f"expected (..., {cfg.num_patches}, {cfg.patch_dim}) patches, got {patches.shape}")
        tokens = self.patch_embed(patches)
        lead = tokens.shape[:-2]
        cls = dn.reshape(self.cls_token, (1,) * len(lead) + (1, cfg.embed_dim))
        if lead:
            cls = cls + np.zeros(lead + (1, cfg.embed_dim))
        return dn.concat([cls, tokens], axis=-2) + self.pos_embed

    def _check_images(self, images):
        images = np.asarray(images)
        cfg = self.config
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if images.shape[-3:] != expected:
            raise ShapeMismatch(f"expected images of shape (..., {expected}), got {images.shape}")
        return images

    def _run(self, images, return_attention=False):
        x = self.embed(patchify(self._check_images(images), self.config.patch_size))
        outputs, maps = [], []
        for block in self.blocks:
            if return_attention:
                x, attn = block(x, return_attention=True)
                maps.append(attn.data)
            else:
                x = block(x)
            outputs.append(x)
        return outputs, maps

    def forward_all_layers(self, images, batch_size=256):
        """Per-layer CLS and patch features for one image or a batch."""
        images = self._check_images(images)
        single = images.ndim == 3
        batch = images[None] if single else images
        cls_parts, patch_parts = [], []
        with no_tape():
            for lo in range(0, len(batch), batch_size):
                outputs, _ = self._run(batch[lo : lo + batch_size])
                stacked = np.stack([o.data for o in outputs])
                cls_parts.append(stacked[:, :, 0])
                patch_parts.append(stacked[:, :, 1:])
        cls = np.concatenate(cls_parts, axis=1)
        patches = np.concatenate(patch_parts, axis=1)
        if single:
            cls, patches = cls[:, 0], patches[:, 0]
        return LayerFeatures(cls, patches)

    def attention_maps(self, images):
        """Per-layer self-attention maps, each of shape (..., heads, N+1, N+1)."""
        with no_tape():
            return self._run(images, return_attention=True)[1]

    def logits(self, images):
        if not self.config.num_classes:
            raise ConfigError("backbone has no classification head")
        outputs, _ = self._run(images)
        cls = outputs[-1][..., 0, :]
        return self.head(dn.layer_norm(cls, self.head_gain, self.head_bias))

    def save_weights(self, path):
        tensors = {"meta.vit_config": self.config.as_vector()}
        tensors.update(self.state_dict())
        save_tensors(path, tensors)

    def load_weights(self, path):
        self.load_state_dict(load_tensors(path))
        return self

    @classmethod
    def from_file(cls, path):
        tensors = load_tensors(path)
        if "meta.vit_config" not in tensors:
            raise MissingTensor("meta.vit_config")
        model = cls(VitConfig.from_vector(tensors["meta.vit_config"]))
        model.load_state_dict(tensors)
        return model


def train_backbone_supervised(model, images, labels, epochs=30, lr=1e-3, batch_size=64, rng=None, log=None):
    """Train the backbone and its CLS head with cross-entropy and Adam.

    ``labels`` must already be head indices in ``[0, num_classes)``.  Returns
    the training accuracy after the last epoch (percent).  ``batch_size=None``
    trains full-batch.
    """
    if model.frozen:
        raise FrozenModel("the backbone is frozen")
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise EmptyDataset("no training images")
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = Adam(model.parameters(), lr=lr)
    n = len(images)
    bs = n if batch_size is None else batch_size
    for epoch in range(epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        total = 0.0
        for lo in range(0, n, bs):
            idx = order[lo : lo + bs]
            opt.zero_grad()
            with Tape() as tape:
                loss = dn.cross_entropy(model.logits(images[idx]), labels[idx])
                tape.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        if log is not None:
            log(epoch, total / n)
    return backbone_accuracy(model, images, labels)


def backbone_accuracy(model, images, labels, batch_size=256):
    correct = 0
    with no_tape():
        for lo in range(0, len(images), batch_size):
            pred = model.logits(images[lo : lo + batch_size]).data.argmax(axis=-1)
            correct += int((pred == labels[lo : lo + batch_size]).sum())
    return 100.0 * correct / max(len(images), 1)
