"""End-to-end GZSL protocol on a frozen backbone, and the per-layer sweep."""

import csv
import io
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .aam import AttributeFeatureExtractor, train_attribute_extractor
from .cvae import ConditionalVAE, sample_unseen_features, train_cvae
from .dataset import SEEN_TEST, SEEN_TRAIN, SYNTHETIC, UNSEEN_TEST, FeatureStore, TaintAudit
from .errors import ConfigError, MissingTensor, NumericError
from .features import SHORT_NAMES, assemble, canonical_variant, needs_attention
from .gzsl import SoftmaxClassifier, evaluate, train_classifier
from .vit import VisionTransformer, VitConfig, train_backbone_supervised
from .weightfile import load_tensors, save_tensors

_STAGES = {"backbone": 0, "aam": 1, "cvae": 2, "sample": 3, "classifier": 4}


def stage_rng(seed, stage):
    return np.random.default_rng([int(seed), _STAGES[stage]])


def _parse_fields(cls, values, base):
    types = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        kind = types[key]
        if isinstance(raw, str):
            try:
                if kind in (bool, "bool"):
                    if raw.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                        raise ValueError(raw)
                    raw = raw.lower() in ("1", "true", "yes", "on")
                elif kind in (int, "int"):
                    raw = int(raw)
                elif kind in (float, "float"):
                    raw = float(raw)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw!r}") from None
        kwargs[key] = raw
    return replace(base or cls(), **kwargs)


@dataclass(frozen=True)
class BackboneConfig:
    """Backbone shape and supervised-training settings; image size and channel
    count come from the data."""

    patch_size: int = 8
    embed_dim: int = 32
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    backbone_epochs: int = 30
    backbone_lr: float = 1e-3
    backbone_batch: int = 64

    @classmethod
    def from_mapping(cls, values, base=None):
        return _parse_fields(cls, values, base)


def train_backbone(dataset, config=BackboneConfig(), seed=0, log=None):
    """Supervised training on seen-train images only; returns the frozen model
    and its training accuracy."""
    rows = dataset.split(SEEN_TRAIN)
    _, c, h, _ = dataset.images.shape
    vit_cfg = VitConfig(
        image_size=h,
        patch_size=config.patch_size,
        embed_dim=config.embed_dim,
        num_layers=config.num_layers,
        num_heads=config.num_heads,
        mlp_ratio=config.mlp_ratio,
        channels=c,
        num_classes=len(dataset.seen_classes),
    )
    rng = stage_rng(seed, "backbone")
    model = VisionTransformer(vit_cfg, rng)
    head = {int(k): i for i, k in enumerate(dataset.seen_classes)}
    labels = np.array([head[int(l)] for l in dataset.labels[rows]])
    acc = train_backbone_supervised(
        model,
        dataset.images[rows],
        labels,
        epochs=config.backbone_epochs,
        lr=config.backbone_lr,
        batch_size=config.backbone_batch,
        rng=rng,
        log=log,
    )
    model.freeze()
    return model, acc


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "cls+aam"
    cls_layer: int = 3
    aam_layer: int = 3
    l2norm: bool = False
    aam_heads: int = 2
    aam_dropout: float = 0.5
    aam_scale: str = "head"
    aam_epochs: int = 60
    aam_lr: float = 1e-3
    aam_batch: int = 64
    use_mse: bool = True
    mse_weight: float = 1.0
    cvae_hidden: int = 256
    cvae_latent: int = 16
    cvae_recon: str = "mean"
    cvae_epochs: int = 100
    cvae_lr: float = 1e-3
    cvae_batch: int = 64
    samples_per_unseen: int = 1000
    clf_epochs: int = 500
    clf_lr: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        canonical_variant(self.variant)
        if self.aam_scale not in ("head", "model"):
            raise ConfigError("aam_scale must be 'head' or 'model'")
        if self.cvae_recon not in ("sum", "mean"):
            raise ConfigError("cvae_recon must be 'sum' or 'mean'")

    @classmethod
    def from_mapping(cls, values, base=None):
        """Apply string values (config file or CLI) on top of ``base``."""
        return _parse_fields(cls, values, base)


class GzslPipeline:
    """Stage-by-stage protocol: attribute extractor (seen train only) ->
    assembled features -> CVAE (seen train only) -> unseen samples ->
    classifier -> evaluation on seen-test and unseen-test rows."""

    def __init__(self, dataset, backbone, config=PipelineConfig(), layer_features=None):
        self.dataset = dataset
        self.backbone = backbone
        self.config = config
        self.audit = TaintAudit()
        self._layer_features = layer_features
        self.extractor = None
        self.real = None
        self.cvae = None
        self.synthetic = None
        self.classifier = None
        self.report = None

    @property
    def layer_features(self):
        if self._layer_features is None:
            self._layer_features = self.backbone.forward_all_layers(self.dataset.images)
        return self._layer_features

    def _train_rows(self):
        return self.dataset.split(SEEN_TRAIN)

    def train_extractor(self):
        cfg, ds = self.config, self.dataset
        if not needs_attention(cfg.variant):
            return None
        rng = stage_rng(cfg.seed, "aam")
        feats = self.layer_features
        rows = self._train_rows()
        cls = feats.layer(cfg.cls_layer)[0][rows]
        patches = feats.layer(cfg.aam_layer)[1][rows]
        self.extractor = AttributeFeatureExtractor(
            cls.shape[-1],
            ds.num_attributes,
            ds.seen_classes,
            cfg.aam_heads,
            cfg.aam_dropout,
            cfg.aam_scale,
            rng=rng,
        )
        self.extractor_history = train_attribute_extractor(
            self.extractor,
            cls,
            patches,
            ds.labels[rows],
            ds.class_attributes,
            epochs=cfg.aam_epochs,
            lr=cfg.aam_lr,
            batch_size=cfg.aam_batch,
            use_mse=cfg.use_mse,
            rng=rng,
            tags=ds.tags[rows],
            audit=self.audit,
            mse_weight=cfg.mse_weight,
        )
        return self.extractor

    def assemble(self):
        """Feature rows for every real sample, tagged by split (float32)."""
        cfg, ds = self.config, self.dataset
        vec = assemble(self.layer_features, self.extractor, cfg.variant, cfg.cls_layer, cfg.aam_layer, cfg.l2norm).vector
        if not np.all(np.isfinite(vec)):
            raise NumericError("non-finite values in assembled features")
        self.real = FeatureStore(vec, ds.labels, ds.tags)
        return self.real

    def train_generator(self, store=None):
        cfg, ds = self.config, self.dataset
        store = self.real if store is None else store
        train = store.select(SEEN_TRAIN)
        rng = stage_rng(cfg.seed, "cvae")
        self.cvae = ConditionalVAE(store.features.shape[1], ds.num_attributes, cfg.cvae_hidden, cfg.cvae_latent, cfg.cvae_recon, rng=rng)
        self.cvae_history = train_cvae(
            self.cvae,
            train.features,
            ds.class_attributes[train.labels],
            train.labels,
            ds.seen_classes,
            epochs=cfg.cvae_epochs,
            lr=cfg.cvae_lr,
            batch_size=cfg.cvae_batch,
            rng=rng,
            tags=train.tags,
            audit=self.audit,
        )
        return self.cvae

    def synthesize(self):
        cfg, ds = self.config, self.dataset
        rng = stage_rng(cfg.seed, "sample")
        feats, labels = [], []
        for u in ds.unseen_classes:
            feats.append(sample_unseen_features(self.cvae, ds.class_attributes[u], cfg.samples_per_unseen, rng))
            labels.append(np.full(cfg.samples_per_unseen, u))
        feats = np.concatenate(feats)
        if not np.all(np.isfinite(feats)):
            raise NumericError("non-finite generated features")
        self.synthetic = FeatureStore(feats, np.concatenate(labels), np.full(len(feats), SYNTHETIC))
        return self.synthetic

    def train_classifier(self, real=None, synthetic=None):
        cfg, ds = self.config, self.dataset
        real = self.real if real is None else real
        synthetic = self.synthetic if synthetic is None else synthetic
        train = real.select(SEEN_TRAIN)
        self.audit.admit("classifier", np.concatenate([train.tags, synthetic.tags]))
        self.classifier = train_classifier(
            train.features,
            train.labels,
            synthetic.features,
            synthetic.labels,
            np.sort(np.concatenate([ds.seen_classes, ds.unseen_classes])),
            epochs=cfg.clf_epochs,
            lr=cfg.clf_lr,
        )
        return self.classifier

    def evaluate(self, store=None):
        store = self.real if store is None else store
        test = store.select(SEEN_TEST, UNSEEN_TEST)
        self.report = evaluate(self.classifier, test.features, test.labels, self.dataset.seen_classes, self.dataset.unseen_classes)
        return self.report

    def run(self):
        self.train_extractor()
        self.assemble()
        self.train_generator()
        self.synthesize()
        self.train_classifier()
        return self.evaluate()


def run_gzsl_protocol(dataset, backbone, config=PipelineConfig(), layer_features=None):
    return GzslPipeline(dataset, backbone, config, layer_features).run()


@dataclass
class SweepRow:
    layer: int
    variant: str
    acc_s: float
    acc_u: float
    acc_h: float


def layer_sweep(dataset, backbone, layers, variants, config=PipelineConfig(), layer_features=None):
    """Run the full protocol for each (layer, variant) cell, retraining every
    module from the same seed.  Both CLS and patch features come from
    ``layer``."""
    if layer_features is None:
        layer_features = backbone.forward_all_layers(dataset.images)
    rows = []
    for layer in layers:
        for variant in variants:
            cell = replace(config, variant=variant, cls_layer=layer, aam_layer=layer)
            report = run_gzsl_protocol(dataset, backbone, cell, layer_features)
            name = SHORT_NAMES[canonical_variant(variant)]
            rows.append(SweepRow(layer, name, report.acc_s, report.acc_u, report.acc_h))
    rows.sort(key=lambda r: (r.layer, r.variant))
    return rows


def sweep_csv(rows):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["layer", "variant", "acc_s", "acc_u", "acc_h"])
    for r in rows:
        w.writerow([r.layer, r.variant, f"{r.acc_s:.6f}", f"{r.acc_u:.6f}", f"{r.acc_h:.6f}"])
    return out.getvalue()


def best_by_variant(rows):
    """``{variant: row with the highest acc_h}``."""
    best = {}
    for r in rows:
        if r.variant not in best or r.acc_h > best[r.variant].acc_h:
            best[r.variant] = r
    return best


def config_dict(config):
    return asdict(config)


# -- module files ----------------------------------------------------------------
# Each trained module is stored as a VGZW weight file; the numbers needed to
# rebuild it live in ``meta.*`` tensors, which state-dict loading ignores.


def _require(tensors, name):
    if name not in tensors:
        raise MissingTensor(name)
    return tensors[name]


def save_extractor(path, extractor, config):
    meta = {
        "meta.shape": np.array([extractor.aam.dim, extractor.aam.query.n_in, extractor.f2a.fc1.n_out, extractor.aam.num_heads]),
        "meta.layers": np.array([config.cls_layer, config.aam_layer]),
        "meta.scale": np.array([1.0 if extractor.aam.scale == "head" else 0.0]),
        "meta.dropout": np.array([extractor.aam.dropout]),
        "meta.seen_classes": extractor.seen_classes,
    }
    save_tensors(path, {**meta, **extractor.state_dict()})


def load_extractor(path):
    """Returns ``(extractor, (cls_layer, aam_layer))``."""
    t = load_tensors(path)
    dim, attr_dim, hidden, heads = (int(round(v)) for v in _require(t, "meta.shape"))
    scale = "head" if _require(t, "meta.scale")[0] > 0.5 else "model"
    dropout = float(_require(t, "meta.dropout")[0])
    seen = np.rint(_require(t, "meta.seen_classes")).astype(np.int64)
    ext = AttributeFeatureExtractor(dim, attr_dim, seen, heads, dropout, scale, hidden)
    ext.load_state_dict(t)
    ext.trained = True
    layers = tuple(int(round(v)) for v in _require(t, "meta.layers"))
    return ext, layers


def save_cvae(path, cvae):
    meta = {
        "meta.shape": np.array([cvae.feature_dim, cvae.attr_dim, cvae.enc_hidden.n_out, cvae.latent_dim]),
        "meta.recon": np.array([1.0 if cvae.recon == "sum" else 0.0]),
    }
    save_tensors(path, {**meta, **cvae.state_dict()})


def load_cvae(path):
    t = load_tensors(path)
    feature_dim, attr_dim, hidden, latent = (int(round(v)) for v in _require(t, "meta.shape"))
    recon = "sum" if _require(t, "meta.recon")[0] > 0.5 else "mean"
    model = ConditionalVAE(feature_dim, attr_dim, hidden, latent, recon)
    model.load_state_dict(t)
    model.trained = True
    return model


def save_classifier(path, clf):
    save_tensors(path, {"meta.classes": clf.classes, **clf.state_dict()})


def load_classifier(path):
    t = load_tensors(path)
    classes = np.rint(_require(t, "meta.classes")).astype(np.int64)
    weight = _require(t, "linear.weight")
    clf = SoftmaxClassifier(weight.shape[0], classes)
    clf.load_state_dict(t)
    return clf
