"""Command-line front end: ``vitgzsl <subcommand> ...``.

Every subcommand accepts ``--config FILE`` (``key = value`` lines) and the
global ``--seed``.  Settings resolve as CLI flag > config file > default.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

import argparse
import logging
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import dataset as dsm
from .aam import export_attention
from .config import load_config, merge
from .dataset import SEEN_TRAIN, GzslDataset, load_features, save_features, spec_from_mapping
from .errors import DataError, UsageError, VitGzslError
from .f2a import make_one_hot_attribute
from .pipeline import (
    BackboneConfig,
    GzslPipeline,
    PipelineConfig,
    layer_sweep,
    load_classifier,
    load_cvae,
    load_extractor,
    save_classifier,
    save_cvae,
    save_extractor,
    sweep_csv,
    train_backbone,
)
from .vit import VisionTransformer
from .weightfile import atomic_write

log = logging.getLogger("vitgzsl")

_PIPELINE_KEYS = {f.name for f in fields(PipelineConfig)}
_BACKBONE_KEYS = {f.name for f in fields(BackboneConfig)}


def _settings(args, **cli):
    """Merge defaults, the config file and CLI overrides into the two configs."""
    file_values = load_config(args.config, _PIPELINE_KEYS | _BACKBONE_KEYS) if args.config else {}
    cli["seed"] = args.seed
    values = merge({}, file_values, cli)
    pipe = PipelineConfig.from_mapping({k: v for k, v in values.items() if k in _PIPELINE_KEYS})
    backbone = BackboneConfig.from_mapping({k: v for k, v in values.items() if k in _BACKBONE_KEYS})
    return pipe, backbone


def _load_data(path):
    ds = GzslDataset.load(path)
    ds.validate()
    return ds


def _load_backbone(path, ds, backbone_cfg, seed):
    if path:
        model = VisionTransformer.from_file(path)
        model.freeze()
        return model
    log.info("no --backbone given; training one from scratch")
    model, _ = train_backbone(ds, backbone_cfg, seed)
    return model


def _write_text(path, text):
    atomic_write(path, text.encode("utf-8"))


def _layers(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad layer list {text!r}") from None


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args):
    values = load_config(args.spec) if args.spec else {}
    if args.seed is not None:
        values["seed"] = args.seed
    spec = spec_from_mapping(values)
    ds = dsm.generate(spec, np.random.default_rng(spec.seed))
    ds.save(args.out)
    rows = ["attribute," + ",".join(f"patch_{j}" for j in range(ds.attribute_patches.shape[1]))]
    rows += [f"{k}," + ",".join(str(int(v)) for v in m) for k, m in enumerate(ds.attribute_patches)]
    _write_text(os.path.join(args.out, "masks.csv"), "\n".join(rows) + "\n")
    print(f"wrote {len(ds.labels)} images, {ds.num_classes} classes to {args.out}")


def cmd_train_backbone(args):
    pipe, bcfg = _settings(args)
    ds = _load_data(args.data)
    model, acc = train_backbone(ds, bcfg, pipe.seed)
    model.save_weights(args.out)
    print(f"backbone training accuracy {acc:.2f}%")


def cmd_train_aam(args):
    pipe, bcfg = _settings(args, cls_layer=args.cls_layer, aam_layer=args.aam_layer, use_mse=args.use_mse)
    ds = _load_data(args.data)
    p = GzslPipeline(ds, _load_backbone(args.backbone, ds, bcfg, pipe.seed), replace(pipe, variant="cls+aam"))
    ext = p.train_extractor()
    save_extractor(args.out, ext, p.config)
    loss, mse, ce = p.extractor_history[-1]
    print(f"final loss {loss:.4f} (mse {mse:.4f}, ce {ce:.4f})")


def cmd_train_cvae(args):
    pipe, bcfg = _settings(args, variant=args.variant)
    ds = _load_data(args.data)
    p = GzslPipeline(ds, _load_backbone(args.backbone, ds, bcfg, pipe.seed), pipe)
    if args.aam:
        p.extractor, (cls_layer, aam_layer) = load_extractor(args.aam)
        p.config = _with_layers(pipe, args, cls_layer, aam_layer)
    store = p.assemble()
    save_features(args.features, store.features, store.labels, store.tags)
    p.train_generator()
    save_cvae(args.out, p.cvae)
    loss, recon, kl = p.cvae_history[-1]
    print(f"final elbo loss {loss:.4f} (recon {recon:.4f}, kl {kl:.4f})")


def _with_layers(pipe, args, cls_layer, aam_layer):
    """Layers stored with the extractor apply unless given on the command line."""
    return replace(
        pipe,
        cls_layer=args.cls_layer if args.cls_layer is not None else cls_layer,
        aam_layer=args.aam_layer if args.aam_layer is not None else aam_layer,
    )


def cmd_train_classifier(args):
    pipe, _ = _settings(args)
    ds = _load_data(args.data)
    p = GzslPipeline(ds, None, pipe)
    p.real = load_features(args.features)
    p.cvae = load_cvae(args.cvae)
    p.synthesize()
    clf = p.train_classifier()
    save_classifier(args.out, clf)
    print(f"classifier trained on {len(p.real.select(SEEN_TRAIN))} real and {len(p.synthetic)} synthetic rows")


def _emit_report(report, path):
    print(report.format_text())
    if path:
        _write_text(path, report.to_csv())


def cmd_eval(args):
    pipe, _ = _settings(args)
    ds = _load_data(args.data)
    p = GzslPipeline(ds, None, pipe)
    p.real = load_features(args.features)
    p.classifier = load_classifier(args.classifier)
    _emit_report(p.evaluate(), args.report)


def cmd_run_all(args):
    pipe, bcfg = _settings(
        args,
        variant=args.variant,
        cls_layer=args.cls_layer,
        aam_layer=args.aam_layer,
        use_mse=args.use_mse,
        l2norm=args.l2norm,
    )
    ds = _load_data(args.data)
    report = GzslPipeline(ds, _load_backbone(args.backbone, ds, bcfg, pipe.seed), pipe).run()
    _emit_report(report, args.report)


def cmd_sweep_layers(args):
    pipe, bcfg = _settings(args, l2norm=args.l2norm, use_mse=args.use_mse)
    ds = _load_data(args.data)
    backbone = _load_backbone(args.backbone, ds, bcfg, pipe.seed)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = layer_sweep(ds, backbone, _layers(args.layers), variants, pipe)
    text = sweep_csv(rows)
    _write_text(args.out, text)
    print(text, end="")


def _attention_inputs(args):
    pipe, bcfg = _settings(args)
    ds = _load_data(args.data)
    backbone = _load_backbone(args.backbone, ds, bcfg, pipe.seed)
    ext, (cls_layer, aam_layer) = load_extractor(args.aam)
    return ds, backbone, ext, cls_layer, aam_layer


def _image_features(backbone, ds, index, cls_layer, aam_layer):
    if not 0 <= index < len(ds.labels):
        raise DataError(f"image index {index} outside [0, {len(ds.labels)})")
    feats = backbone.forward_all_layers(ds.images[index : index + 1])
    return feats.layer(cls_layer)[0][0], feats.layer(aam_layer)[1][0]


def _query(spec, ds, label):
    if spec == "synthetic":
        return None
    if spec == "real":
        return ds.class_attributes[label]
    if spec.startswith("onehot:"):
        try:
            k = int(spec.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad query {spec!r}") from None
        return make_one_hot_attribute(k, ds.num_attributes).values
    raise UsageError(f"query must be real, synthetic or onehot:<k>, got {spec!r}")


def cmd_export_attention(args):
    ds, backbone, ext, cls_layer, aam_layer = _attention_inputs(args)
    cls, patches = _image_features(backbone, ds, args.image, cls_layer, aam_layer)
    amap = ext.attention(cls, patches, _query(args.query, ds, ds.labels[args.image]))
    for path in export_attention(amap, args.out):
        print(path)
    print(f"peak patch {int(amap.averaged.argmax())}")


def cmd_probe_onehot(args):
    ds, backbone, ext, cls_layer, aam_layer = _attention_inputs(args)
    if not 0 <= args.class_id < ds.num_classes:
        raise DataError(f"class {args.class_id} outside [0, {ds.num_classes})")
    if args.topk < 1:
        raise UsageError("--topk must be at least 1")
    index = int(np.flatnonzero(ds.labels == args.class_id)[0])
    cls, patches = _image_features(backbone, ds, index, cls_layer, aam_layer)
    strengths = ds.class_attributes[args.class_id]
    order = np.argsort(-strengths, kind="stable")[: args.topk]
    for k in order:
        amap = ext.attention(cls, patches, make_one_hot_attribute(int(k), ds.num_attributes).values)
        export_attention(amap, f"{args.out}_attr{k}")
        print(f"attr {k} strength {strengths[k]:.3f} peak patch {int(amap.averaged.argmax())}")


# -- parser --------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="vitgzsl", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="seed for every stage (default 0)")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, data=True):
        p = sub.add_parser(name, parents=[common], help=help_text)
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        p.set_defaults(func=func)
        return p

    def backbone_flag(p, required=False):
        p.add_argument("--backbone", "--backbone-weights", dest="backbone", required=required, help="VGZW backbone weights")

    def layer_flags(p):
        p.add_argument("--cls-layer", type=int, default=None)
        p.add_argument("--aam-layer", type=int, default=None)

    def mse_flag(p):
        p.add_argument("--no-mse", dest="use_mse", action="store_const", const=False, default=None, help="drop the F2A regression term")

    p = add("gen-data", cmd_gen_data, "generate a synthetic dataset", data=False)
    p.add_argument("--spec", help="key = value SyntheticSpec file")
    p.add_argument("--out", required=True)

    p = add("train-backbone", cmd_train_backbone, "train the mini ViT on seen classes")
    p.add_argument("--out", required=True)

    p = add("train-aam", cmd_train_aam, "train F2A and AAM jointly")
    backbone_flag(p)
    layer_flags(p)
    mse_flag(p)
    p.add_argument("--out", required=True)

    p = add("train-cvae", cmd_train_cvae, "assemble features and train the CVAE")
    backbone_flag(p)
    layer_flags(p)
    p.add_argument("--aam", help="trained extractor (needed for aam variants)")
    p.add_argument("--variant", default=None)
    p.add_argument("--features", required=True, help="VGZF feature store to write")
    p.add_argument("--out", required=True)

    p = add("train-classifier", cmd_train_classifier, "generate unseen features and fit the classifier")
    p.add_argument("--features", required=True)
    p.add_argument("--cvae", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "evaluate a classifier on the test rows of a feature store")
    p.add_argument("--features", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--report", help="write the report as CSV")

    p = add("run-all", cmd_run_all, "full protocol, prints the GZSL report")
    backbone_flag(p)
    layer_flags(p)
    mse_flag(p)
    p.add_argument("--variant", default=None, help="cls, avg, aam or cls+aam")
    p.add_argument("--l2norm", action="store_const", const=True, default=None)
    p.add_argument("--report", help="write the report as CSV")

    p = add("sweep-layers", cmd_sweep_layers, "run the protocol per (layer, variant)")
    backbone_flag(p)
    mse_flag(p)
    p.add_argument("--layers", required=True, help="comma list, e.g. 1,2,3,4")
    p.add_argument("--variants", default="cls,avg,aam,cls+aam")
    p.add_argument("--l2norm", action="store_const", const=True, default=None)
    p.add_argument("--out", required=True)

    p = add("export-attention", cmd_export_attention, "write PGM attention maps for one image")
    backbone_flag(p, required=True)
    p.add_argument("--aam", required=True)
    p.add_argument("--image", type=int, required=True)
    p.add_argument("--query", default="synthetic", help="real, synthetic or onehot:<k>")
    p.add_argument("--out", required=True, help="output path stem")

    p = add("probe-onehot", cmd_probe_onehot, "maps for the strongest attributes of a class")
    backbone_flag(p, required=True)
    p.add_argument("--aam", required=True)
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--out", required=True, help="output path stem")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except VitGzslError as exc:
        print(f"vitgzsl {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"vitgzsl {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
