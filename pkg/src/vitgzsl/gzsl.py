"""Softmax classification over seen and unseen classes, and GZSL metrics."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from .dataset import TaintAudit
from .diffnum import Adam, Tape
from .errors import DimMismatch, EmptyClass, MissingClass, OutOfRange
from .layers import Linear, Module


class SoftmaxClassifier(Module):
    """One linear layer over ``classes`` (global ids, in row order)."""

    def __init__(self, feature_dim, classes, dtype=np.float32):
        self.classes = np.asarray(classes, dtype=np.int64)
        self.linear = Linear(feature_dim, len(self.classes), None, "zeros", dtype=dtype)

    @property
    def feature_dim(self):
        return self.linear.n_in

    def logits(self, x):
        return self.linear(x)

    def probabilities(self, x):
        with dn.no_tape():
            return dn.softmax_rows(self.logits(np.asarray(x, dtype=np.float64))).data

    def predict(self, x):
        with dn.no_tape():
            z = self.logits(np.asarray(x, dtype=np.float64)).data
        return self.classes[z.argmax(axis=-1)]

    def row_index(self, labels):
        lookup = {int(c): i for i, c in enumerate(self.classes)}
        return np.array([lookup[int(l)] for l in labels], dtype=np.int64)


def train_classifier(
    seen_features,
    seen_labels,
    synth_features,
    synth_labels,
    classes,
    epochs=500,
    lr=1e-3,
    seen_tags=None,
    audit=None,
    log=None,
):
    """Full-batch Adam on the cross-entropy of real seen rows plus generated
    unseen rows.  Every class in ``classes`` needs at least one row."""
    seen_features = np.asarray(seen_features, dtype=np.float64)
    synth_features = np.asarray(synth_features, dtype=np.float64)
    if synth_features.size == 0:
        synth_features = synth_features.reshape(0, seen_features.shape[1])
    if synth_features.shape[1] != seen_features.shape[1]:
        raise DimMismatch(f"seen features have width {seen_features.shape[1]}, synthetic {synth_features.shape[1]}")
    if seen_tags is not None:
        (audit or TaintAudit()).admit("classifier", seen_tags)
    x = np.concatenate([seen_features, synth_features])
    y = np.concatenate([np.asarray(seen_labels), np.asarray(synth_labels)]).astype(np.int64)
    classes = np.asarray(classes, dtype=np.int64)
    missing = np.setdiff1d(classes, y)
    if missing.size:
        raise MissingClass(f"no training rows for classes {missing.tolist()}")
    model = SoftmaxClassifier(x.shape[1], classes)
    idx = model.row_index(y)
    opt = Adam(model.parameters(), lr=lr)
    for epoch in range(epochs):
        opt.zero_grad()
        with Tape() as tape:
            loss = dn.cross_entropy(model.logits(x), idx)
            tape.backward(loss)
        opt.step()
        if log is not None:
            log(epoch, loss.item())
    return model


def per_class_top1(preds, labels, class_set):
    """Mean over ``class_set`` of within-class accuracy, in percent."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    accs = []
    for c in class_set:
        mask = labels == c
        if not mask.any():
            raise EmptyClass(f"class {c} has no evaluation samples")
        accs.append(np.mean(preds[mask] == c))
    return 100.0 * float(np.mean(accs)) if accs else 0.0


def harmonic_mean(acc_s, acc_u):
    for v in (acc_s, acc_u):
        if not 0.0 <= v <= 100.0:
            raise OutOfRange(f"accuracy {v} outside [0, 100]")
    if acc_s + acc_u == 0:
        return 0.0
    return 2.0 * acc_s * acc_u / (acc_s + acc_u)


@dataclass
class GzslReport:
    acc_s: float
    acc_u: float
    acc_h: float
    per_class: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, acc_s, acc_u, **kwargs):
        return cls(acc_s, acc_u, harmonic_mean(acc_s, acc_u), **kwargs)

    def to_csv(self):
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["section", "key", "value"])
        for key in ("acc_s", "acc_u", "acc_h"):
            w.writerow(["summary", key, f"{getattr(self, key):.6f}"])
        for key, value in self.confusion.items():
            w.writerow(["confusion", key, value])
        for cid in sorted(self.per_class):
            w.writerow(["class", cid, f"{self.per_class[cid]:.6f}"])
        return out.getvalue()

    def format_text(self):
        lines = [f"acc_s = {self.acc_s:6.2f}   acc_u = {self.acc_u:6.2f}   acc_h = {self.acc_h:6.2f}"]
        if self.confusion:
            lines.append("  ".join(f"{k}={v}" for k, v in self.confusion.items()))
        return "\n".join(lines)


def evaluate(classifier, features, labels, seen_classes, unseen_classes):
    """GZSL report for test rows; predictions range over all classes."""
    labels = np.asarray(labels)
    preds = classifier.predict(features)
    seen_set, unseen_set = set(np.asarray(seen_classes).tolist()), set(np.asarray(unseen_classes).tolist())
    s_mask = np.isin(labels, list(seen_set))
    u_mask = np.isin(labels, list(unseen_set))
    acc_s = per_class_top1(preds[s_mask], labels[s_mask], sorted(seen_set))
    acc_u = per_class_top1(preds[u_mask], labels[u_mask], sorted(unseen_set))
    per_class = {int(c): 100.0 * float(np.mean(preds[labels == c] == c)) for c in sorted(seen_set | unseen_set)}
    pred_seen = np.isin(preds, list(seen_set))
    confusion = {
        "seen_as_seen": int((s_mask & pred_seen).sum()),
        "seen_as_unseen": int((s_mask & ~pred_seen).sum()),
        "unseen_as_seen": int((u_mask & pred_seen).sum()),
        "unseen_as_unseen": int((u_mask & ~pred_seen).sum()),
    }
    return GzslReport.from_accuracies(acc_s, acc_u, per_class=per_class, confusion=confusion)
