"""Per-sample decision traces of a trained TSK student.

A trace lists, for every rule, the membership of each feature dimension,
the normalized firing strength and the rule's class scores, followed by
the firing-weighted logits and final class distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .pca import PcaTransform
from .tsk import TskModel, forward

SCHEMA = "fuzzdistill.explanation"
SCHEMA_VERSION = 1
TEXT_HEADER_LINES = 2
TEXT_SUMMARY_LINES = 2

FASHION_CLASSES = (
    "T-shirt/top", "Trouser", "Pullover", "Dress", "Coat",
    "Sandal", "Shirt", "Sneaker", "Bag", "Ankle boot",
)


@dataclass(frozen=True)
class RuleExplanation:
    index: int
    memberships: tuple
    log_memberships: tuple
    log_firing: float
    firing: float
    scores: tuple
    top_dims: tuple  # dimensions with the smallest membership, weakest first

    def to_dict(self):
        return {
            "index": self.index,
            "memberships": list(self.memberships),
            "log_memberships": list(self.log_memberships),
            "log_firing": self.log_firing,
            "firing": self.firing,
            "scores": list(self.scores),
            "top_dims": list(self.top_dims),
        }


@dataclass(frozen=True)
class ExplanationTrace:
    sample_id: object
    features: tuple
    rules: tuple
    logits: tuple
    probabilities: tuple
    predicted_class: int
    class_names: tuple | None = None

    def recombined_logits(self):
        return sum(np.asarray(r.scores) * r.firing for r in self.rules)

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "version": SCHEMA_VERSION,
            "sample_id": self.sample_id,
            "features": list(self.features),
            "rules": [r.to_dict() for r in self.rules],
            "logits": list(self.logits),
            "probabilities": list(self.probabilities),
            "predicted_class": self.predicted_class,
            "class_names": list(self.class_names) if self.class_names else None,
        }


def _floats(a):
    return tuple(float(v) for v in np.asarray(a).ravel())


def explain_features(model: TskModel, features, sample_id=None, top_k=3, class_names=None):
    trace = forward(model, features)
    k = min(top_k, model.n_inputs)
    rules = []
    for r in range(model.n_rules):
        log_mu = trace.log_memberships[r]
        # stable sort keeps the lower dimension index first on ties
        weakest = np.argsort(log_mu, kind="stable")[:k]
        rules.append(RuleExplanation(
            index=r,
            memberships=_floats(np.exp(log_mu)),
            log_memberships=_floats(log_mu),
            log_firing=float(trace.log_firing[r]),
            firing=float(trace.norm_firing[r]),
            scores=_floats(trace.rule_outputs[r]),
            top_dims=tuple(int(d) for d in weakest),
        ))
    return ExplanationTrace(
        sample_id=sample_id,
        features=_floats(trace.x),
        rules=tuple(rules),
        logits=_floats(trace.logits),
        probabilities=_floats(trace.probs),
        predicted_class=int(np.argmax(trace.logits)),
        class_names=tuple(class_names) if class_names else None,
    )


def explain_sample(model: TskModel, pca: PcaTransform | None, raw_image, sample_id=None,
                   top_k=3, class_names=None) -> ExplanationTrace:
    """Trace the decision for one flattened image (or a feature vector when ``pca`` is None)."""
    x = np.asarray(raw_image, dtype=np.float64).ravel()
    if pca is not None:
        if pca.n_components != model.n_inputs:
            raise DimensionError(
                f"PCA yields {pca.n_components} features, model takes {model.n_inputs}"
            )
        x = pca.transform(x)
    return explain_features(model, x, sample_id, top_k, class_names)


def trace_from_dict(doc) -> ExplanationTrace:
    rules = tuple(
        RuleExplanation(
            index=r["index"],
            memberships=tuple(r["memberships"]),
            log_memberships=tuple(r["log_memberships"]),
            log_firing=r["log_firing"],
            firing=r["firing"],
            scores=tuple(r["scores"]),
            top_dims=tuple(r["top_dims"]),
        )
        for r in doc["rules"]
    )
    names = doc.get("class_names")
    return ExplanationTrace(
        sample_id=doc["sample_id"],
        features=tuple(doc["features"]),
        rules=rules,
        logits=tuple(doc["logits"]),
        probabilities=tuple(doc["probabilities"]),
        predicted_class=doc["predicted_class"],
        class_names=tuple(names) if names else None,
    )


def _label(trace, c):
    return trace.class_names[c] if trace.class_names else str(c)


def render_report(trace: ExplanationTrace, fmt="json") -> str:
    if fmt == "json":
        return json.dumps(trace.to_dict(), indent=2)
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")

    n_classes = len(trace.logits)
    width = max(8, *(len(_label(trace, c)) for c in range(n_classes)))
    head = "".join(f"{_label(trace, c):>{width}}" for c in range(n_classes))
    lines = [
        f"sample {trace.sample_id}: {len(trace.rules)} rules x {len(trace.features)} dims, "
        f"predicted {_label(trace, trace.predicted_class)}",
        f"{'rule':>4} {'firing':>9} {'log f':>10}  {'weakest dims (mu)':<36}{head}",
    ]
    for r in trace.rules:
        dims = " ".join(f"{d}({r.memberships[d]:.2f})" for d in r.top_dims)
        scores = "".join(f"{s:>{width}.3f}" for s in r.scores)
        lines.append(f"{r.index:>4} {r.firing:>9.4f} {r.log_firing:>10.3f}  {dims:<36}{scores}")
    lines.append(f"{'logits':<63}" + "".join(f"{v:>{width}.3f}" for v in trace.logits))
    lines.append(f"{'probs':<63}" + "".join(f"{v:>{width}.4f}" for v in trace.probabilities))
    return "\n".join(lines) + "\n"
