"""Support-weighted F1, per-category reports and model evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

from .errors import ConfigurationError, EmptyLabelsError


def _check_pairs(predictions: Sequence, golds: Sequence) -> None:
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions for {len(golds)} gold labels")
    if not golds:
        raise ValueError("need at least one prediction/gold pair")


def per_class_metrics(predictions: Sequence[str], golds: Sequence[str], labels: Optional[Sequence[str]] = None) -> Dict[str, dict]:
    """Precision/recall/F1/support per category; zero denominators give 0."""
    _check_pairs(predictions, golds)
    if labels is None:
        labels = list(dict.fromkeys(list(golds) + list(predictions)))
    tp = {l: 0 for l in labels}
    pred_n = {l: 0 for l in labels}
    gold_n = {l: 0 for l in labels}
    for p, g in zip(predictions, golds):
        if p in pred_n:
            pred_n[p] += 1
        if g in gold_n:
            gold_n[g] += 1
        if p == g and g in tp:
            tp[g] += 1
    out = {}
    for l in labels:
        precision = tp[l] / pred_n[l] if pred_n[l] else 0.0
        recall = tp[l] / gold_n[l] if gold_n[l] else 0.0
        # 2PR/(P+R) in count form; exact for small hand cases
        f1 = 2 * tp[l] / (pred_n[l] + gold_n[l]) if tp[l] else 0.0
        out[l] = {"precision": precision, "recall": recall, "f1": f1, "support": gold_n[l]}
    return out


def weighted_f1(predictions: Sequence[str], golds: Sequence[str]) -> float:
    """Sum_m N_m * F1(m) / Sum_m N_m with N_m the gold support of category m."""
    stats = per_class_metrics(predictions, golds)
    total = sum(s["support"] for s in stats.values())
    return sum(s["support"] * s["f1"] for s in stats.values()) / total


def confusion_matrix(predictions: Sequence[str], golds: Sequence[str], labels: Sequence[str]) -> List[List[int]]:
    """Rows are gold categories, columns predictions."""
    pos = {l: i for i, l in enumerate(labels)}
    mat = [[0] * len(labels) for _ in labels]
    for p, g in zip(predictions, golds):
        if g in pos and p in pos:
            mat[pos[g]][pos[p]] += 1
    return mat


@dataclass
class EvalReport:
    weighted_f1: float
    per_class: Dict[str, dict]
    confusion: List[List[int]]
    labels: List[str]
    config: dict = field(default_factory=dict)
    predictions: List[str] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, predictions, golds, labels, config=None) -> "EvalReport":
        labels = list(labels)
        stats = per_class_metrics(predictions, golds, labels)
        total = sum(s["support"] for s in stats.values())
        wf1 = sum(s["support"] * s["f1"] for s in stats.values()) / total if total else 0.0
        return cls(
            weighted_f1=wf1,
            per_class=stats,
            confusion=confusion_matrix(predictions, golds, labels),
            labels=labels,
            config=dict(config or {}),
            predictions=list(predictions),
        )

    @property
    def accuracy(self) -> float:
        total = sum(map(sum, self.confusion))
        return sum(self.confusion[i][i] for i in range(len(self.labels))) / total if total else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvalReport":
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def per_class_table(self) -> str:
        """Per-category F1 next to sample count and share, largest category first."""
        total = sum(s["support"] for s in self.per_class.values()) or 1
        rows = sorted(self.labels, key=lambda l: -self.per_class[l]["support"])
        lines = ["category\tsupport\tshare\tprecision\trecall\tf1"]
        for l in rows:
            s = self.per_class[l]
            lines.append(
                f"{l}\t{s['support']}\t{s['support'] / total:.2%}\t{s['precision']:.4f}\t{s['recall']:.4f}\t{s['f1']:.4f}"
            )
        lines.append(f"weighted-F1\t{total}\t100.00%\t\t\t{self.weighted_f1:.4f}")
        return "\n".join(lines)


def evaluate(model, corpus, features: Mapping, config: Optional[Mapping] = None, classify_mode: str = "restricted") -> EvalReport:
    """Run restricted-mode inference over a labeled corpus.

    ``features`` maps conversation id to :class:`ConversationFeatures`.
    """
    golds = [u.emotion for u in corpus.utterances()]
    if not golds or any(g is None for g in golds):
        raise EmptyLabelsError(f"{corpus.split_tag} corpus must be fully labeled for evaluation")
    predictions = []
    for conv in corpus.conversations:
        if conv.id not in features:
            raise ConfigurationError(f"no features for conversation {conv.id!r}")
        predictions.extend(model.predict(conv, features[conv.id], classify_mode))
    return EvalReport.from_predictions(predictions, golds, corpus.label_set, config)
