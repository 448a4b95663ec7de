"""Conversation corpora: typed records, format adapters and split statistics.

Every adapter normalizes into the same line-delimited JSON record shape::

    {"conversation_id": "...", "index": 0, "speaker": "...", "text": "...", "emotion": "joy"}

``emotion`` may be absent for unlabeled inference data.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .errors import ConfigurationError, EmptyLabelsError, MalformedDatasetError

logger = logging.getLogger(__name__)

ADAPTERS = ("meld-csv", "emorynlp-json", "generic-jsonl")
SPLITS = ("train", "validation", "test")

MELD_LABELS = ("neutral", "surprise", "fear", "sadness", "joy", "disgust", "anger")
EMORYNLP_LABELS = ("neutral", "joyful", "peaceful", "powerful", "scared", "mad", "sad")


def normalize_emotion(raw: Optional[str]) -> Optional[str]:
    if raw is None:
        return None
    value = str(raw).strip().lower()
    return value or None


@dataclass(frozen=True)
class Utterance:
    conversation_id: str
    index: int
    speaker: str
    text: str
    emotion: Optional[str] = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise MalformedDatasetError(
                self.conversation_id, f"utterance {self.index} has empty text"
            )

    @property
    def uid(self) -> str:
        return f"{self.conversation_id}#{self.index}"

    def to_record(self) -> dict:
        record = {
            "conversation_id": self.conversation_id,
            "index": self.index,
            "speaker": self.speaker,
            "text": self.text,
        }
        if self.emotion is not None:
            record["emotion"] = self.emotion
        return record


@dataclass(frozen=True)
class Conversation:
    id: str
    utterances: tuple

    def __post_init__(self):
        if not self.utterances:
            raise MalformedDatasetError(self.id, "conversation has no utterances")
        indices = [u.index for u in self.utterances]
        if indices != list(range(len(indices))):
            raise MalformedDatasetError(
                self.id, f"utterance indices must be 0..{len(indices) - 1} contiguous, got {indices}"
            )
        for u in self.utterances:
            if u.conversation_id != self.id:
                raise MalformedDatasetError(
                    self.id, f"utterance {u.index} belongs to {u.conversation_id!r}"
                )

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)


@dataclass(frozen=True)
class Corpus:
    conversations: tuple
    label_set: tuple
    split_tag: str = "train"

    def __post_init__(self):
        if self.split_tag not in SPLITS:
            raise ConfigurationError(f"split_tag must be one of {SPLITS}, got {self.split_tag!r}")
        if len(set(self.label_set)) != len(self.label_set):
            raise ConfigurationError(f"label_set has duplicates: {self.label_set}")
        known = set(self.label_set)
        for conv in self.conversations:
            for u in conv.utterances:
                if u.emotion is not None and u.emotion not in known:
                    raise MalformedDatasetError(
                        conv.id, f"utterance {u.index} has label {u.emotion!r} outside {self.label_set}"
                    )

    @property
    def num_utterances(self) -> int:
        return sum(len(c) for c in self.conversations)

    def utterances(self):
        for conv in self.conversations:
            yield from conv.utterances

    def get(self, conversation_id: str) -> Conversation:
        for conv in self.conversations:
            if conv.id == conversation_id:
                return conv
        raise KeyError(conversation_id)

    def with_label_set(self, labels: Sequence[str]) -> "Corpus":
        return Corpus(self.conversations, tuple(labels), self.split_tag)


def _derive_labels(utterances: Iterable[Utterance]) -> tuple:
    seen = OrderedDict()
    for u in utterances:
        if u.emotion is not None:
            seen.setdefault(u.emotion, None)
    return tuple(seen)


def build_corpus(
    records: Iterable[Mapping],
    split_tag: str = "train",
    label_set: Optional[Sequence[str]] = None,
    renumber: bool = False,
) -> Corpus:
    """Group flat utterance records into a :class:`Corpus`.

    Conversations keep first-seen order; utterances are sorted by index.
    With ``renumber`` the (unique) source indices are compacted to 0..L-1,
    otherwise any gap is a :class:`MalformedDatasetError`.
    """
    grouped: "OrderedDict[str, dict]" = OrderedDict()
    for rec in records:
        cid = str(rec["conversation_id"])
        idx = int(rec["index"])
        bucket = grouped.setdefault(cid, {})
        if idx in bucket:
            raise MalformedDatasetError(cid, f"duplicate utterance index {idx}")
        bucket[idx] = rec

    conversations = []
    for cid, bucket in grouped.items():
        ordered = [bucket[i] for i in sorted(bucket)]
        if renumber and sorted(bucket) != list(range(len(bucket))):
            logger.warning("conversation %s: source indices %s renumbered", cid, sorted(bucket))
        utts = []
        for pos, rec in enumerate(ordered):
            utts.append(
                Utterance(
                    conversation_id=cid,
                    index=pos if renumber else int(rec["index"]),
                    speaker=str(rec.get("speaker", "") or ""),
                    text=str(rec["text"]),
                    emotion=normalize_emotion(rec.get("emotion")),
                )
            )
        conversations.append(Conversation(cid, tuple(utts)))

    if label_set is None:
        labels = _derive_labels(u for c in conversations for u in c.utterances)
    else:
        labels = tuple(label_set)
    return Corpus(tuple(conversations), labels, split_tag)


def _read_generic_jsonl(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedDatasetError("?", f"{path}:{lineno}: invalid JSON ({exc})") from None
            missing = {"conversation_id", "index", "text"} - set(rec)
            if missing:
                raise MalformedDatasetError(
                    str(rec.get("conversation_id", "?")), f"{path}:{lineno}: missing keys {sorted(missing)}"
                )
            yield rec


EMPTY_TEXT_PLACEHOLDER = "..."


def _source_text(raw, cid, idx) -> str:
    # release files contain a few blank transcripts; keep the row so split counts stay intact
    text = (raw or "").strip()
    if not text:
        logger.warning("conversation %s utterance %s: empty text replaced by %r", cid, idx, EMPTY_TEXT_PLACEHOLDER)
        return EMPTY_TEXT_PLACEHOLDER
    return text


def _read_meld_csv(path: Path):
    # MELD ships cp1252 punctuation inside nominally UTF-8 files
    with open(path, encoding="utf-8", errors="replace", newline="") as fh:
        for row in csv.DictReader(fh):
            yield {
                "conversation_id": row["Dialogue_ID"].strip(),
                "index": int(row["Utterance_ID"]),
                "speaker": row.get("Speaker", "").strip(),
                "text": _source_text(row["Utterance"], row["Dialogue_ID"], row["Utterance_ID"]),
                "emotion": row.get("Emotion"),
            }


def _read_emorynlp_json(path: Path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    for episode in data["episodes"]:
        for scene in episode["scenes"]:
            for idx, utt in enumerate(scene["utterances"]):
                yield {
                    "conversation_id": scene["scene_id"],
                    "index": idx,
                    "speaker": ", ".join(utt.get("speakers") or []),
                    "text": _source_text(utt.get("transcript"), scene["scene_id"], idx),
                    "emotion": utt.get("emotion"),
                }


def infer_split(path: Path) -> str:
    name = path.name.lower()
    if "test" in name or "tst" in name:
        return "test"
    if "dev" in name or "val" in name:
        return "validation"
    return "train"


def load_dataset(
    path,
    adapter: str = "generic-jsonl",
    split_tag: Optional[str] = None,
    label_set: Optional[Sequence[str]] = None,
) -> Corpus:
    """Load one split from disk.

    ``split_tag`` defaults to a guess from the file name. ``label_set`` pins
    the category order (use :func:`shared_label_set` to align splits).
    """
    if adapter not in ADAPTERS:
        raise ConfigurationError(f"unknown dataset adapter {adapter!r}; expected one of {ADAPTERS}")
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"dataset path does not exist: {path}")
    split = split_tag or infer_split(path)
    if adapter == "generic-jsonl":
        return build_corpus(_read_generic_jsonl(path), split, label_set)
    if adapter == "meld-csv":
        return build_corpus(_read_meld_csv(path), split, label_set, renumber=True)
    return build_corpus(_read_emorynlp_json(path), split, label_set)


def save_jsonl(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in corpus.utterances():
            fh.write(json.dumps(u.to_record(), ensure_ascii=False) + "\n")


def label_set(corpus: Corpus) -> tuple:
    labels = _derive_labels(corpus.utterances())
    if not labels:
        raise EmptyLabelsError(f"{corpus.split_tag} corpus has no labeled utterances")
    # a pinned label_set (e.g. aligned across splits) wins over first-seen order
    return tuple(corpus.label_set) if corpus.label_set else labels


def shared_label_set(splits: Mapping[str, Corpus]) -> tuple:
    """Label order derived from non-test splits; labels seen only in test are rejected."""
    ordered = OrderedDict()
    for tag in ("train", "validation"):
        if tag in splits:
            for lab in _derive_labels(splits[tag].utterances()):
                ordered.setdefault(lab, None)
    if "test" in splits:
        test_only = [l for l in _derive_labels(splits["test"].utterances()) if l not in ordered]
        if ordered and test_only:
            raise MalformedDatasetError("*", f"labels {test_only} occur only in the test split")
        for lab in test_only:
            ordered.setdefault(lab, None)
    if not ordered:
        raise EmptyLabelsError("no labeled utterances in any split")
    return tuple(ordered)


def align_splits(splits: Mapping[str, Corpus]) -> dict:
    labels = shared_label_set(splits)
    return {tag: c.with_label_set(labels) for tag, c in splits.items()}


def split_counts(corpus_set: Mapping[str, Corpus]) -> dict:
    if not corpus_set:
        raise ConfigurationError("split_counts needs at least one split")
    report = {}
    for tag in SPLITS:
        if tag in corpus_set:
            c = corpus_set[tag]
            report[tag] = {"conversations": len(c.conversations), "utterances": c.num_utterances}
    for tag, c in corpus_set.items():
        if tag not in report:
            report[tag] = {"conversations": len(c.conversations), "utterances": c.num_utterances}
    return report


def format_split_counts(report: Mapping[str, Mapping[str, int]], name: str = "") -> str:
    tags = list(report)
    head = ["dataset"] + [f"conv/{t}" for t in tags] + [f"utt/{t}" for t in tags]
    row = [name or "-"]
    row += [f"{report[t]['conversations']:,}" for t in tags]
    row += [f"{report[t]['utterances']:,}" for t in tags]
    return "\t".join(head) + "\n" + "\t".join(row)
