"""Utterance-level feature extraction and the on-disk feature cache.

Two kinds of features are produced per utterance:

* a semantic vector, the mean of the first-position ([CLS]) hidden state
  over the last four encoder layers;
* nine commonsense vectors, one per ATOMIC relation, taken from a
  commonsense transformer fed ``text + relation``.

Backends are pluggable. :func:`reference_backend` gives hash-seeded
stand-ins so the whole pipeline runs without pretrained weights.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence
from urllib.parse import quote

import numpy as np
from filelock import FileLock

from .corpus import Conversation, Utterance
from .errors import BackendError, CacheMissError, ConfigurationError, CorruptCacheError, SchemaError

logger = logging.getLogger(__name__)

RELATIONS = (
    "xIntent",
    "xAttr",
    "xNeed",
    "xWant",
    "xEffect",
    "xReact",
    "oWant",
    "oEffect",
    "oReact",
)
SPEAKER_RELATIONS = RELATIONS[:6]
LISTENER_RELATIONS = RELATIONS[6:]
NUM_POOLED_LAYERS = 4

DEFAULT_SEMANTIC_DIM = 1024
DEFAULT_COMMONSENSE_DIM = 768


def stable_unit_vector(seed: int, key: str, dim: int) -> np.ndarray:
    """Unit-norm float64 vector that depends only on ``(seed, key, dim)``."""
    digest = hashlib.sha256(f"{seed}\x1f{key}".encode("utf-8")).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "little")))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def pool_last_layers(layer_vectors) -> np.ndarray:
    """Average the pooled-token vectors of the last four layers."""
    layers = np.asarray(layer_vectors, dtype=np.float64)
    if layers.ndim != 2 or layers.shape[0] != NUM_POOLED_LAYERS:
        raise ValueError(f"expected ({NUM_POOLED_LAYERS}, d) layer vectors, got {layers.shape}")
    return layers.mean(axis=0)


class SemanticBackend:
    """Produces the [CLS] vectors of the last four layers for ``[CLS] text [SEP]``."""

    name = "semantic"
    embedding_dim = DEFAULT_SEMANTIC_DIM

    def layer_vectors(self, utterance: Utterance) -> np.ndarray:
        raise NotImplementedError

    def layer_vectors_batch(self, utterances: Sequence[Utterance]) -> np.ndarray:
        return np.stack([self.layer_vectors(u) for u in utterances])


class CommonsenseBackend:
    """Produces the last-layer hidden state for ``text`` followed by a relation token."""

    name = "commonsense"
    embedding_dim = DEFAULT_COMMONSENSE_DIM
    relations = RELATIONS

    def encode(self, utterance: Utterance, relation: str) -> np.ndarray:
        raise NotImplementedError

    def encode_relations(self, utterance: Utterance) -> np.ndarray:
        return np.stack([self.encode(utterance, r) for r in RELATIONS])


def _truncate_words(text: str, limit: int, uid: str) -> str:
    words = text.split()
    if len(words) > limit:
        logger.warning("utterance %s: %d tokens truncated to %d", uid, len(words), limit)
        return " ".join(words[:limit])
    return text


class ReferenceSemanticBackend(SemanticBackend):
    """Hash-seeded stand-in for a pretrained encoder.

    Each of the four layer vectors is ``u + d_k`` where ``u`` is the unit
    vector for the text and the offsets ``d_k`` sum to zero, so the pooled
    mean is ``u`` itself.
    """

    def __init__(self, dim: int, seed: int = 0, max_length: int = 512):
        if dim < 1:
            raise ConfigurationError("reference backend dim must be >= 1")
        self.embedding_dim = dim
        self.seed = seed
        self.max_length = max_length
        self.name = f"reference-semantic(dim={dim},seed={seed})"

    def layer_vectors(self, utterance: Utterance) -> np.ndarray:
        text = _truncate_words(utterance.text, self.max_length - 2, utterance.uid)
        base = stable_unit_vector(self.seed, "sem\x1f" + text, self.embedding_dim)
        offsets = np.stack(
            [stable_unit_vector(self.seed, f"sem-layer{k}\x1f{text}", self.embedding_dim) for k in range(4)]
        )
        offsets = 0.1 * (offsets - offsets.mean(axis=0))
        return base + offsets


class ReferenceCommonsenseBackend(CommonsenseBackend):
    def __init__(self, dim: int, seed: int = 0, max_length: int = 512):
        if dim < 1:
            raise ConfigurationError("reference backend dim must be >= 1")
        self.embedding_dim = dim
        self.seed = seed
        self.max_length = max_length
        self.name = f"reference-commonsense(dim={dim},seed={seed})"

    def encode(self, utterance: Utterance, relation: str) -> np.ndarray:
        text = _truncate_words(utterance.text, self.max_length - 2, utterance.uid)
        return stable_unit_vector(self.seed, f"cs\x1f{text} {relation}", self.embedding_dim)


def reference_backend(dim: int, seed: int = 0, commonsense_dim: Optional[int] = None):
    """Return ``(semantic, commonsense)`` reference backends."""
    return (
        ReferenceSemanticBackend(dim, seed),
        ReferenceCommonsenseBackend(commonsense_dim or dim, seed),
    )


class PrecomputedCommonsenseBackend(CommonsenseBackend):
    """Serves commonsense vectors computed offline, keyed by ``conversation_id#index``.

    ``source`` is a mapping or an ``.npz`` path whose arrays are ``(9, d_c)``.
    """

    def __init__(self, source, name: str = "precomputed-commonsense"):
        if isinstance(source, (str, os.PathLike)):
            with np.load(source) as data:
                table = {k: np.asarray(data[k]) for k in data.files}
        else:
            table = {k: np.asarray(v) for k, v in source.items()}
        if not table:
            raise ConfigurationError("precomputed commonsense table is empty")
        dims = {v.shape for v in table.values()}
        if len(dims) != 1 or next(iter(dims))[0] != len(RELATIONS):
            raise SchemaError(f"precomputed commonsense arrays must share shape (9, d_c), got {dims}")
        self.table = table
        self.embedding_dim = next(iter(dims))[1]
        self.name = name

    def encode_relations(self, utterance: Utterance) -> np.ndarray:
        try:
            return self.table[utterance.uid]
        except KeyError:
            raise BackendError("no precomputed commonsense entry", utterance.conversation_id, utterance.index) from None

    def encode(self, utterance: Utterance, relation: str) -> np.ndarray:
        return self.encode_relations(utterance)[RELATIONS.index(relation)]


class HFSemanticBackend(SemanticBackend):
    """Pretrained encoder from ``transformers`` (e.g. ``roberta-large``), frozen."""

    def __init__(self, model_name_or_path: str, device: str = "cpu", max_length: Optional[int] = None):
        import torch
        from transformers import AutoModel, AutoTokenizer

        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(model_name_or_path)
        self.model = AutoModel.from_pretrained(model_name_or_path).to(device).eval()
        self.device = device
        self.max_length = max_length or self.tokenizer.model_max_length
        self.embedding_dim = self.model.config.hidden_size
        self.name = f"hf-semantic({model_name_or_path})"

    def layer_vectors_batch(self, utterances: Sequence[Utterance]) -> np.ndarray:
        torch = self._torch
        texts = [u.text for u in utterances]
        enc = self.tokenizer(texts, padding=True, truncation=False, return_tensors="pt")
        if enc["input_ids"].shape[1] > self.max_length:
            logger.warning("batch exceeds %d tokens; truncating", self.max_length)
            enc = self.tokenizer(
                texts, padding=True, truncation=True, max_length=self.max_length, return_tensors="pt"
            )
        try:
            with torch.no_grad():
                out = self.model(**enc.to(self.device), output_hidden_states=True)
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            u = utterances[0]
            raise BackendError(f"semantic backend failed: {exc}", u.conversation_id, u.index) from exc
        layers = torch.stack(out.hidden_states[-NUM_POOLED_LAYERS:], dim=1)[:, :, 0]
        return layers.double().cpu().numpy()

    def layer_vectors(self, utterance: Utterance) -> np.ndarray:
        return self.layer_vectors_batch([utterance])[0]


class HFCommonsenseBackend(CommonsenseBackend):
    """Commonsense transformer (a COMET checkpoint) loaded through ``transformers``.

    Uses the encoder stack of seq2seq checkpoints; the vector is the
    last-layer state at the final non-padding position.
    """

    def __init__(self, model_name_or_path: str, device: str = "cpu", max_length: int = 128):
        import torch
        from transformers import AutoModel, AutoTokenizer

        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(model_name_or_path)
        model = AutoModel.from_pretrained(model_name_or_path)
        self.model = (model.get_encoder() if hasattr(model, "get_encoder") else model).to(device).eval()
        self.device = device
        self.max_length = max_length
        self.embedding_dim = model.config.hidden_size if hasattr(model.config, "hidden_size") else model.config.d_model
        self.name = f"hf-commonsense({model_name_or_path})"

    def encode_relations(self, utterance: Utterance) -> np.ndarray:
        torch = self._torch
        texts = [f"{utterance.text} {r}" for r in RELATIONS]
        enc = self.tokenizer(texts, padding=True, truncation=True, max_length=self.max_length, return_tensors="pt")
        try:
            with torch.no_grad():
                hidden = self.model(**enc.to(self.device)).last_hidden_state
        except Exception as exc:  # noqa: BLE001
            raise BackendError(f"commonsense backend failed: {exc}", utterance.conversation_id, utterance.index) from exc
        last = enc["attention_mask"].sum(dim=1) - 1
        return hidden[torch.arange(len(texts)), last].double().cpu().numpy()

    def encode(self, utterance: Utterance, relation: str) -> np.ndarray:
        return self.encode_relations(utterance)[RELATIONS.index(relation)]


class SharedPLMSemanticBackend(SemanticBackend):
    """Semantic extraction through the prediction PLM's own weights (shared-weights mode)."""

    def __init__(self, plm):
        self.plm = plm
        self.embedding_dim = plm.hidden_size
        self.name = f"shared-plm({plm.name})"

    def layer_vectors(self, utterance: Utterance) -> np.ndarray:
        import torch

        tok = self.plm.tokenizer
        ids = [tok.cls_id] + tok.encode(utterance.text)[: self.plm.max_length - 2] + [tok.sep_id]
        with torch.no_grad():
            states = self.plm.hidden_states(torch.tensor([ids]))
        if len(states) < NUM_POOLED_LAYERS:
            raise ConfigurationError(
                f"shared-weights semantic mode needs >= {NUM_POOLED_LAYERS} hidden states, PLM has {len(states)}"
            )
        return torch.stack([s[0, 0] for s in states[-NUM_POOLED_LAYERS:]]).double().numpy()


def encode_utterance_semantics(utterance: Utterance, backend: SemanticBackend) -> np.ndarray:
    try:
        layers = backend.layer_vectors(utterance)
    except (BackendError, ConfigurationError):
        raise
    except Exception as exc:  # noqa: BLE001
        raise BackendError(f"semantic backend {backend.name} failed: {exc}", utterance.conversation_id, utterance.index) from exc
    return pool_last_layers(layers).astype(np.float32)


def encode_semantics_batch(utterances: Sequence[Utterance], backend: SemanticBackend) -> np.ndarray:
    if not utterances:
        return np.zeros((0, backend.embedding_dim), dtype=np.float32)
    layers = np.asarray(backend.layer_vectors_batch(list(utterances)), dtype=np.float64)
    return layers.mean(axis=1).astype(np.float32)


def encode_commonsense(utterance: Utterance, relation: str, backend: CommonsenseBackend) -> np.ndarray:
    if relation not in RELATIONS:
        raise ConfigurationError(f"unknown commonsense relation {relation!r}; expected one of {RELATIONS}")
    try:
        vec = backend.encode(utterance, relation)
    except BackendError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise BackendError(f"commonsense backend {backend.name} failed: {exc}", utterance.conversation_id, utterance.index) from exc
    return np.asarray(vec, dtype=np.float32)


@dataclass
class ConversationFeatures:
    """``x``: (L, d_u) semantic rows; ``c``: (L, 9, d_c) commonsense, relation axis in RELATIONS order."""

    conversation_id: str
    x: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.c = np.ascontiguousarray(self.c, dtype=np.float32)
        if self.x.ndim != 2 or self.c.ndim != 3 or self.c.shape[1] != len(RELATIONS):
            raise SchemaError(f"{self.conversation_id}: bad feature shapes x{self.x.shape} c{self.c.shape}")
        if self.x.shape[0] != self.c.shape[0]:
            raise SchemaError(f"{self.conversation_id}: x has {self.x.shape[0]} rows, c has {self.c.shape[0]}")
        if not (np.isfinite(self.x).all() and np.isfinite(self.c).all()):
            raise SchemaError(f"{self.conversation_id}: non-finite feature values")

    @property
    def length(self) -> int:
        return self.x.shape[0]

    @property
    def d_u(self) -> int:
        return self.x.shape[1]

    @property
    def d_c(self) -> int:
        return self.c.shape[2]

    def equals(self, other: "ConversationFeatures") -> bool:
        return (
            self.conversation_id == other.conversation_id
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.c, other.c)
        )


def extract_conversation_features(
    conversation: Conversation, sem: SemanticBackend, cs: CommonsenseBackend
) -> ConversationFeatures:
    rows, blocks = [], []
    for u in conversation.utterances:
        try:
            rows.append(encode_utterance_semantics(u, sem))
            blocks.append(np.asarray(cs.encode_relations(u), dtype=np.float32))
        except BackendError as exc:
            if exc.conversation_id is None:
                raise BackendError(str(exc), u.conversation_id, u.index) from exc
            raise
        except Exception as exc:  # noqa: BLE001
            raise BackendError(f"feature extraction failed: {exc}", u.conversation_id, u.index) from exc
    return ConversationFeatures(conversation.id, np.stack(rows), np.stack(blocks))


def extract_corpus_features(conversations: Iterable[Conversation], sem, cs) -> list:
    return [extract_conversation_features(conv, sem, cs) for conv in conversations]


# --- feature cache -------------------------------------------------------

MANIFEST = "manifest.json"
CACHE_SCHEMA_VERSION = 1


def _blob_name(conversation_id: str) -> str:
    return quote(conversation_id, safe="") + ".bin"


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_blob(f: ConversationFeatures) -> bytes:
    le = np.dtype("<f4")
    return f.x.astype(le).tobytes(order="C") + f.c.astype(le).tobytes(order="C")


def write_feature_cache(
    features: Sequence[ConversationFeatures],
    root,
    backend_names: Optional[Mapping[str, str]] = None,
) -> dict:
    """Write features under ``root`` and return the (merged) manifest.

    Existing compatible caches are extended; a dimension clash is a
    :class:`SchemaError`.
    """
    root = Path(root)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    features = list(features)
    if not features and not (root / MANIFEST).exists():
        raise ConfigurationError("nothing to write and no existing cache")
    with FileLock(str(root / ".manifest.lock")):
        if (root / MANIFEST).exists():
            manifest = _load_manifest(root)
        else:
            manifest = {
                "schema_version": CACHE_SCHEMA_VERSION,
                "d_u": features[0].d_u,
                "d_c": features[0].d_c,
                "relations": list(RELATIONS),
                "dtype": "float32",
                "endianness": "little",
                "backends": dict(backend_names or {}),
                "blobs": {},
            }
        for f in features:
            if (f.d_u, f.d_c) != (manifest["d_u"], manifest["d_c"]):
                raise SchemaError(
                    f"{f.conversation_id}: dims (d_u={f.d_u}, d_c={f.d_c}) differ from cache "
                    f"(d_u={manifest['d_u']}, d_c={manifest['d_c']})"
                )
            payload = _encode_blob(f)
            name = _blob_name(f.conversation_id)
            _atomic_write(root / "blobs" / name, payload)
            manifest["blobs"][f.conversation_id] = {
                "file": name,
                "length": f.length,
                "sha256": hashlib.sha256(payload).hexdigest(),
            }
        if backend_names:
            manifest["backends"].update(backend_names)
        _atomic_write(root / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))
    return manifest


def _load_manifest(root: Path) -> dict:
    path = root / MANIFEST
    if not path.exists():
        raise CacheMissError(f"no feature cache manifest at {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptCacheError(f"unreadable manifest {path}: {exc}") from None
    if manifest.get("schema_version") != CACHE_SCHEMA_VERSION:
        raise SchemaError(f"cache schema version {manifest.get('schema_version')} != {CACHE_SCHEMA_VERSION}")
    if manifest.get("relations") != list(RELATIONS):
        raise SchemaError(f"cache relation order {manifest.get('relations')} differs from {list(RELATIONS)}")
    return manifest


def cached_ids(root) -> list:
    return list(_load_manifest(Path(root))["blobs"])


def read_feature_cache(root, ids: Optional[Iterable[str]] = None) -> list:
    root = Path(root)
    manifest = _load_manifest(root)
    blobs = manifest["blobs"]
    wanted = list(blobs) if ids is None else list(ids)
    d_u, d_c = manifest["d_u"], manifest["d_c"]
    out = []
    for cid in wanted:
        if cid not in blobs:
            raise CacheMissError(f"conversation {cid!r} not in cache; available: {sorted(blobs)}")
        entry = blobs[cid]
        path = root / "blobs" / entry["file"]
        try:
            payload = path.read_bytes()
        except FileNotFoundError:
            raise CorruptCacheError(f"blob {entry['file']} listed in manifest is missing") from None
        if hashlib.sha256(payload).hexdigest() != entry["sha256"]:
            raise CorruptCacheError(f"checksum mismatch for blob {entry['file']}")
        L = entry["length"]
        expected = L * (d_u + len(RELATIONS) * d_c) * 4
        if len(payload) != expected:
            raise SchemaError(
                f"blob {entry['file']} has {len(payload)} bytes; manifest (L={L}, d_u={d_u}, d_c={d_c}) implies {expected}"
            )
        flat = np.frombuffer(payload, dtype="<f4")
        x = flat[: L * d_u].reshape(L, d_u)
        c = flat[L * d_u :].reshape(L, len(RELATIONS), d_c)
        out.append(ConversationFeatures(cid, x.astype(np.float32), c.astype(np.float32)))
    return out
