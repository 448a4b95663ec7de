"""Cloze-style emotion prediction with injected pseudo-token embeddings.

Symmetric input layout for utterance t::

    [CLS] [E_l x N_e] [P_l x N_p] [MASK] w_1 .. w_K [P_r x N_p] [E_r x N_e] [SEP]

Pseudo positions carry reserved vocabulary ids so attention masks and
position ids are computed as usual, but their input embeddings are always
replaced by the generated prompt vectors.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Utterance
from .errors import ConfigurationError, InjectionError, InputTooLongError, MalformedDatasetError, VerbalizerError
from .promptgen import PromptBundle

logger = logging.getLogger(__name__)

SIDES = ("symmetric", "left", "right", "fixed")
ONE_SIDE_LAYOUTS = ("relocate", "half")
FIXED_TEMPLATE = "my emotion is"
ROLE_TO_GROUP = {"E_l": "e_l", "P_l": "p_l", "P_r": "p_r", "E_r": "e_r"}
LOG_EPS = 1e-12


# --- tokenizers ----------------------------------------------------------


class Tokenizer:
    """What the cloze stage needs from a tokenizer."""

    cls_id: int
    sep_id: int
    mask_id: int
    pad_id: int
    unk_id: int
    vocab_size: int

    def encode(self, text: str) -> List[int]:
        raise NotImplementedError

    def word_pieces(self, word: str) -> List[int]:
        """Pieces of ``word`` as it would appear at the mask position."""
        raise NotImplementedError

    def token_of(self, token_id: int) -> str:
        raise NotImplementedError

    def pseudo_ids(self, n: int) -> List[int]:
        raise NotImplementedError


_WORD_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


class ToyTokenizer(Tokenizer):
    """Word-level tokenizer with greedy ``##`` continuation pieces.

    Layout: 5 specials, then reserved pseudo tokens, then the word list.
    """

    SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

    def __init__(self, words: Sequence[str], n_pseudo: int = 24):
        vocab = list(self.SPECIALS) + [f"[PSEUDO{i}]" for i in range(n_pseudo)]
        for w in words:
            if w not in vocab:
                vocab.append(w)
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}
        self.pad_id, self.unk_id, self.cls_id, self.sep_id, self.mask_id = range(5)
        self.n_pseudo = n_pseudo

    @classmethod
    def from_texts(cls, texts, extra_words=(), n_pseudo: int = 24, max_words: Optional[int] = None):
        counts: Dict[str, int] = {}
        for text in texts:
            for w in _WORD_RE.findall(text.lower()):
                counts[w] = counts.get(w, 0) + 1
        words = list(dict.fromkeys(w.lower() for w in extra_words))
        for w in FIXED_TEMPLATE.split():
            if w not in words:
                words.append(w)
        ranked = sorted((w for w in counts if w not in words), key=lambda w: (-counts[w], w))
        if max_words is not None:
            ranked = ranked[: max(0, max_words - len(words))]
        return cls(words + ranked, n_pseudo)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _pieces(self, word: str) -> List[int]:
        if word in self.index:
            return [self.index[word]]
        pieces, start = [], 0
        while start < len(word):
            for end in range(len(word), start, -1):
                cand = word[start:end] if start == 0 else "##" + word[start:end]
                if cand in self.index:
                    pieces.append(self.index[cand])
                    start = end
                    break
            else:
                return [self.unk_id]
        return pieces

    def encode(self, text: str) -> List[int]:
        ids: List[int] = []
        for w in _WORD_RE.findall(text.lower()):
            ids.extend(self._pieces(w))
        return ids

    def word_pieces(self, word: str) -> List[int]:
        return self._pieces(word.strip().lower())

    def token_of(self, token_id: int) -> str:
        return self.vocab[token_id]

    def pseudo_ids(self, n: int) -> List[int]:
        if n > self.n_pseudo:
            raise ConfigurationError(f"tokenizer reserves {self.n_pseudo} pseudo tokens, {n} requested")
        return list(range(len(self.SPECIALS), len(self.SPECIALS) + n))

    def state_dict(self) -> dict:
        return {"vocab": self.vocab[len(self.SPECIALS) + self.n_pseudo :], "n_pseudo": self.n_pseudo}

    @classmethod
    def from_state(cls, state: Mapping) -> "ToyTokenizer":
        return cls(state["vocab"], state["n_pseudo"])


class HFTokenizer(Tokenizer):
    """Adapter over a ``transformers`` tokenizer; pseudo tokens are added as specials."""

    def __init__(self, hf_tokenizer, n_pseudo: int = 24):
        self.hf = hf_tokenizer
        self.pseudo_tokens = [f"[PSEUDO{i}]" for i in range(n_pseudo)]
        self.hf.add_special_tokens({"additional_special_tokens": self.pseudo_tokens})
        self.cls_id = self.hf.cls_token_id
        self.sep_id = self.hf.sep_token_id
        self.mask_id = self.hf.mask_token_id
        self.pad_id = self.hf.pad_token_id
        self.unk_id = self.hf.unk_token_id

    @property
    def vocab_size(self) -> int:
        return len(self.hf)

    def encode(self, text: str) -> List[int]:
        return self.hf.encode(text, add_special_tokens=False)

    def word_pieces(self, word: str) -> List[int]:
        # BPE vocabularies mark word starts with a leading space
        return self.hf.encode(" " + word.strip(), add_special_tokens=False)

    def token_of(self, token_id: int) -> str:
        return self.hf.convert_ids_to_tokens(token_id)

    def pseudo_ids(self, n: int) -> List[int]:
        if n > len(self.pseudo_tokens):
            raise ConfigurationError(f"tokenizer reserves {len(self.pseudo_tokens)} pseudo tokens, {n} requested")
        return self.hf.convert_tokens_to_ids(self.pseudo_tokens[:n])


# --- prediction backends -------------------------------------------------


class ToyMaskedLM(nn.Module):
    """Small post-norm Transformer masked-LM with a tied output layer."""

    def __init__(
        self,
        tokenizer: ToyTokenizer,
        hidden_size: int = 32,
        n_layers: int = 2,
        n_heads: int = 2,
        ff_size: Optional[int] = None,
        max_length: int = 64,
        dropout: float = 0.0,
        seed: int = 0,
    ):
        super().__init__()
        self.tokenizer = tokenizer
        self.hidden_size = hidden_size
        self.max_length = max_length
        self.name = f"toy-mlm(d={hidden_size},layers={n_layers},V={tokenizer.vocab_size})"
        self.config = dict(
            hidden_size=hidden_size, n_layers=n_layers, n_heads=n_heads,
            ff_size=ff_size or 4 * hidden_size, max_length=max_length, dropout=dropout, seed=seed,
        )
        V = tokenizer.vocab_size
        self.word_embeddings = nn.Embedding(V, hidden_size)
        self.position_embeddings = nn.Embedding(max_length, hidden_size)
        self.emb_norm = nn.LayerNorm(hidden_size)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                hidden_size, n_heads, dim_feedforward=ff_size or 4 * hidden_size,
                dropout=dropout, activation="gelu", batch_first=True,
            )
            for _ in range(n_layers)
        )
        self.head_dense = nn.Linear(hidden_size, hidden_size)
        self.head_norm = nn.LayerNorm(hidden_size)
        self.head_bias = nn.Parameter(torch.zeros(V))
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif p.dim() >= 2:
                    p.copy_(torch.randn(p.shape, generator=gen) / hidden_size**0.5)
                else:
                    p.zero_()

    @property
    def vocab_size(self) -> int:
        return self.tokenizer.vocab_size

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.word_embeddings(ids)

    def _encode(self, embeds: torch.Tensor, attention_mask: Optional[torch.Tensor] = None):
        n = embeds.shape[1]
        h = self.emb_norm(embeds + self.position_embeddings(torch.arange(n, device=embeds.device)))
        pad = None if attention_mask is None else ~attention_mask.bool()
        states = [h]
        for layer in self.layers:
            h = layer(h, src_key_padding_mask=pad)
            states.append(h)
        return states

    def hidden_states(self, ids: torch.Tensor):
        return self._encode(self.embed_tokens(ids))

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        h = self.head_norm(F.gelu(self.head_dense(hidden)))
        return h @ self.word_embeddings.weight.T + self.head_bias

    def mask_logits(self, embeds, attention_mask, mask_positions) -> torch.Tensor:
        h = self._encode(embeds, attention_mask)[-1]
        picked = h[torch.arange(h.shape[0], device=h.device), mask_positions]
        return self.logits(picked)


class HFMaskedLM(nn.Module):
    """Adapter for a ``transformers`` masked-LM (RoBERTa-large by default)."""

    def __init__(self, model, tokenizer: Tokenizer, max_length: Optional[int] = None):
        super().__init__()
        self.model = model
        self.tokenizer = tokenizer
        if model.get_input_embeddings().num_embeddings < tokenizer.vocab_size:
            model.resize_token_embeddings(tokenizer.vocab_size)
        self.hidden_size = model.config.hidden_size
        limit = getattr(model.config, "max_position_embeddings", 514)
        # RoBERTa offsets positions by padding_idx + 1
        self.max_length = max_length or (limit - 2 if getattr(model.config, "model_type", "") == "roberta" else limit)
        self.name = f"hf-mlm({getattr(model.config, '_name_or_path', '') or model.config.model_type})"

    @classmethod
    def from_pretrained(cls, name: str, n_pseudo: int = 24):
        from transformers import AutoModelForMaskedLM, AutoTokenizer

        tok = HFTokenizer(AutoTokenizer.from_pretrained(name), n_pseudo)
        return cls(AutoModelForMaskedLM.from_pretrained(name), tok)

    @property
    def vocab_size(self) -> int:
        return self.tokenizer.vocab_size

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.model.get_input_embeddings()(ids)

    def hidden_states(self, ids: torch.Tensor):
        return self.model(input_ids=ids, output_hidden_states=True).hidden_states

    def mask_logits(self, embeds, attention_mask, mask_positions) -> torch.Tensor:
        out = self.model(inputs_embeds=embeds, attention_mask=attention_mask)
        return out.logits[torch.arange(embeds.shape[0], device=embeds.device), mask_positions]


# --- verbalizer ----------------------------------------------------------


@dataclass(frozen=True)
class Verbalizer:
    labels: tuple
    label_words: Dict[str, str]
    token_ids: Dict[str, int]
    thesaurus: Dict[str, str] = field(default_factory=dict)
    thesaurus_ids: Dict[int, str] = field(default_factory=dict)

    @property
    def label_token_ids(self) -> List[int]:
        return [self.token_ids[l] for l in self.labels]

    def category_of(self, token_id: int) -> Optional[str]:
        return self.thesaurus_ids.get(int(token_id))


def load_thesaurus(path) -> Dict[str, str]:
    """Read ``word<TAB>category`` lines; blank lines and ``#`` comments are ignored."""
    out: Dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise VerbalizerError(f"{path}:{lineno}: expected 'word<TAB>category'")
            out[parts[0].strip().lower()] = parts[1].strip().lower()
    return out


def default_thesaurus(dataset: str) -> Dict[str, str]:
    name = {"meld": "meld_thesaurus.tsv", "emorynlp": "emorynlp_thesaurus.tsv"}.get(dataset.lower())
    if name is None:
        raise ConfigurationError(f"no bundled thesaurus for {dataset!r}")
    with resources.as_file(resources.files("cisper") / "data" / name) as path:
        return load_thesaurus(path)


def build_verbalizer(
    label_set: Sequence[str],
    tokenizer: Tokenizer,
    word_overrides: Optional[Mapping[str, str]] = None,
    thesaurus: Optional[Mapping[str, str]] = None,
) -> Verbalizer:
    """Map each category to a single-token label word (the category name unless overridden)."""
    labels = tuple(label_set)
    if not labels:
        raise VerbalizerError("label_set is empty")
    overrides = dict(word_overrides or {})
    unknown = set(overrides) - set(labels)
    if unknown:
        raise VerbalizerError(f"overrides for unknown categories: {sorted(unknown)}")
    words = {l: overrides.get(l, l) for l in labels}

    bad, ids = [], {}
    for label, word in words.items():
        pieces = tokenizer.word_pieces(word)
        if len(pieces) != 1 or pieces[0] == tokenizer.unk_id:
            bad.append(f"{word!r} ({label}) -> {len(pieces)} pieces")
        else:
            ids[label] = pieces[0]
    if bad:
        raise VerbalizerError(
            "label words must be single tokens: " + "; ".join(bad)
            + ". Supply word_overrides with single-token synonyms."
        )
    dupes = [w for w in set(words.values()) if list(words.values()).count(w) > 1]
    if dupes or len(set(ids.values())) != len(ids):
        raise VerbalizerError(f"canonical label words must be distinct: {sorted(dupes) or ids}")

    thes = {w: l for l, w in words.items()}
    for word, cat in (thesaurus or {}).items():
        if cat not in labels:
            raise VerbalizerError(f"thesaurus maps {word!r} to {cat!r}, not in {labels}")
        thes.setdefault(word.lower(), cat)
    thes_ids: Dict[int, str] = {ids[l]: l for l in labels}
    for word, cat in thes.items():
        pieces = tokenizer.word_pieces(word)
        if len(pieces) == 1 and pieces[0] != tokenizer.unk_id:
            thes_ids.setdefault(pieces[0], cat)
        else:
            logger.debug("thesaurus word %r is not a single token; ignored in open mode", word)
    return Verbalizer(labels, words, ids, thes, thes_ids)


# --- token plans ---------------------------------------------------------


@dataclass(frozen=True)
class TokenPlan:
    ids: tuple
    roles: tuple
    mask_position: int
    pseudo_slots: Dict[int, Tuple[str, int]]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_words(self) -> int:
        return self.roles.count("WORD")


def _role_layout(side: str, one_side: str, n_e: int, n_p: int):
    E_l, P_l, P_r, E_r = ["E_l"] * n_e, ["P_l"] * n_p, ["P_r"] * n_p, ["E_r"] * n_e
    if side == "symmetric":
        return E_l + P_l + ["MASK"], P_r + E_r
    if side == "left":
        before = E_l + P_l if one_side == "half" else E_l + P_l + P_r + E_r
        return before + ["MASK"], []
    if side == "right":
        after = P_r + E_r if one_side == "half" else E_l + P_l + P_r + E_r
        return ["MASK"], after
    raise ConfigurationError(f"side must be one of {SIDES}, got {side!r}")


def assemble_input(
    utterance: Utterance,
    tokenizer: Tokenizer,
    n_e: int = 3,
    n_p: int = 3,
    side: str = "symmetric",
    max_length: int = 512,
    one_side: str = "relocate",
) -> TokenPlan:
    if one_side not in ONE_SIDE_LAYOUTS:
        raise ConfigurationError(f"one_side must be one of {ONE_SIDE_LAYOUTS}")
    words = tokenizer.encode(utterance.text)
    if not words:
        raise MalformedDatasetError(utterance.conversation_id, f"utterance {utterance.index} tokenizes to nothing")

    if side == "fixed":
        template = tokenizer.encode(FIXED_TEMPLATE)
        before, after = [], ["TPL"] * len(template) + ["MASK"]
    else:
        before, after = _role_layout(side, one_side, n_e, n_p)
    overhead = len(before) + len(after) + 2
    budget = max_length - overhead
    if budget < 1:
        raise InputTooLongError(
            f"utterance {utterance.uid}: {overhead} non-word positions leave no room within max_length={max_length}"
        )
    if len(words) > budget:
        logger.warning("utterance %s: %d word pieces truncated to %d", utterance.uid, len(words), budget)
        words = words[:budget]

    roles = ["CLS"] + before + ["WORD"] * len(words) + after + ["SEP"]
    reserved = tokenizer.pseudo_ids(2 * (n_e + n_p)) if side != "fixed" else []
    offsets = {"E_l": 0, "P_l": n_e, "P_r": n_e + n_p, "E_r": n_e + 2 * n_p}
    counters = {r: 0 for r in offsets}
    ids, slots = [], {}
    word_iter = iter(words)
    tpl_iter = iter(tokenizer.encode(FIXED_TEMPLATE) if side == "fixed" else [])
    for pos, role in enumerate(roles):
        if role == "CLS":
            ids.append(tokenizer.cls_id)
        elif role == "SEP":
            ids.append(tokenizer.sep_id)
        elif role == "MASK":
            ids.append(tokenizer.mask_id)
        elif role == "WORD":
            ids.append(next(word_iter))
        elif role == "TPL":
            ids.append(next(tpl_iter))
        else:
            k = counters[role]
            counters[role] += 1
            ids.append(reserved[offsets[role] + k])
            slots[pos] = (ROLE_TO_GROUP[role], k)
    return TokenPlan(tuple(ids), tuple(roles), roles.index("MASK"), slots)


# --- injection and prediction --------------------------------------------


def inject_embeddings(plan: TokenPlan, bundle: Optional[PromptBundle], backend) -> torch.Tensor:
    """Backend embeddings for ``plan`` with pseudo slots replaced by bundle vectors."""
    ids = torch.tensor(plan.ids, dtype=torch.long)
    base = backend.embed_tokens(ids)
    if not plan.pseudo_slots:
        return base
    if bundle is None:
        raise InjectionError(f"plan has {len(plan.pseudo_slots)} pseudo slots but no bundle was given")
    positions, vectors = [], []
    for pos, (group, k) in sorted(plan.pseudo_slots.items()):
        vecs = bundle.group(group)
        if vecs.dim() != 2 or k >= vecs.shape[0]:
            raise InjectionError(f"position {pos}: group {group} has no vector {k} (shape {tuple(vecs.shape)})")
        if vecs.shape[1] != base.shape[1]:
            raise InjectionError(f"position {pos}: group {group} width {vecs.shape[1]} != embedding width {base.shape[1]}")
        positions.append(pos)
        vectors.append(vecs[k])
    used = {}
    for group, _ in plan.pseudo_slots.values():
        used[group] = used.get(group, 0) + 1
    for group, count in used.items():
        if bundle.group(group).shape[0] != count:
            raise InjectionError(f"group {group}: plan has {count} slots, bundle has {bundle.group(group).shape[0]} vectors")
    idx = torch.tensor(positions, dtype=torch.long)
    return base.index_put((idx,), torch.stack(vectors).to(base.dtype))


def batch_embeddings(plans: Sequence[TokenPlan], bundles: Sequence[Optional[PromptBundle]], backend):
    """Right-pad injected sequences into ``(embeds, attention_mask, mask_positions)``."""
    seqs = [inject_embeddings(p, b, backend) for p, b in zip(plans, bundles)]
    n = max(s.shape[0] for s in seqs)
    pad_vec = backend.embed_tokens(torch.tensor([backend.tokenizer.pad_id]))[0]
    rows, mask = [], torch.zeros(len(seqs), n, dtype=torch.long)
    for i, s in enumerate(seqs):
        extra = n - s.shape[0]
        rows.append(torch.cat([s, pad_vec.expand(extra, -1)]) if extra else s)
        mask[i, : s.shape[0]] = 1
    positions = torch.tensor([p.mask_position for p in plans], dtype=torch.long)
    return torch.stack(rows), mask, positions


@dataclass
class MaskDistribution:
    """Log-probabilities over the vocabulary at the mask position (``(V,)`` or ``(B, V)``)."""

    log_probs: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()

    def __len__(self) -> int:
        return 1 if self.log_probs.dim() == 1 else self.log_probs.shape[0]

    def __getitem__(self, i) -> "MaskDistribution":
        return MaskDistribution(self.log_probs[i])


def predict_mask_distribution(
    embeddings: torch.Tensor,
    mask_position,
    backend,
    attention_mask: Optional[torch.Tensor] = None,
) -> MaskDistribution:
    """Full-vocabulary distribution at the mask; accepts one ``(n, d)`` sequence or a padded batch."""
    single = embeddings.dim() == 2
    embeds = embeddings.unsqueeze(0) if single else embeddings
    positions = torch.as_tensor(mask_position, dtype=torch.long).reshape(-1)
    if attention_mask is None:
        attention_mask = torch.ones(embeds.shape[:2], dtype=torch.long)
    logits = backend.mask_logits(embeds, attention_mask, positions)
    log_probs = torch.log_softmax(logits, dim=-1)
    return MaskDistribution(log_probs[0] if single else log_probs)


def classify_utterance(dist: MaskDistribution, verbalizer: Verbalizer, mode: str = "restricted"):
    """Category for one distribution (or a list for a batch)."""
    if mode not in ("restricted", "open"):
        raise ConfigurationError(f"classification mode must be 'restricted' or 'open', got {mode!r}")
    lp = dist.log_probs
    if lp.dim() == 2:
        return [classify_utterance(MaskDistribution(row), verbalizer, mode) for row in lp]
    label_ids = torch.tensor(verbalizer.label_token_ids, device=lp.device)
    restricted = verbalizer.labels[int(torch.argmax(lp[label_ids]))]
    if mode == "restricted":
        return restricted
    hit = verbalizer.category_of(int(torch.argmax(lp)))
    return hit if hit is not None else restricted
