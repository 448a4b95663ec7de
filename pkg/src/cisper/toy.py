"""Synthetic desk-scale fixture: small conversations, reference features, toy masked-LM.

Each conversation has a dominant emotion. Most utterances carry words from
that emotion's pool; a few are content-free backchannels ("okay .") whose
label is the conversation's emotion, so they can only be resolved from
context.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .cloze import ToyMaskedLM, ToyTokenizer, build_verbalizer
from .corpus import Conversation, Corpus, Utterance
from .encoders import extract_conversation_features, reference_backend
from .model import CisperModel
from .promptgen import PromptGenConfig
from .train import RunConfig

TOY_LABELS = ("joy", "anger", "sadness")
TOY_POOLS = {
    "joy": ("great", "love", "fun", "yay", "party", "awesome", "laugh", "nice"),
    "anger": ("hate", "stupid", "shut", "damn", "idiot", "furious", "stop", "worst"),
    "sadness": ("miss", "cry", "sorry", "alone", "lost", "tears", "sad", "gone"),
}
TOY_FILLER = ("i", "you", "this", "is", "so", "we", "it", "the", "that", "really")
TOY_BACKCHANNELS = ("okay .", "oh .", "hmm ?")
TOY_VOCAB_SIZE = 64


def toy_corpus(n_conversations: int = 8, length: int = 5, seed: int = 0, split_tag: str = "train") -> Corpus:
    rng = np.random.default_rng(seed)
    convs = []
    for k in range(n_conversations):
        emotion = TOY_LABELS[k % len(TOY_LABELS)]
        cid = f"{split_tag}-{k}"
        ambiguous = set(rng.choice(length, size=max(1, length // 4), replace=False).tolist())
        utts = []
        for t in range(length):
            if t in ambiguous:
                text = TOY_BACKCHANNELS[int(rng.integers(len(TOY_BACKCHANNELS)))]
            else:
                cue = rng.choice(TOY_POOLS[emotion], size=2, replace=False)
                filler = rng.choice(TOY_FILLER, size=2, replace=False)
                words = list(cue) + list(filler)
                rng.shuffle(words)
                text = " ".join(words)
            utts.append(Utterance(cid, t, f"speaker{t % 2}", text, emotion))
        convs.append(Conversation(cid, tuple(utts)))
    return Corpus(tuple(convs), TOY_LABELS, split_tag)


def toy_tokenizer(n_pseudo: int = 12) -> ToyTokenizer:
    words = list(TOY_LABELS) + ["my", "emotion", "is"]
    for pool in TOY_POOLS.values():
        words.extend(pool)
    words.extend(TOY_FILLER)
    words.extend(["okay", "oh", "hmm", ".", "?"])
    words = list(dict.fromkeys(words))
    spare = TOY_VOCAB_SIZE - len(ToyTokenizer.SPECIALS) - n_pseudo - len(words)
    words.extend(f"w{i}" for i in range(max(0, spare)))
    return ToyTokenizer(words, n_pseudo)


def toy_config(**overrides) -> RunConfig:
    base = dict(
        plm="toy",
        semantic_backend="reference",
        commonsense_backend="reference",
        d_u=16,
        d_c=16,
        d_t=32,
        toy_hidden=32,
        toy_layers=2,
        toy_heads=2,
        n_e=3,
        n_p=3,
        gen_heads=8,
        gen_dropout=0.0,
        learning_rate=1e-3,
        epochs=200,
        max_length=64,
    )
    base.update(overrides)
    return RunConfig(**base).validate()


@dataclass
class ToyFixture:
    corpus: Corpus
    features: Dict[str, object]
    tokenizer: ToyTokenizer
    config: RunConfig

    @property
    def train_data(self) -> List[tuple]:
        return [(c, self.features[c.id]) for c in self.corpus.conversations]

    def model(self, mode: Optional[str] = None, seed: Optional[int] = None) -> CisperModel:
        cfg = self.config
        seed = cfg.seed if seed is None else seed
        plm = ToyMaskedLM(
            self.tokenizer, cfg.toy_hidden, cfg.toy_layers, cfg.toy_heads, max_length=cfg.max_length, seed=seed
        )
        verbalizer = build_verbalizer(self.corpus.label_set, self.tokenizer)
        gen_cfg = PromptGenConfig(
            d_u=cfg.d_u, d_c=cfg.d_c, d_t=cfg.d_t, n_e=cfg.n_e, n_p=cfg.n_p, n_layers=cfg.gen_layers,
            n_heads=cfg.gen_heads, dropout=cfg.gen_dropout, positional=cfg.positional,
            max_positions=cfg.max_positions, seed=seed,
        )
        return CisperModel(plm, verbalizer, gen_cfg, mode or cfg.mode, cfg.one_side)


def toy_fixture(n_conversations: int = 8, length: int = 5, seed: int = 0, **config_overrides) -> ToyFixture:
    cfg = toy_config(**config_overrides)
    corpus = toy_corpus(n_conversations, length, seed)
    sem, cs = reference_backend(cfg.d_u, cfg.backend_seed, commonsense_dim=cfg.d_c)
    feats = {c.id: extract_conversation_features(c, sem, cs) for c in corpus.conversations}
    return ToyFixture(corpus, feats, toy_tokenizer(2 * (cfg.n_e + cfg.n_p)), cfg)


def write_toy_dataset(directory, n_conversations: int = 8, length: int = 5, seed: int = 0) -> dict:
    """Write train/validation/test generic-jsonl splits; returns ``{split: path}``."""
    from pathlib import Path

    from .corpus import save_jsonl

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for offset, tag in enumerate(("train", "validation", "test")):
        n = n_conversations if tag == "train" else max(3, n_conversations // 2)
        path = directory / f"{tag}.jsonl"
        save_jsonl(toy_corpus(n, length, seed + offset, tag), path)
        paths[tag] = path
    return paths
