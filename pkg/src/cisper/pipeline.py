"""Build corpora, backends, features and models from a :class:`RunConfig`."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from .cloze import HFMaskedLM, HFTokenizer, ToyMaskedLM, ToyTokenizer, build_verbalizer, default_thesaurus, load_thesaurus
from .corpus import Corpus, align_splits, load_dataset
from .encoders import (
    HFCommonsenseBackend,
    HFSemanticBackend,
    PrecomputedCommonsenseBackend,
    ReferenceCommonsenseBackend,
    ReferenceSemanticBackend,
    SharedPLMSemanticBackend,
    extract_conversation_features,
    read_feature_cache,
    write_feature_cache,
)
from .errors import CacheMissError, ConfigurationError
from .evaluation import EvalReport, evaluate
from .model import CisperModel
from .promptgen import PromptGenConfig
from .train import Checkpoint, RunConfig, TrainResult, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)

STANDARD_FILES = {
    "meld": ("meld-csv", {"train": "train_sent_emo.csv", "validation": "dev_sent_emo.csv", "test": "test_sent_emo.csv"}),
    "emorynlp": (
        "emorynlp-json",
        {
            "train": "emotion-detection-trn.json",
            "validation": "emotion-detection-dev.json",
            "test": "emotion-detection-tst.json",
        },
    ),
}


def split_paths(cfg: RunConfig, data_dir: Optional[str] = None) -> Dict[str, Path]:
    paths = {
        tag: Path(p)
        for tag, p in (("train", cfg.train_path), ("validation", cfg.validation_path), ("test", cfg.test_path))
        if p
    }
    if not paths and data_dir and cfg.dataset in STANDARD_FILES:
        _, names = STANDARD_FILES[cfg.dataset]
        paths = {tag: Path(data_dir) / name for tag, name in names.items()}
    return paths


def dataset_adapter(cfg: RunConfig) -> str:
    if cfg.dataset in STANDARD_FILES and cfg.adapter == "generic-jsonl":
        return STANDARD_FILES[cfg.dataset][0]
    return cfg.adapter


def load_splits(cfg: RunConfig, data_dir: Optional[str] = None, align: bool = True) -> Dict[str, Corpus]:
    paths = split_paths(cfg, data_dir)
    if not paths:
        raise ConfigurationError("no dataset paths: set train_path/validation_path/test_path")
    adapter = dataset_adapter(cfg)
    splits = {tag: load_dataset(p, adapter, tag) for tag, p in paths.items()}
    return align_splits(splits) if align else splits


def cache_root(cfg: RunConfig) -> Path:
    return Path(os.environ.get("CISPER_CACHE_DIR") or cfg.cache_dir)


def make_commonsense_backend(cfg: RunConfig):
    choice = cfg.commonsense_backend
    if choice == "reference":
        return ReferenceCommonsenseBackend(cfg.d_c, cfg.backend_seed)
    if choice.startswith("precomputed:"):
        path = choice.split(":", 1)[1]
        if not path:
            raise ConfigurationError("commonsense_backend 'precomputed:<npz>' needs a path to precomputed COMET features")
        return PrecomputedCommonsenseBackend(path)
    if choice.startswith("hf:"):
        return HFCommonsenseBackend(choice[3:])
    raise ConfigurationError(f"unknown commonsense_backend {choice!r}")


def make_semantic_backend(cfg: RunConfig, plm=None):
    choice = cfg.semantic_backend
    if choice == "reference":
        return ReferenceSemanticBackend(cfg.d_u, cfg.backend_seed)
    if choice == "shared":
        if plm is None:
            raise ConfigurationError("semantic_backend 'shared' needs the prediction PLM")
        return SharedPLMSemanticBackend(plm)
    if choice.startswith("hf:"):
        return HFSemanticBackend(choice[3:])
    raise ConfigurationError(f"unknown semantic_backend {choice!r}")


def backend_key(sem, cs) -> str:
    return hashlib.sha256(f"{sem.name}|{cs.name}".encode()).hexdigest()[:12]


def corpus_features(corpus: Corpus, sem, cs, root: Optional[Path] = None) -> dict:
    """Features for every conversation, read through the on-disk cache under ``root``."""
    if root is None:
        return {c.id: extract_conversation_features(c, sem, cs) for c in corpus.conversations}
    split_root = Path(root) / backend_key(sem, cs) / corpus.split_tag
    out = {}
    try:
        cached = read_feature_cache(split_root, [c.id for c in corpus.conversations])
        out = {f.conversation_id: f for f in cached}
    except CacheMissError:
        missing = [c for c in corpus.conversations]
        feats = [extract_conversation_features(c, sem, cs) for c in missing]
        write_feature_cache(feats, split_root, {"semantic": sem.name, "commonsense": cs.name})
        out = {f.conversation_id: f for f in feats}
    for conv in corpus.conversations:
        if out[conv.id].length != len(conv):
            raise ConfigurationError(f"cached features for {conv.id!r} have {out[conv.id].length} rows, corpus has {len(conv)}")
    return out


def parse_label_words(choice: str) -> Dict[str, str]:
    out = {}
    for item in filter(None, (s.strip() for s in choice.split(","))):
        if "=" not in item:
            raise ConfigurationError(f"label_words entries must be category=word, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip().lower()] = v.strip()
    return out


def thesaurus_for(cfg: RunConfig) -> Dict[str, str]:
    if cfg.thesaurus:
        return load_thesaurus(cfg.thesaurus)
    if cfg.dataset in ("meld", "emorynlp"):
        return default_thesaurus(cfg.dataset)
    return {}


def make_tokenizer(cfg: RunConfig, splits: Dict[str, Corpus], labels) -> object:
    n_pseudo = 2 * (cfg.n_e + cfg.n_p)
    if cfg.plm == "toy":
        texts = [u.text for u in splits["train"].utterances()] if "train" in splits else []
        words = [parse_label_words(cfg.label_words).get(l, l) for l in labels]
        words += list(thesaurus_for(cfg))
        return ToyTokenizer.from_texts(texts, words, n_pseudo, cfg.toy_vocab or None)
    if cfg.plm.startswith("hf:"):
        from transformers import AutoTokenizer

        return HFTokenizer(AutoTokenizer.from_pretrained(cfg.plm[3:]), n_pseudo)
    raise ConfigurationError(f"unknown plm {cfg.plm!r}; expected 'toy' or 'hf:<name>'")


def make_plm(cfg: RunConfig, tokenizer):
    if cfg.plm == "toy":
        return ToyMaskedLM(tokenizer, cfg.toy_hidden, cfg.toy_layers, cfg.toy_heads, max_length=cfg.max_length, seed=cfg.seed)
    if cfg.plm.startswith("hf:"):
        from transformers import AutoModelForMaskedLM

        return HFMaskedLM(AutoModelForMaskedLM.from_pretrained(cfg.plm[3:]), tokenizer)
    raise ConfigurationError(f"unknown plm {cfg.plm!r}")


def gen_config(cfg: RunConfig) -> PromptGenConfig:
    return PromptGenConfig(
        d_u=cfg.d_u, d_c=cfg.d_c, d_t=cfg.d_t, n_e=cfg.n_e, n_p=cfg.n_p, n_layers=cfg.gen_layers,
        n_heads=cfg.gen_heads, dropout=cfg.gen_dropout, positional=cfg.positional,
        max_positions=cfg.max_positions, seed=cfg.seed,
    )


def build_model(cfg: RunConfig, labels, tokenizer) -> CisperModel:
    plm = make_plm(cfg, tokenizer)
    verbalizer = build_verbalizer(labels, tokenizer, parse_label_words(cfg.label_words), thesaurus_for(cfg))
    return CisperModel(plm, verbalizer, gen_config(cfg), cfg.mode, cfg.one_side)


def model_extra(model: CisperModel) -> dict:
    extra = {"labels": list(model.verbalizer.labels)}
    if isinstance(model.tokenizer, ToyTokenizer):
        extra["tokenizer"] = model.tokenizer.state_dict()
    return extra


def restore_model(ckpt: Checkpoint) -> CisperModel:
    cfg = RunConfig.from_mapping(ckpt.config)
    labels = ckpt.extra["labels"]
    if "tokenizer" in ckpt.extra:
        tokenizer = ToyTokenizer.from_state(ckpt.extra["tokenizer"])
    else:
        tokenizer = make_tokenizer(cfg, {}, labels)
    model = build_model(cfg, labels, tokenizer)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model


@dataclass
class Experiment:
    config: RunConfig
    splits: Dict[str, Corpus]
    features: Dict[str, dict] = field(default_factory=dict)

    @property
    def labels(self):
        return self.splits["train"].label_set if "train" in self.splits else next(iter(self.splits.values())).label_set


def prepare(cfg: RunConfig, use_cache: bool = True, data_dir: Optional[str] = None) -> Experiment:
    """Load splits and compute/read features. Shared-weights semantics use a fresh PLM per config."""
    cfg.validate()
    splits = load_splits(cfg, data_dir)
    plm = None
    if cfg.semantic_backend == "shared":
        plm = make_plm(cfg, make_tokenizer(cfg, splits, splits[next(iter(splits))].label_set))
    sem = make_semantic_backend(cfg, plm)
    cs = make_commonsense_backend(cfg)
    if (sem.embedding_dim, cs.embedding_dim) != (cfg.d_u, cfg.d_c):
        raise ConfigurationError(
            f"backend dims (d_u={sem.embedding_dim}, d_c={cs.embedding_dim}) differ from config (d_u={cfg.d_u}, d_c={cfg.d_c})"
        )
    root = cache_root(cfg) if use_cache else None
    features = {tag: corpus_features(c, sem, cs, root) for tag, c in splits.items()}
    return Experiment(cfg, splits, features)


def run_training(cfg: RunConfig, exp: Experiment, out_dir=None, eval_split: str = "test"):
    """Train on ``train``, select on ``validation``, report on ``eval_split``.

    Returns ``(model, TrainResult, EvalReport)``; the model holds the best weights.
    """
    cfg.validate()
    if "train" not in exp.splits:
        raise ConfigurationError("training needs a train split")
    tokenizer = make_tokenizer(cfg, exp.splits, exp.labels)
    model = build_model(cfg, exp.labels, tokenizer)
    train_corpus = exp.splits["train"]
    train_data = [(c, exp.features["train"][c.id]) for c in train_corpus.conversations]
    val = exp.splits.get("validation")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    result = train(
        model,
        train_data,
        cfg,
        val_corpus=val,
        val_features=exp.features.get("validation"),
        checkpoint_dir=out,
        log_path=out / "train_log.jsonl" if out else None,
        extra=model_extra(model),
    )
    model.load_state_dict(result.best.model_state)
    split = eval_split if eval_split in exp.splits else ("validation" if val is not None else "train")
    report = evaluate(model, exp.splits[split], exp.features[split], {"mode": cfg.mode, "split": split, "seed": cfg.seed}, cfg.classify_mode)
    if out:
        report.save(out / f"report_{split}.json")
    return model, result, report
