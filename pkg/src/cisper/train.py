"""Masked-word cross-entropy training, run configuration and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import os
import tempfile
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .cloze import LOG_EPS, MaskDistribution
from .errors import ConfigurationError, SchemaError, TrainingError
from .evaluation import evaluate
from .model import MODEL_MODES

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class RunConfig:
    # optimisation
    learning_rate: float = 5e-6
    weight_decay: float = 1e-2
    batch_size: int = 64
    epochs: int = 10
    patience: int = 3
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    tune_plm: bool = True
    # prompt
    mode: str = "full"
    one_side: str = "relocate"
    n_e: int = 3
    n_p: int = 3
    d_u: int = 1024
    d_c: int = 768
    d_t: int = 1024
    gen_layers: int = 1
    gen_heads: int = 8
    gen_dropout: float = 0.1
    positional: bool = True
    max_positions: int = 256
    classify_mode: str = "restricted"
    # backends: "reference", "shared", "hf:<name>", "precomputed:<npz>" / plm: "toy", "hf:<name>"
    plm: str = "hf:roberta-large"
    semantic_backend: str = "hf:roberta-large"
    commonsense_backend: str = "precomputed:"
    backend_seed: int = 0
    toy_hidden: int = 32
    toy_layers: int = 2
    toy_heads: int = 2
    toy_vocab: int = 0
    max_length: int = 512
    label_words: str = ""
    thesaurus: str = ""
    # data
    dataset: str = "generic"
    adapter: str = "generic-jsonl"
    train_path: str = ""
    validation_path: str = ""
    test_path: str = ""
    cache_dir: str = "cache"
    out_dir: str = "runs"
    repeats: int = 1

    def validate(self) -> "RunConfig":
        problems = []
        if not self.learning_rate > 0:
            problems.append(("learning_rate", "must be > 0"))
        if self.weight_decay < 0:
            problems.append(("weight_decay", "must be >= 0"))
        if self.batch_size < 1:
            problems.append(("batch_size", "must be >= 1"))
        if self.epochs < 0:
            problems.append(("epochs", "must be >= 0"))
        if self.n_e < 1 or self.n_p < 1:
            problems.append(("n_e" if self.n_e < 1 else "n_p", "must be >= 1"))
        if self.d_t < 2 or self.d_t % 2:
            problems.append(("d_t", "must be an even integer"))
        if self.mode not in MODEL_MODES:
            problems.append(("mode", f"must be one of {MODEL_MODES}"))
        if self.one_side not in ("relocate", "half"):
            problems.append(("one_side", "must be 'relocate' or 'half'"))
        if self.classify_mode not in ("restricted", "open"):
            problems.append(("classify_mode", "must be 'restricted' or 'open'"))
        if self.repeats < 1:
            problems.append(("repeats", "must be >= 1"))
        if problems:
            key, why = problems[0]
            raise ConfigurationError(f"invalid config: {key} {why} (got {getattr(self, key)!r})")
        return self

    @classmethod
    def keys(cls) -> Dict[str, object]:
        return {f.name: f.default for f in fields(cls)}

    @classmethod
    def from_mapping(cls, data: Mapping) -> "RunConfig":
        known = cls.keys()
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        kwargs = {k: coerce_value(k, v, known[k]) for k, v in data.items()}
        return cls(**kwargs)

    def replace(self, **changes) -> "RunConfig":
        data = asdict(self)
        data.update(changes)
        return RunConfig.from_mapping(data)

    def to_dict(self) -> dict:
        return asdict(self)


def coerce_value(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"invalid config: {key} expects a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"invalid config: {key} expects {type(default).__name__}, got {value!r}") from None
    return "" if value is None else str(value)


def compute_loss(
    distributions: MaskDistribution,
    gold_ids,
    normalizer: Optional[float] = None,
) -> torch.Tensor:
    """Negative mean gold-word log-probability.

    ``normalizer`` replaces the utterance count, so a batch of conversations
    split across several calls still divides by the total utterance count.
    Probabilities below 1e-12 are clamped.
    """
    lp = distributions.log_probs
    if lp.dim() == 1:
        lp = lp.unsqueeze(0)
    gold = torch.as_tensor(gold_ids, dtype=torch.long, device=lp.device).reshape(-1)
    if gold.numel() == 0:
        raise ValueError("compute_loss needs a non-empty batch")
    if gold.numel() != lp.shape[0]:
        raise ValueError(f"{gold.numel()} gold ids for {lp.shape[0]} distributions")
    if ((gold < 0) | (gold >= lp.shape[1])).any():
        raise ValueError("gold id outside the vocabulary")
    picked = lp.gather(1, gold.unsqueeze(1)).squeeze(1)
    floor = math.log(LOG_EPS)
    if (picked < floor).any():
        logger.warning("gold probability below %.0e clamped for %d item(s)", LOG_EPS, int((picked < floor).sum()))
    picked = picked.clamp(min=floor)
    denom = float(gold.numel() if normalizer is None else normalizer)
    return -picked.sum() / denom


# --- checkpoints ---------------------------------------------------------


@dataclass
class Checkpoint:
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Optional[dict] = None
    config: dict = field(default_factory=dict)
    epoch: int = 0
    history: List[dict] = field(default_factory=list)
    rng_state: Optional[torch.Tensor] = None
    extra: dict = field(default_factory=dict)


def _tensor_bytes(t: torch.Tensor) -> Tuple[str, bytes]:
    arr = t.detach().cpu().contiguous().numpy()
    dt = arr.dtype.newbyteorder("<")
    return arr.dtype.name, arr.astype(dt, copy=False).tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Zip archive: ``manifest.json`` plus one little-endian raw payload per tensor. Atomic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: Dict[str, torch.Tensor] = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    optim_meta = None
    if ckpt.optimizer_state is not None:
        optim_meta = {"param_groups": ckpt.optimizer_state["param_groups"], "state": {}}
        for idx, st in ckpt.optimizer_state["state"].items():
            optim_meta["state"][str(idx)] = []
            for key, val in st.items():
                if isinstance(val, torch.Tensor):
                    tensors[f"optim/{idx}/{key}"] = val
                    optim_meta["state"][str(idx)].append(key)
    if ckpt.rng_state is not None:
        tensors["rng/torch"] = ckpt.rng_state
    entries = []
    payloads = []
    for i, (name, t) in enumerate(tensors.items()):
        dtype, data = _tensor_bytes(t)
        entries.append({"name": name, "shape": list(t.shape), "dtype": dtype, "file": f"tensors/{i}.bin"})
        payloads.append((f"tensors/{i}.bin", data))
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "tensors": entries,
        "optimizer": optim_meta,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "extra": ckpt.extra,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True))
            for name, data in payloads:
                zf.writestr(name, data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise SchemaError(f"{path}: not a readable checkpoint archive ({exc})") from None
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, json.JSONDecodeError, zipfile.BadZipFile) as exc:
            raise SchemaError(f"{path}: missing or corrupt manifest ({exc})") from None
        version = manifest.get("schema_version")
        if version != CHECKPOINT_SCHEMA_VERSION:
            raise SchemaError(f"{path}: checkpoint schema version {version}, expected {CHECKPOINT_SCHEMA_VERSION}")
        tensors = {}
        for entry in manifest["tensors"]:
            try:
                data = zf.read(entry["file"])
            except (KeyError, zipfile.BadZipFile) as exc:
                raise SchemaError(f"{path}: payload {entry['file']} unreadable ({exc})") from None
            dt = np.dtype(entry["dtype"]).newbyteorder("<")
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            if len(data) != count * dt.itemsize:
                raise SchemaError(f"{path}: payload {entry['name']} has {len(data)} bytes, expected {count * dt.itemsize}")
            arr = np.frombuffer(data, dtype=dt).astype(np.dtype(entry["dtype"])).reshape(entry["shape"])
            tensors[entry["name"]] = torch.from_numpy(arr.copy())
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    optimizer_state = None
    if manifest.get("optimizer") is not None:
        meta = manifest["optimizer"]
        state = {}
        for idx, keys in meta["state"].items():
            state[int(idx)] = {k: tensors[f"optim/{idx}/{k}"] for k in keys}
        optimizer_state = {"state": state, "param_groups": meta["param_groups"]}
    return Checkpoint(
        model_state=model_state,
        optimizer_state=optimizer_state,
        config=manifest["config"],
        epoch=manifest["epoch"],
        history=manifest["history"],
        rng_state=tensors.get("rng/torch"),
        extra=manifest["extra"],
    )


# --- training ------------------------------------------------------------


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: List[dict]

    @property
    def step_losses(self) -> List[float]:
        return [r["loss"] for r in self.log if r["event"] == "step"]


def _snapshot(model) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def trainable_parameters(model, tune_plm: bool) -> list:
    params = list(model.generator.parameters()) if model.generator is not None else []
    for p in model.plm_parameters():
        p.requires_grad_(tune_plm)
        if tune_plm:
            params.append(p)
    return params


def make_optimizer(params, config: RunConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        params,
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )


def group_steps(order: Sequence[int], lengths: Sequence[int], batch_size: int) -> List[List[int]]:
    """Greedily pack whole conversations until each step holds >= batch_size utterances."""
    steps, current, count = [], [], 0
    for i in order:
        current.append(i)
        count += lengths[i]
        if count >= batch_size:
            steps.append(current)
            current, count = [], 0
    if current:
        steps.append(current)
    return steps


def gold_ids(conversation, verbalizer) -> List[int]:
    out = []
    for u in conversation.utterances:
        if u.emotion is None:
            raise TrainingError(f"utterance {u.uid} has no gold label")
        out.append(verbalizer.token_ids[u.emotion])
    return out


def train(
    model,
    train_data: Sequence[Tuple[object, object]],
    config: RunConfig,
    val_corpus=None,
    val_features: Optional[Mapping] = None,
    checkpoint_dir=None,
    resume: Optional[Checkpoint] = None,
    log_path=None,
    extra: Optional[dict] = None,
) -> TrainResult:
    """Mini-batch Adam on the masked-word loss.

    ``train_data`` is a sequence of ``(Conversation, ConversationFeatures)``.
    The best-validation state (weighted-F1) is kept; without validation data
    the last state is the best.
    """
    config.validate()
    torch.manual_seed(config.seed)
    params = trainable_parameters(model, config.tune_plm)
    optimizer = make_optimizer(params, config)
    history: List[dict] = []
    start_epoch = 0
    best_metric = -math.inf
    best_state = _snapshot(model)
    stale = 0
    if resume is not None:
        model.load_state_dict(resume.model_state)
        if resume.optimizer_state is not None:
            optimizer.load_state_dict(resume.optimizer_state)
        if resume.rng_state is not None:
            torch.set_rng_state(resume.rng_state)
        start_epoch = resume.epoch
        history = list(resume.history)
        best_metric = resume.extra.get("best_metric", -math.inf)
        stale = resume.extra.get("stale", 0)
        best_state = _snapshot(model)
        best_path = Path(checkpoint_dir) / "best.ckpt" if checkpoint_dir is not None else None
        if best_path is not None and best_path.exists():
            best_state = load_checkpoint(best_path).model_state

    log: List[dict] = [{"event": "start", "seed": config.seed, "config": config.to_dict(), "start_epoch": start_epoch}]
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None

    def emit(record):
        log.append(record)
        if log_fh:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()

    if log_fh:
        log_fh.write(json.dumps(log[0], sort_keys=True) + "\n")

    golds = [gold_ids(conv, model.verbalizer) for conv, _ in train_data]
    lengths = [len(conv) for conv, _ in train_data]
    base_extra = dict(extra or {})

    def make_ckpt(state, epoch):
        return Checkpoint(
            model_state=state,
            optimizer_state=optimizer.state_dict(),
            config=config.to_dict(),
            epoch=epoch,
            history=list(history),
            rng_state=torch.get_rng_state(),
            extra={**base_extra, "best_metric": best_metric, "stale": stale},
        )

    step = sum(h.get("steps", 0) for h in history)
    try:
        for epoch in range(start_epoch, config.epochs):
            model.train()
            order = np.random.default_rng([config.seed, epoch]).permutation(len(train_data))
            epoch_loss, epoch_steps = 0.0, 0
            for group in group_steps(order, lengths, config.batch_size):
                total = sum(lengths[i] for i in group)
                optimizer.zero_grad(set_to_none=True)
                step_loss = 0.0
                for i in group:
                    conv, feats = train_data[i]
                    loss = compute_loss(model(conv, feats), golds[i], normalizer=total)
                    if not torch.isfinite(loss):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch} step {step} (conversations {[train_data[j][0].id for j in group]})"
                        )
                    loss.backward()
                    step_loss += loss.item()
                optimizer.step()
                emit({"event": "step", "epoch": epoch, "step": step, "loss": step_loss,
                      "conversations": [train_data[j][0].id for j in group]})
                epoch_loss += step_loss
                epoch_steps += 1
                step += 1
            record = {"epoch": epoch + 1, "train_loss": epoch_loss / max(epoch_steps, 1), "steps": epoch_steps}
            if val_corpus is not None:
                report = evaluate(model, val_corpus, val_features, classify_mode=config.classify_mode)
                record["val_weighted_f1"] = report.weighted_f1
                metric = report.weighted_f1
            else:
                metric = -record["train_loss"]
            if metric > best_metric:
                best_metric, stale = metric, 0
                best_state = _snapshot(model)
                record["best"] = True
            else:
                stale += 1
            history.append(record)
            emit({"event": "epoch", **record})
            if checkpoint_dir is not None:
                save_checkpoint(make_ckpt(_snapshot(model), epoch + 1), Path(checkpoint_dir) / "last.ckpt")
                if record.get("best"):
                    save_checkpoint(make_ckpt(best_state, epoch + 1), Path(checkpoint_dir) / "best.ckpt")
            if val_corpus is not None and stale >= config.patience:
                emit({"event": "early_stop", "epoch": epoch + 1})
                break
    finally:
        if log_fh:
            log_fh.close()

    last = make_ckpt(_snapshot(model), history[-1]["epoch"] if history else start_epoch)
    best = make_ckpt(best_state, last.epoch)
    return TrainResult(best=best, last=last, log=log)
