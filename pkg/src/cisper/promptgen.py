"""Continuous prompt generation from conversation context and commonsense.

Pipeline for one conversation of L utterances::

    speaker row_t  = x_t (+) W_e [c_t,1 (+) ... (+) c_t,6]      (2*d_u)
    listener row_t = x_t (+) W_p [c_t,7 (+) c_t,8 (+) c_t,9]    (2*d_u)
    H_e, H_p       = TransformerEncoder(proj(rows) + pos)       (L, d_T)
    E, P           = reshape(MLP(H))                            (L, 2N, d_T)
    e'_l, p'_l, p'_r, e'_r = BiLSTM([e_l, p_l, p_r, e_r])       per utterance
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np
import torch
from torch import nn

from .encoders import RELATIONS, ConversationFeatures
from .errors import ConfigurationError, NumericalError

MODES = ("full", "random", "left", "right", "context-only", "commonsense-only")
BUNDLE_MODES = MODES + ("none",)
ROLES = ("speaker", "listener")
# ablation rows: (uses commonsense, uses context)
ABLATION_MODES = {
    "random": (False, False),
    "context-only": (False, True),
    "commonsense-only": (True, False),
    "full": (True, True),
}


@dataclass
class PromptGenConfig:
    d_u: int = 1024
    d_c: int = 768
    d_t: int = 1024
    n_e: int = 3
    n_p: int = 3
    n_layers: int = 1
    n_heads: int = 8
    ff_mult: int = 4
    dropout: float = 0.1
    positional: bool = True
    max_positions: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.n_e < 1 or self.n_p < 1:
            raise ConfigurationError(f"n_e and n_p must be >= 1 (got {self.n_e}, {self.n_p})")
        if self.d_t < 2 or self.d_t % 2:
            raise ConfigurationError(f"d_t must be even so the BiLSTM halves concatenate to d_t (got {self.d_t})")
        if min(self.d_u, self.d_c) < 1:
            raise ConfigurationError("d_u and d_c must be >= 1")

    @property
    def heads(self) -> int:
        # fall back to a divisor of d_t for desk-scale widths
        return self.n_heads if self.d_t % self.n_heads == 0 else math.gcd(self.d_t, self.n_heads)

    @property
    def num_pseudo_tokens(self) -> int:
        return 2 * (self.n_e + self.n_p)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PromptBundle:
    """Final pseudo-token embeddings.

    Tensors are ``(N, d_T)`` for a single utterance or ``(L, N, d_T)`` for a
    whole conversation; :meth:`split` turns the latter into a list of the former.
    """

    e_l: torch.Tensor
    p_l: torch.Tensor
    p_r: torch.Tensor
    e_r: torch.Tensor
    mode: str = "full"

    GROUPS = ("e_l", "p_l", "p_r", "e_r")

    def __post_init__(self):
        if self.mode not in BUNDLE_MODES:
            raise ConfigurationError(f"unknown bundle mode {self.mode!r}")

    @property
    def n_e(self) -> int:
        return self.e_l.shape[-2]

    @property
    def n_p(self) -> int:
        return self.p_l.shape[-2]

    def group(self, name: str) -> torch.Tensor:
        return getattr(self, name)

    def sequence(self) -> torch.Tensor:
        """All pseudo vectors in [e_l, p_l, p_r, e_r] order along the token axis."""
        return torch.cat([self.e_l, self.p_l, self.p_r, self.e_r], dim=-2)

    def split(self) -> List["PromptBundle"]:
        if self.e_l.dim() != 3:
            return [self]
        return [
            PromptBundle(self.e_l[t], self.p_l[t], self.p_r[t], self.e_r[t], self.mode)
            for t in range(self.e_l.shape[0])
        ]

    def shapes(self) -> dict:
        return {g: tuple(self.group(g).shape) for g in self.GROUPS}


def _init_parameters(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif p.dim() >= 2:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) / math.sqrt(p.shape[-1]))
            elif name.startswith("random_"):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) / math.sqrt(p.shape[-1]))
            else:
                p.zero_()


class _BlendEncoder(nn.Module):
    def __init__(self, cfg: PromptGenConfig):
        super().__init__()
        self.in_proj = nn.Linear(2 * cfg.d_u, cfg.d_t)
        self.pos = nn.Embedding(cfg.max_positions, cfg.d_t) if cfg.positional else None
        layer = nn.TransformerEncoderLayer(
            cfg.d_t,
            cfg.heads,
            dim_feedforward=cfg.ff_mult * cfg.d_t,
            dropout=cfg.dropout,
            activation="gelu",
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)
        self.max_positions = cfg.max_positions

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        L = rows.shape[0]
        h = self.in_proj(rows)
        if self.pos is not None:
            if L > self.max_positions:
                raise ConfigurationError(f"conversation length {L} exceeds max_positions={self.max_positions}")
            h = h + self.pos(torch.arange(L, device=rows.device))
        return self.encoder(h.unsqueeze(0)).squeeze(0)


class PromptGenerator(nn.Module):
    """All trainable prompt-generation parameters, plus the ablation stand-ins."""

    def __init__(self, cfg: PromptGenConfig):
        super().__init__()
        self.cfg = cfg
        n_spk, n_lis = len(RELATIONS[:6]), len(RELATIONS[6:])
        self.w_e = nn.Linear(n_spk * cfg.d_c, cfg.d_u, bias=False)
        self.w_p = nn.Linear(n_lis * cfg.d_c, cfg.d_u, bias=False)
        self.blend_e = _BlendEncoder(cfg)
        self.blend_p = _BlendEncoder(cfg)
        self.mlp_e = nn.Sequential(nn.Linear(cfg.d_t, cfg.d_t), nn.GELU(), nn.Linear(cfg.d_t, 2 * cfg.n_e * cfg.d_t))
        self.mlp_p = nn.Sequential(nn.Linear(cfg.d_t, cfg.d_t), nn.GELU(), nn.Linear(cfg.d_t, 2 * cfg.n_p * cfg.d_t))
        self.lstm = nn.LSTM(cfg.d_t, cfg.d_t // 2, batch_first=True, bidirectional=True)
        # ablation stand-ins, only touched by the corresponding modes
        self.random_prompts = nn.Parameter(torch.empty(cfg.num_pseudo_tokens, cfg.d_t))
        self.random_commonsense = nn.Parameter(torch.empty(len(RELATIONS), cfg.d_c))
        self.random_context = nn.Parameter(torch.empty(cfg.d_u))
        _init_parameters(self, cfg.seed)

    # parameter groups used by the gradient-flow checks
    def generator_groups(self) -> dict:
        return {
            "w_e": self.w_e,
            "w_p": self.w_p,
            "blend_e": self.blend_e,
            "blend_p": self.blend_p,
            "mlp_e": self.mlp_e,
            "mlp_p": self.mlp_p,
            "lstm": self.lstm,
        }

    def _features(self, features: ConversationFeatures):
        p = self.random_prompts
        x = torch.as_tensor(features.x, dtype=p.dtype, device=p.device)
        c = torch.as_tensor(features.c, dtype=p.dtype, device=p.device)
        if x.shape[1] != self.cfg.d_u or c.shape[2] != self.cfg.d_c:
            raise ConfigurationError(
                f"{features.conversation_id}: features (d_u={x.shape[1]}, d_c={c.shape[2]}) do not match "
                f"generator (d_u={self.cfg.d_u}, d_c={self.cfg.d_c})"
            )
        return x, c

    def forward(self, features: ConversationFeatures, mode: str = "full") -> PromptBundle:
        return generate_prompt_bundle(features, self, mode, as_list=False)


def concat_relation_across_utterances(features: ConversationFeatures, j: int):
    """c_j = c^1_j (+) ... (+) c^L_j for a 1-based relation index ``j``."""
    if not 1 <= j <= len(RELATIONS):
        raise IndexError(f"relation index must be in 1..{len(RELATIONS)}, got {j}")
    c = features.c
    if isinstance(c, torch.Tensor):
        return c[:, j - 1, :].reshape(-1)
    return np.ascontiguousarray(c[:, j - 1, :]).reshape(-1)


def _blend_rows(x: torch.Tensor, c: torch.Tensor, gen: PromptGenerator, role: str) -> torch.Tensor:
    L = x.shape[0]
    if role == "speaker":
        return torch.cat([x, gen.w_e(c[:, :6, :].reshape(L, -1))], dim=-1)
    if role == "listener":
        return torch.cat([x, gen.w_p(c[:, 6:, :].reshape(L, -1))], dim=-1)
    raise ConfigurationError(f"role must be one of {ROLES}, got {role!r}")


def blend_context(features: ConversationFeatures, params: PromptGenerator, role: str, mode: str = "full") -> torch.Tensor:
    """Return H (L x d_T) for ``role``; ``mode`` swaps in the ablation stand-ins."""
    x, c = params._features(features)
    L = x.shape[0]
    if mode == "context-only":
        c = params.random_commonsense.unsqueeze(0).expand(L, -1, -1)
    elif mode == "commonsense-only":
        x = params.random_context.unsqueeze(0).expand(L, -1)
    rows = _blend_rows(x, c, params, role)
    encoder = params.blend_e if role == "speaker" else params.blend_p
    H = encoder(rows)
    if not torch.isfinite(H).all():
        raise NumericalError(f"non-finite {role} blend output for conversation {features.conversation_id!r}")
    return H


def expand_to_prompts(H: torch.Tensor, params: PromptGenerator, role: str):
    """MLP then reshape: returns ``(flat, left, right)``.

    ``flat`` is L x (2*N*d_T); ``left``/``right`` are L x N x d_T, the first
    and last N vectors of each reshaped row.
    """
    cfg = params.cfg
    if H.dim() != 2 or H.shape[1] != cfg.d_t:
        raise ConfigurationError(f"H must be L x {cfg.d_t}, got {tuple(H.shape)}")
    n = cfg.n_e if role == "speaker" else cfg.n_p
    mlp = params.mlp_e if role == "speaker" else params.mlp_p
    flat = mlp(H)
    if flat.shape[1] != 2 * n * cfg.d_t:
        raise ConfigurationError(f"MLP output width {flat.shape[1]} != 2*{n}*{cfg.d_t}")
    shaped = flat.reshape(H.shape[0], 2 * n, cfg.d_t)
    return flat, shaped[:, :n], shaped[:, n:]


def sequentialize_prompts(e_l, p_l, p_r, e_r, params: PromptGenerator):
    """Run the BiLSTM over [e_l..., p_l..., p_r..., e_r...] and re-split.

    Accepts per-utterance ``(N, d_T)`` groups or batched ``(L, N, d_T)``.
    """
    cfg = params.cfg
    single = e_l.dim() == 2
    groups = [g.unsqueeze(0) if single else g for g in (e_l, p_l, p_r, e_r)]
    sizes = [g.shape[1] for g in groups]
    if sizes != [cfg.n_e, cfg.n_p, cfg.n_p, cfg.n_e]:
        raise ConfigurationError(f"group sizes {sizes} != (n_e, n_p, n_p, n_e)=({cfg.n_e}, {cfg.n_p}, {cfg.n_p}, {cfg.n_e})")
    seq = torch.cat(groups, dim=1)
    out, _ = params.lstm(seq)
    parts = torch.split(out, sizes, dim=1)
    if single:
        parts = [p.squeeze(0) for p in parts]
    return tuple(parts)


def generate_prompt_bundle(
    features: ConversationFeatures, params: PromptGenerator, mode: str = "full", as_list: bool = True
):
    """Prompt embeddings for every utterance of a conversation.

    Returns a list of per-utterance bundles, or one stacked bundle when
    ``as_list`` is false.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown prompt mode {mode!r}; expected one of {MODES}")
    cfg = params.cfg
    if mode == "random":
        L = features.length
        table = params.random_prompts.unsqueeze(0).expand(L, -1, -1)
        e_l, p_l, p_r, e_r = torch.split(table, [cfg.n_e, cfg.n_p, cfg.n_p, cfg.n_e], dim=1)
        bundle = PromptBundle(e_l, p_l, p_r, e_r, mode)
    else:
        blend_mode = mode if mode in ("context-only", "commonsense-only") else "full"
        H_e = blend_context(features, params, "speaker", blend_mode)
        H_p = blend_context(features, params, "listener", blend_mode)
        _, e_l, e_r = expand_to_prompts(H_e, params, "speaker")
        _, p_l, p_r = expand_to_prompts(H_p, params, "listener")
        bundle = PromptBundle(*sequentialize_prompts(e_l, p_l, p_r, e_r, params), mode=mode)
    return bundle.split() if as_list else bundle
