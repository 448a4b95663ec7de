"""End-to-end model: prompt generator + masked-LM + verbalizer."""

from __future__ import annotations

from typing import Dict, List, Optional

import torch
from torch import nn

from .cloze import (
    MaskDistribution,
    TokenPlan,
    Verbalizer,
    assemble_input,
    batch_embeddings,
    classify_utterance,
    predict_mask_distribution,
)
from .corpus import Conversation
from .encoders import ConversationFeatures
from .errors import ConfigurationError
from .promptgen import MODES, PromptGenConfig, PromptGenerator

MODEL_MODES = MODES + ("fixed-template",)
_SIDE_OF_MODE = {"left": "left", "right": "right", "fixed-template": "fixed"}


class CisperModel(nn.Module):
    """Scores every utterance of a conversation at its mask position.

    ``mode`` picks the prompt source: the full generator, one of the
    ablations, a one-sided layout, or the fixed textual template (no
    pseudo tokens at all).
    """

    def __init__(
        self,
        plm: nn.Module,
        verbalizer: Verbalizer,
        gen_config: Optional[PromptGenConfig] = None,
        mode: str = "full",
        one_side: str = "relocate",
    ):
        super().__init__()
        if mode not in MODEL_MODES:
            raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODEL_MODES}")
        self.plm = plm
        self.verbalizer = verbalizer
        self.mode = mode
        self.one_side = one_side
        self.side = _SIDE_OF_MODE.get(mode, "symmetric")
        if mode == "fixed-template":
            self.generator = None
            self.gen_config = gen_config
        else:
            if gen_config is None:
                raise ConfigurationError("prompt modes need a PromptGenConfig")
            if gen_config.d_t != plm.hidden_size:
                raise ConfigurationError(
                    f"prompt width d_t={gen_config.d_t} must equal the PLM embedding width {plm.hidden_size}"
                )
            self.gen_config = gen_config
            self.generator = PromptGenerator(gen_config)
        self._plans: Dict[str, TokenPlan] = {}

    @property
    def tokenizer(self):
        return self.plm.tokenizer

    def plm_parameters(self):
        return self.plm.parameters()

    def plan(self, utterance) -> TokenPlan:
        key = utterance.uid + "\x1f" + utterance.text
        if key not in self._plans:
            n_e = self.gen_config.n_e if self.gen_config else 0
            n_p = self.gen_config.n_p if self.gen_config else 0
            self._plans[key] = assemble_input(
                utterance, self.tokenizer, n_e, n_p, self.side, self.plm.max_length, self.one_side
            )
        return self._plans[key]

    def bundles(self, features: ConversationFeatures):
        if self.generator is None:
            return [None] * features.length
        return self.generator(features, self.mode).split()

    def forward(self, conversation: Conversation, features: ConversationFeatures) -> MaskDistribution:
        if features.length != len(conversation):
            raise ConfigurationError(
                f"{conversation.id}: features have {features.length} rows for {len(conversation)} utterances"
            )
        plans = [self.plan(u) for u in conversation.utterances]
        embeds, attn, positions = batch_embeddings(plans, self.bundles(features), self.plm)
        return predict_mask_distribution(embeds, positions, self.plm, attn)

    @torch.no_grad()
    def predict(self, conversation: Conversation, features: ConversationFeatures, classify_mode: str = "restricted") -> List[str]:
        was_training = self.training
        self.eval()
        try:
            return classify_utterance(self(conversation, features), self.verbalizer, classify_mode)
        finally:
            self.train(was_training)
