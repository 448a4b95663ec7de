"""Continuous prompts built from conversation context and commonsense, for masked-LM emotion recognition."""

__version__ = "0.1.0"

from .cloze import (
    MaskDistribution,
    TokenPlan,
    Verbalizer,
    assemble_input,
    build_verbalizer,
    classify_utterance,
    inject_embeddings,
    predict_mask_distribution,
)
from .corpus import Conversation, Corpus, Utterance, label_set, load_dataset, split_counts
from .encoders import (
    RELATIONS,
    ConversationFeatures,
    encode_commonsense,
    encode_utterance_semantics,
    extract_conversation_features,
    read_feature_cache,
    reference_backend,
    write_feature_cache,
)
from .evaluation import EvalReport, evaluate, weighted_f1
from .model import CisperModel
from .promptgen import (
    PromptBundle,
    PromptGenConfig,
    PromptGenerator,
    blend_context,
    concat_relation_across_utterances,
    expand_to_prompts,
    generate_prompt_bundle,
    sequentialize_prompts,
)
from .train import Checkpoint, RunConfig, compute_loss, load_checkpoint, save_checkpoint, train
