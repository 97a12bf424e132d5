"""Adapter exposing a transformers causal LM through the LanguageModel interface.

The caller supplies a :class:`Vocabulary` listing one string per model token
id; it must contain the sequence-start token and the two pronouns.  A tied
output head is untied at wrap time so that editing the input embedding never
moves any other parameter.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from damp.errors import InvalidInputError, UnsupportedOperationError
from damp.model_api import LanguageModel, Vocabulary


class CausalLMAdapter(nn.Module):
    def __init__(self, hf_model):
        super().__init__()
        self.hf = hf_model
        emb = hf_model.get_input_embeddings()
        head = hf_model.get_output_embeddings()
        if head is not None and head.weight is emb.weight:
            head.weight = nn.Parameter(emb.weight.detach().clone())
            if hasattr(hf_model.config, "tie_word_embeddings"):
                hf_model.config.tie_word_embeddings = False

    @property
    def max_positions(self) -> int:
        cfg = self.hf.config
        for key in ("n_positions", "max_position_embeddings", "n_ctx"):
            if getattr(cfg, key, None):
                return int(getattr(cfg, key))
        raise UnsupportedOperationError("cannot determine the model's context window")

    def token_embedding(self) -> nn.Parameter:
        return self.hf.get_input_embeddings().weight

    def forward(self, idx, table=None):
        table = self.token_embedding() if table is None else table
        return self.hf(inputs_embeds=F.embedding(idx, table)).logits

    def hidden_states(self, idx, table=None):
        table = self.token_embedding() if table is None else table
        out = self.hf(inputs_embeds=F.embedding(idx, table), output_hidden_states=True)
        return out.hidden_states[-1]


def wrap_causal_lm(hf_model, vocab: Vocabulary, dtype=torch.float64) -> LanguageModel:
    n_rows = hf_model.get_input_embeddings().weight.shape[0]
    if n_rows != len(vocab):
        raise InvalidInputError(f"vocabulary lists {len(vocab)} tokens but the model has {n_rows}")
    net = CausalLMAdapter(hf_model).to(dtype)
    model = LanguageModel(vocab, net, backend="adapter",
                          metadata={"hf_class": type(hf_model).__name__})
    model.check_partition()
    return model


def tiny_gpt2(vocab: Vocabulary, n_embd: int = 32, n_layer: int = 2, n_head: int = 2,
              n_positions: int = 32, seed: int = 0) -> LanguageModel:
    """Randomly initialized small GPT-2 (no download) wrapped as a LanguageModel."""
    from transformers import GPT2Config, GPT2LMHeadModel

    torch.manual_seed(seed)
    cfg = GPT2Config(vocab_size=len(vocab), n_embd=n_embd, n_layer=n_layer, n_head=n_head,
                     n_positions=n_positions, bos_token_id=vocab.bos_id, eos_token_id=vocab.bos_id)
    return wrap_causal_lm(GPT2LMHeadModel(cfg), vocab)


def build_from_config(hf_config: dict, vocab: Vocabulary) -> LanguageModel:
    from transformers import AutoConfig, AutoModelForCausalLM

    cfg = dict(hf_config)
    model_type = cfg.pop("model_type")
    config = AutoConfig.for_model(model_type, **cfg)
    return wrap_causal_lm(AutoModelForCausalLM.from_config(config), vocab)
