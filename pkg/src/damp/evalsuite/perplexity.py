from __future__ import annotations

import math
from typing import Sequence

import torch

from damp.errors import InvalidInputError
from damp.model_api import LanguageModel


def token_nll(model: LanguageModel, sentences: Sequence[Sequence[int]], batch_size: int = 256):
    """Summed natural-log NLL and number of scored predictions.

    Token i of a sentence is scored given tokens 0..i-1, for i >= 1; the
    first token has no (non-empty) context and is not scored.
    """
    total, count = 0.0, 0
    scored = [list(s) for s in sentences if len(s) >= 2]
    with torch.no_grad():
        for start in range(0, len(scored), batch_size):
            chunk = scored[start : start + batch_size]
            logits = model.sequence_logits([s[:-1] for s in chunk])
            logp = torch.log_softmax(logits.double(), dim=-1)
            for i, s in enumerate(chunk):
                # padded position j holds the prediction after s[:j]
                pos = torch.arange(1, len(s))
                target = torch.as_tensor(s[1:])
                total -= float(logp[i, pos, target].sum())
                count += len(s) - 1
    return total, count


def perplexity(model: LanguageModel, corpus) -> float:
    """exp(mean per-token NLL) over all next-token predictions in ``corpus``."""
    sentences = getattr(corpus, "sentences", corpus)
    nll, n = token_nll(model, sentences)
    if n == 0:
        raise InvalidInputError("corpus has no scorable tokens")
    return math.exp(nll / n)
