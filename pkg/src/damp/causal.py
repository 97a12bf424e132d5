"""Gender predictions, total direct effect and the TE = TDE + NIE decomposition.

Two estimators are exposed and labeled differently in reports:

* ``mean_tde`` measures the direct effect against the uniform ground truth
  (p_male = 0.5) and needs no reference model.
* ``total_effect`` and ``decompose`` compare against a reference model
  trained on a balanced corpus, which stands in for the correct parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from damp.errors import DegenerateDistributionError, InvalidInputError, NumericalError
from damp.model_api import LanguageModel, model_id, rows_digest

IDENTITY_TOL = 1e-9


@dataclass(frozen=True)
class GenderPrediction:
    p_male: float
    p_female: float
    template_ref: object = None


@dataclass
class TdeEstimate:
    per_template: list
    mean: float
    occupation: str | None
    template_count: int


@dataclass
class EffectDecomposition:
    te: float
    tde: float
    nie: float
    occupation: str | None = None
    biased_model_id: str = ""
    reference_model_id: str = ""
    intervened_embedding_id: str = ""
    extra: dict = field(default_factory=dict)

    def residual(self) -> float:
        return self.te - (self.tde + self.nie)


def renormalize(p_he: float, p_she: float) -> tuple[float, float]:
    total = p_he + p_she
    if not total > 0:
        raise DegenerateDistributionError("p(he|t) + p(she|t) is zero; cannot renormalize")
    return p_he / total, p_she / total


def _ids(t):
    return list(getattr(t, "token_ids", t))


def pronoun_probabilities(model: LanguageModel, templates, table=None) -> torch.Tensor:
    """Raw (p_he, p_she) per template as an (n, 2) tensor; differentiable through ``table``."""
    logits = model.last_logits([_ids(t) for t in templates], table=table)
    probs = torch.softmax(logits, dim=-1)
    v = model.vocab
    return probs[:, [v.he_id, v.she_id]]


def male_probability(model: LanguageModel, templates, table=None) -> torch.Tensor:
    """Renormalized p_male per template (tensor)."""
    pp = pronoun_probabilities(model, templates, table)
    total = pp.sum(dim=1)
    if not bool((total > 0).all()):
        raise DegenerateDistributionError("p(he|t) + p(she|t) is zero for some template")
    return pp[:, 0] / total


def gender_predictions(model: LanguageModel, templates) -> np.ndarray:
    """p_male for each template as a float64 array."""
    if len(templates) == 0:
        return np.zeros(0)
    with torch.no_grad():
        return male_probability(model, templates).double().numpy()


def gender_prediction(model: LanguageModel, template) -> GenderPrediction:
    with torch.no_grad():
        pp = pronoun_probabilities(model, [template])[0].double().numpy()
    p_male, p_female = renormalize(float(pp[0]), float(pp[1]))
    return GenderPrediction(p_male, p_female, template)


def tde_from_p_male(p_male: float) -> float:
    return abs(0.5 - p_male)


def tde_per_template(model: LanguageModel, template) -> float:
    return tde_from_p_male(gender_prediction(model, template).p_male)


def mean_tde(model: LanguageModel, templates: Sequence, occupation: str | None = None) -> TdeEstimate:
    if len(templates) == 0:
        raise InvalidInputError("mean TDE needs at least one template")
    if occupation is None:
        occupation = getattr(templates[0], "occupation", None)
    per = [tde_from_p_male(p) for p in gender_predictions(model, templates)]
    return TdeEstimate(per, float(np.mean(per)), occupation, len(per))


def _require_shared_vocab(a: LanguageModel, b: LanguageModel):
    if a.vocab != b.vocab:
        raise InvalidInputError("models do not share a vocabulary")
    if a.d != b.d:
        raise InvalidInputError("models differ in embedding dimension")


def total_effect(biased: LanguageModel, reference: LanguageModel, templates) -> float:
    """Signed mean shift of p_male between the biased and the reference model."""
    _require_shared_vocab(biased, reference)
    if len(templates) == 0:
        raise InvalidInputError("total effect needs at least one template")
    diff = gender_predictions(biased, templates) - gender_predictions(reference, templates)
    return float(np.mean(diff))


def _installed(model: LanguageModel, rows: Mapping[int, np.ndarray]) -> torch.Tensor:
    table = model.embeddings.detach().clone()
    for tid, row in rows.items():
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (model.d,):
            raise InvalidInputError(f"intervened row for token {tid} has shape {row.shape}")
        table[int(tid)] = torch.as_tensor(row, dtype=table.dtype)
    return table


def decompose(biased: LanguageModel, intervened: Mapping[int, np.ndarray],
              reference: LanguageModel, templates, occupation: str | None = None) -> EffectDecomposition:
    """Split the total effect into a direct (embedding) and an indirect (transformer) part.

    ``intervened`` maps token id -> candidate embedding row x̂.  With
    a = E[p_male | x, k], b = E[p_male | x̂, k] and c = E[p_male | x̂, k0]:
    tde = a - b, nie = b - c and te = a - c.
    """
    _require_shared_vocab(biased, reference)
    if len(templates) == 0:
        raise InvalidInputError("decomposition needs at least one template")
    with torch.no_grad():
        a = male_probability(biased, templates).double().numpy()
        b = male_probability(biased, templates, table=_installed(biased, intervened)).double().numpy()
        c = male_probability(reference, templates, table=_installed(reference, intervened)).double().numpy()
    te = float(np.mean(a - c))
    tde = float(np.mean(a - b))
    nie = float(np.mean(b - c))
    out = EffectDecomposition(
        te, tde, nie, occupation,
        biased_model_id=model_id(biased),
        reference_model_id=model_id(reference),
        intervened_embedding_id=rows_digest(intervened),
    )
    if abs(out.residual()) >= IDENTITY_TOL:
        raise NumericalError(f"te - (tde + nie) = {out.residual():.3e} violates the telescoping identity")
    return out
