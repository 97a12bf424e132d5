"""Sentence-level association test (SEAT) effect size on model encodings."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from damp.errors import DegenerateStatisticsError, InvalidInputError
from damp.model_api import LanguageModel


@dataclass(frozen=True)
class SeatSpec:
    targets_x: tuple
    targets_y: tuple
    attributes_a: tuple
    attributes_b: tuple
    name: str = "seat"

    def __post_init__(self):
        for field_name in ("targets_x", "targets_y", "attributes_a", "attributes_b"):
            if not getattr(self, field_name):
                raise InvalidInputError(f"SEAT set {field_name} is empty")

    @classmethod
    def from_dict(cls, data: dict, name: str = "seat") -> "SeatSpec":
        # also accepts the original SEAT layout: {"targ1": {"examples": [...]}, ...}
        keys = {"targets_x": "targ1", "targets_y": "targ2", "attributes_a": "attr1", "attributes_b": "attr2"}
        sets = {}
        for ours, theirs in keys.items():
            value = data.get(ours, data.get(theirs))
            if isinstance(value, dict):
                value = value.get("examples")
            if not isinstance(value, list):
                raise InvalidInputError(f"SEAT spec lacks a string list for {ours!r}")
            sets[ours] = tuple(value)
        return cls(**sets, name=data.get("name", name))

    @classmethod
    def load(cls, path) -> "SeatSpec":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), name=path.stem)

    @classmethod
    def default(cls) -> "SeatSpec":
        text = resources.files("damp.data").joinpath("seat_toy.json").read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text), name="seat_toy")

    def to_dict(self) -> dict:
        return {"name": self.name, "targets_x": list(self.targets_x), "targets_y": list(self.targets_y),
                "attributes_a": list(self.attributes_a), "attributes_b": list(self.attributes_b)}


def encode_sentences(model: LanguageModel, sentences) -> np.ndarray:
    """Mean of final-layer hidden states over each sentence's tokens."""
    ids = [model.vocab.encode(s) for s in sentences]
    out = []
    with torch.no_grad():
        for seq in ids:
            idx, _ = model.batch([seq])
            h = model.net.hidden_states(idx)[0, 1 : 1 + len(seq)]
            out.append(h.mean(dim=0).double().numpy())
    return np.stack(out)


def _unit(m):
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def association(w: np.ndarray, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """s(w, A, B) for every row of ``w``."""
    w, A, B = _unit(w), _unit(A), _unit(B)
    return (w @ A.T).mean(axis=1) - (w @ B.T).mean(axis=1)


def effect_size_from_vectors(X, Y, A, B) -> float:
    sx, sy = association(X, A, B), association(Y, A, B)
    std = np.std(np.concatenate([sx, sy]), ddof=1)
    if not std > 0:
        raise DegenerateStatisticsError("all associations are equal; effect size undefined")
    return float((sx.mean() - sy.mean()) / std)


def seat_effect_size(model: LanguageModel, spec: SeatSpec) -> float:
    """Positive when X is associated with A (and Y with B)."""
    X = encode_sentences(model, spec.targets_x)
    Y = encode_sentences(model, spec.targets_y)
    A = encode_sentences(model, spec.attributes_a)
    B = encode_sentences(model, spec.attributes_b)
    return effect_size_from_vectors(X, Y, A, B)


def permutation_p_value(X, Y, A, B, n_samples: int = 10000, seed: int = 0) -> float:
    """One-sided p-value of the test statistic under random X/Y re-partitions.

    Enumerates exactly when the number of partitions does not exceed ``n_samples``.
    """
    s = association(np.concatenate([X, Y]), A, B)
    nx = len(X)
    observed = s[:nx].sum() - s[nx:].sum()
    total = s.sum()
    idx = range(len(s))
    n_parts = int(np.round(np.exp(np.sum(np.log(np.arange(1, len(s) + 1)))
                                  - np.sum(np.log(np.arange(1, nx + 1)))
                                  - np.sum(np.log(np.arange(1, len(s) - nx + 1))))))
    if n_parts <= n_samples:
        stats = [2 * s[list(c)].sum() - total for c in itertools.combinations(idx, nx)]
    else:
        rng = np.random.default_rng(seed)
        stats = [2 * s[rng.permutation(len(s))[:nx]].sum() - total for _ in range(n_samples)]
    return float(np.mean(np.asarray(stats) >= observed - 1e-12))
