"""Neutral, intermediary template generation by constrained top-k sampling.

Starting from "the <occupation>", tokens are sampled from the model one at
a time.  Gendered samples are dropped (the step still counts), and the
attempt restarts from the prefix once ``max_len`` steps pass without both
pronoun probabilities clearing the threshold ``s``.
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from damp.errors import ConfigError, GenerationFailure, InvalidInputError
from damp.model_api import HE, SHE, LanguageModel, next_token_distribution


class GenderedWordList:
    """Set of gendered words; membership is case-insensitive."""

    def __init__(self, words: Iterable[str]):
        self.words = frozenset(w.strip().lower() for w in words if w.strip())
        missing = {HE, SHE} - self.words
        if missing:
            raise InvalidInputError(f"gendered word list must contain {sorted(missing)}")

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.words

    def __len__(self):
        return len(self.words)

    @classmethod
    def load(cls, path) -> "GenderedWordList":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    @classmethod
    def default(cls) -> "GenderedWordList":
        text = resources.files("damp.data").joinpath("gendered_words.txt").read_text(encoding="utf-8")
        return cls(text.splitlines())


def load_occupations(path=None) -> list[str]:
    if path is None:
        text = resources.files("damp.data").joinpath("occupations.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip()]


@dataclass(frozen=True)
class TemplateGenConfig:
    s: float = 0.08
    max_len: int = 15
    top_k: int = 40
    n: int = 50
    seed: int = 0
    max_restarts: int = 200

    def __post_init__(self):
        if not 0 < self.s < 0.5:
            raise ConfigError(f"threshold s must lie in (0, 0.5), got {self.s}")
        if self.max_len < 2:
            raise ConfigError("max_len must be at least 2")
        if self.top_k < 1 or self.max_restarts < 1:
            raise ConfigError("top_k and max_restarts must be at least 1")
        if self.n < 0:
            raise ConfigError("n must be non-negative")


@dataclass(frozen=True)
class Template:
    token_ids: tuple
    tokens: tuple
    occupation: str
    p_he: float
    p_she: float

    def to_record(self) -> dict:
        return {"occupation": self.occupation, "tokens": list(self.tokens),
                "p_he": self.p_he, "p_she": self.p_she}

    @classmethod
    def from_record(cls, rec: dict, vocab) -> "Template":
        tokens = tuple(rec["tokens"])
        return cls(tuple(vocab.encode(tokens)), tokens, rec["occupation"],
                   float(rec["p_he"]), float(rec["p_she"]))


def is_neutral(tokens: Sequence[str], gendered: GenderedWordList) -> bool:
    return not any(t in gendered for t in tokens)


def is_intermediary(model: LanguageModel, token_ids: Sequence[int], s: float) -> bool:
    p = next_token_distribution(model, token_ids)
    return bool(p[model.vocab.he_id] > s and p[model.vocab.she_id] > s)


def occupation_prefix(model: LanguageModel, occupation: str) -> list[int]:
    words = occupation.lower().split()
    if not words:
        raise InvalidInputError("occupation must be non-empty")
    return model.vocab.encode(["the", *words])


def _top_k_sample(p: np.ndarray, k: int, rng: np.random.Generator) -> int:
    k = min(k, len(p))
    top = np.argsort(-p, kind="stable")[:k]
    w = p[top]
    return int(top[rng.choice(k, p=w / w.sum())])


def generate_template(model: LanguageModel, occupation: str, config: TemplateGenConfig,
                      rng: np.random.Generator, gendered: GenderedWordList | None = None) -> Template:
    gendered = gendered or GenderedWordList.default()
    vocab = model.vocab
    prefix = occupation_prefix(model, occupation)
    if not is_neutral(vocab.decode(prefix), gendered):
        raise InvalidInputError(f"occupation {occupation!r} is itself gendered")
    banned = {i for i, tok in enumerate(vocab.tokens) if tok in gendered} | set(vocab.special_ids)
    he, she = vocab.he_id, vocab.she_id
    for _ in range(config.max_restarts):
        t = list(prefix)
        p = next_token_distribution(model, t)
        for _step in range(config.max_len):
            w = _top_k_sample(p, config.top_k, rng)
            if w not in banned:
                t.append(w)
                p = next_token_distribution(model, t)
            if p[he] > config.s and p[she] > config.s:
                return Template(tuple(t), tuple(vocab.decode(t)), occupation,
                                float(p[he]), float(p[she]))
    raise GenerationFailure(occupation, config.max_restarts)


def occupation_rng(seed: int, occupation: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(occupation.encode("utf-8"))])


def generate_template_set(model: LanguageModel, occupation: str, config: TemplateGenConfig,
                          gendered: GenderedWordList | None = None) -> list[Template]:
    gendered = gendered or GenderedWordList.default()
    rng = occupation_rng(config.seed, occupation)
    return [generate_template(model, occupation, config, rng, gendered) for _ in range(config.n)]


def generate_template_sets(model, occupations, config, gendered=None, jobs: int = 1) -> dict:
    gendered = gendered or GenderedWordList.default()

    def one(occ):
        return occ, generate_template_set(model, occ, config, gendered)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return dict(pool.map(one, occupations))
    return dict(map(one, occupations))


def revalidate(model: LanguageModel, templates: Sequence[Template], s: float,
               gendered: GenderedWordList) -> list[bool]:
    """Independent pass re-checking both admission constraints per template."""
    out = []
    for t in templates:
        tokens = model.vocab.decode(t.token_ids)
        out.append(is_neutral(tokens, gendered) and is_intermediary(model, t.token_ids, s))
    return out


def save_templates(path, templates: Sequence[Template]):
    lines = [json.dumps(t.to_record(), sort_keys=True) for t in templates]
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def load_templates(path, vocab) -> list[Template]:
    out = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if ln.strip():
            out.append(Template.from_record(json.loads(ln), vocab))
    return out
