"""Gender subspace and the projection / bias-by-neighbors diagnostic."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from damp.errors import DegenerateStatisticsError, InvalidInputError
from damp.model_api import BOS, HE, SHE, LanguageModel

RANK_TOL = 1e-12


def definitional_pairs(grammar=None) -> list[tuple[str, str]]:
    from damp.corpus_synth import DEFAULT_GRAMMAR

    grammar = grammar or DEFAULT_GRAMMAR
    return [(HE, SHE), *grammar.gendered_pairs]


def _table(model_or_table) -> np.ndarray:
    if isinstance(model_or_table, LanguageModel):
        return model_or_table.embeddings.detach().double().numpy()
    return np.asarray(model_or_table, dtype=np.float64)


def gender_subspace(model: LanguageModel, pairs: Sequence[tuple[str, str]],
                    n_components: int = 1) -> np.ndarray:
    """Top principal direction(s) of the centered definitional pairs, shape (n_components, d).

    Each pair contributes its two members minus their mean, i.e. plus and
    minus half the pair difference.  Signs are fixed so that he - she
    projects positive on every component.
    """
    pairs = list(pairs)
    if not pairs:
        raise InvalidInputError("gender subspace needs at least one definitional pair")
    E = _table(model)
    v = model.vocab
    rows = []
    for a, b in pairs:
        ea, eb = E[v.id_of[a]], E[v.id_of[b]]
        mu = (ea + eb) / 2
        rows += [ea - mu, eb - mu]
    _, s, vt = np.linalg.svd(np.asarray(rows), full_matrices=False)
    if n_components < 1:
        raise InvalidInputError("n_components must be at least 1")
    if len(s) < n_components or s[n_components - 1] <= RANK_TOL * max(s[0], 1.0):
        raise DegenerateStatisticsError("definitional pairs do not span the requested subspace")
    basis = vt[:n_components].copy()
    diff = E[v.he_id] - E[v.she_id]
    for i in range(n_components):
        if diff @ basis[i] < 0:
            basis[i] = -basis[i]
    return basis


@dataclass
class GeometryReport:
    words: list
    subspace_basis: np.ndarray
    projections: np.ndarray
    neighbor_fractions: np.ndarray
    correlation: float
    k: int
    degenerate: bool = False
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["word", "projection", "neighbor_fraction"])
        for word, p, f in zip(self.words, self.projections, self.neighbor_fractions):
            w.writerow([word, repr(float(p)), repr(float(f))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"words": list(self.words), "projections": [float(x) for x in self.projections],
                "neighbor_fractions": [float(x) for x in self.neighbor_fractions],
                "correlation": self.correlation, "k": self.k, "degenerate": self.degenerate,
                "subspace_basis": self.subspace_basis.tolist()}


def default_pool(model: LanguageModel) -> list[str]:
    return [t for t in model.vocab.tokens if t != BOS]


def projection_neighbor_curve(model: LanguageModel, words: Sequence[str], k: int | None = None,
                              pool: Sequence[str] | None = None, basis: np.ndarray | None = None,
                              pairs=None) -> GeometryReport:
    """Projection on the gender direction vs. share of male-leaning neighbors.

    Neighbors are the ``k`` nearest pool words by cosine, excluding the word
    itself; a neighbor is male-leaning when its projection is positive.
    ``k`` defaults to 100 clipped to the pool size minus one.
    """
    words = list(words)
    if not words:
        raise InvalidInputError("no words to analyze")
    pool = list(pool) if pool is not None else default_pool(model)
    if k is None:
        k = min(100, len(pool) - 1)
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    if k >= len(pool):
        raise InvalidInputError(f"k={k} must be smaller than the pool size {len(pool)}")
    if basis is None:
        basis = gender_subspace(model, pairs or definitional_pairs())
    b = np.atleast_2d(basis)[0]
    E = _table(model)
    v = model.vocab
    pid = np.array([v.id_of[w] for w in pool])
    P = E[pid]
    pool_proj = P @ b
    norms = np.linalg.norm(P, axis=1)
    if not (norms > 0).all():
        raise DegenerateStatisticsError("zero embedding row in neighbor pool")
    Pn = P / norms[:, None]
    proj, frac = [], []
    for w in words:
        x = E[v.id_of[w]]
        nx = np.linalg.norm(x)
        if not nx > 0:
            raise DegenerateStatisticsError(f"zero embedding for {w!r}")
        cos = Pn @ (x / nx)
        order = [j for j in np.argsort(-cos, kind="stable") if pool[j] != w][:k]
        frac.append(float(np.mean(pool_proj[order] > 0)))
        proj.append(float(x @ b))
    proj, frac = np.asarray(proj), np.asarray(frac)
    if not np.isfinite(proj).all():
        raise DegenerateStatisticsError("non-finite projection")
    degenerate = bool(len(words) < 2 or np.ptp(proj) == 0 or np.ptp(frac) == 0)
    corr = 0.0 if degenerate else float(spearmanr(proj, frac)[0])
    return GeometryReport(words, np.atleast_2d(basis), proj, frac, corr, k, degenerate)


def projection_plane(model: LanguageModel, words: Sequence[str], pairs=None) -> np.ndarray:
    """Coordinates of ``words`` on the top two gender components, shape (n, 2)."""
    basis = gender_subspace(model, pairs or definitional_pairs(), n_components=2)
    E = _table(model)
    return np.stack([E[model.vocab.id_of[w]] @ basis.T for w in words])
