"""Embedding-only debiasing by penalized gradient descent on the TDE surrogate.

For one occupation the loss is

    mean_i (1 + p1_i log2 p1_i + p2_i log2 p2_i) + alpha * ||x_hat - x||^2

where p1/p2 are the renormalized he/she probabilities of template i and x
is the concatenation of the occupation's token rows.  The entropy term is
0 exactly at p1 = p2 = 1/2.  Only those rows are optimized (Adam) and
re-installed into the model after every step; the knowledge parameters are
never touched, which ``damp_debias`` verifies through the fingerprint.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from damp.causal import male_probability, mean_tde
from damp.errors import (ConfigError, DampError, InvalidInputError, NumericalError,
                         OptimizationFailure)
from damp.model_api import LanguageModel, Vocabulary, fingerprint
from damp.templates import (GenderedWordList, Template, TemplateGenConfig,
                            generate_template, generate_template_set, occupation_rng)

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DebiasConfig:
    n: int = 50
    m: int = 100
    alpha: float = 1000.0
    lr: float = 0.002
    seed: int = 0
    # SUMT: multiply alpha by 10 per extra outer round (1 = fixed penalty)
    sumt_rounds: int = 1
    heldout_seed_offset: int = 1

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ConfigError("m and n must be at least 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if not 1 <= self.sumt_rounds <= 3:
            raise ConfigError("sumt_rounds must be between 1 and 3")


@dataclass
class DebiasResult:
    occupation: str
    token_ids: list
    initial_rows: np.ndarray
    final_rows: np.ndarray
    loss_curve: list
    final_loss: float
    tde_before: float
    tde_after: float
    displacement: float
    fingerprint_before: bytes = b""
    fingerprint_after: bytes = b""
    template_seeds: dict = field(default_factory=dict)
    n_templates: int = 0
    n_heldout: int = 0

    def report(self) -> dict:
        return {
            "tde_before": self.tde_before,
            "tde_after": self.tde_after,
            "displacement": self.displacement,
            "loss_first": self.loss_curve[0],
            "loss_last": self.loss_curve[-1],
            "loss_final": self.final_loss,
            "iterations": len(self.loss_curve),
            "template_seeds": self.template_seeds,
            "n_templates": self.n_templates,
            "n_heldout": self.n_heldout,
            "token_ids": list(self.token_ids),
        }


def per_template_loss(p1: float, p2: float) -> float:
    """1 + p1 log2 p1 + p2 log2 p2, with 0 log 0 = 0."""
    return 1.0 + p1 * np.log2(max(p1, PROB_FLOOR)) + p2 * np.log2(max(p2, PROB_FLOOR))


def _entropy_term(p1: torch.Tensor) -> torch.Tensor:
    p2 = 1.0 - p1
    per = 1.0 + p1 * torch.log2(p1.clamp_min(PROB_FLOOR)) + p2 * torch.log2(p2.clamp_min(PROB_FLOOR))
    return per.mean()


def occupation_token_ids(vocab: Vocabulary, occupation: str) -> list[int]:
    """Distinct constituent token ids of an occupation, in first-occurrence order."""
    ids = vocab.encode(occupation.lower().split())
    return list(dict.fromkeys(ids))


def _loss(model, templates, ids, rows, x0, alpha):
    table = model.embeddings.detach().index_put((torch.as_tensor(ids),), rows)
    entropy = _entropy_term(male_probability(model, templates, table=table))
    return entropy + alpha * ((rows - x0) ** 2).sum(), entropy


def total_loss(model: LanguageModel, templates: Sequence, token_ids: Sequence[int],
               original_rows, alpha: float) -> float:
    """Loss with the rows currently installed in ``model`` playing x_hat."""
    if len(templates) == 0:
        raise InvalidInputError("total loss needs at least one template")
    ids = list(token_ids)
    x0 = torch.as_tensor(np.asarray(original_rows, dtype=np.float64)).to(model.dtype)
    with torch.no_grad():
        rows = model.embeddings[ids].clone()
        loss, _ = _loss(model, templates, ids, rows, x0, alpha)
    return float(loss)


def total_loss_gradient(model: LanguageModel, templates, token_ids, original_rows, alpha) -> np.ndarray:
    """Exact gradient of :func:`total_loss` w.r.t. the installed rows, shape (len(ids), d)."""
    ids = list(token_ids)
    x0 = torch.as_tensor(np.asarray(original_rows, dtype=np.float64)).to(model.dtype)
    rows = model.embeddings[ids].detach().clone().requires_grad_(True)
    loss, _ = _loss(model, templates, ids, rows, x0, alpha)
    (grad,) = torch.autograd.grad(loss, rows)
    return grad.double().numpy()


def damp_debias(model: LanguageModel, occupation: str, templates: Sequence[Template],
                config: DebiasConfig, heldout: Sequence[Template] | None = None) -> DebiasResult:
    """Optimize the occupation's embedding rows in place.

    ``tde_before``/``tde_after`` are measured on ``heldout`` when given,
    otherwise on the optimization templates.
    """
    if len(templates) == 0:
        raise InvalidInputError(f"no templates for {occupation!r}")
    ids = occupation_token_ids(model.vocab, occupation)
    eval_set = list(heldout) if heldout else list(templates)
    fp_before = fingerprint(model)
    tde_before = mean_tde(model, eval_set, occupation).mean

    index = torch.as_tensor(ids)
    x0 = model.embeddings[index].detach().clone()
    rows = x0.clone().requires_grad_(True)
    curve = []
    alpha = config.alpha
    for _round in range(config.sumt_rounds):
        opt = torch.optim.Adam([rows], lr=config.lr)
        for k in range(config.m):
            loss, _ = _loss(model, templates, ids, rows, x0, alpha)
            if not torch.isfinite(loss):
                raise OptimizationFailure(len(curve))
            curve.append(loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                model.embeddings[index] = rows.detach()
        alpha *= 10.0

    with torch.no_grad():
        final_loss, _ = _loss(model, templates, ids, rows.detach(), x0, alpha / 10.0)
    fp_after = fingerprint(model)
    if fp_after != fp_before:
        raise NumericalError("knowledge parameters changed during debiasing")
    initial = x0.double().numpy()
    final = rows.detach().double().numpy()
    return DebiasResult(
        occupation=occupation,
        token_ids=ids,
        initial_rows=initial,
        final_rows=final,
        loss_curve=curve,
        final_loss=float(final_loss),
        tde_before=tde_before,
        tde_after=mean_tde(model, eval_set, occupation).mean,
        displacement=float(np.linalg.norm(final - initial)),
        fingerprint_before=fp_before,
        fingerprint_after=fp_after,
        n_templates=len(templates),
        n_heldout=len(eval_set),
    )


def merge_shared_tokens(results: Sequence[DebiasResult], vocabulary: Vocabulary | None = None) -> dict:
    """token id -> mean of the debiased rows every occupation proposed for it."""
    seen = set()
    proposals: dict[int, list] = {}
    d = None
    for res in results:
        if res.occupation in seen:
            raise InvalidInputError(f"occupation {res.occupation!r} appears twice")
        seen.add(res.occupation)
        rows = np.asarray(res.final_rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != len(res.token_ids):
            raise InvalidInputError(f"rows of {res.occupation!r} do not match its token ids")
        if d is None:
            d = rows.shape[1]
        elif rows.shape[1] != d:
            raise InvalidInputError("debiased rows differ in dimension")
        for tid, row in zip(res.token_ids, rows):
            if vocabulary is not None and not 0 <= tid < len(vocabulary):
                raise InvalidInputError(f"token id {tid} outside vocabulary")
            proposals.setdefault(int(tid), []).append(row)
    return {tid: np.sum(np.stack(rows), axis=0) / len(rows) for tid, rows in sorted(proposals.items())}


def heldout_templates(model, occupation, gen_config: TemplateGenConfig, exclude,
                      gendered=None, max_draws_factor: int = 20) -> list[Template]:
    """Fresh templates (different seed) whose token sequence is not in ``exclude``."""
    exclude = {tuple(t.token_ids) for t in exclude}
    rng = occupation_rng(gen_config.seed, occupation)
    out = []
    for _ in range(max_draws_factor * max(gen_config.n, 1)):
        if len(out) >= gen_config.n:
            break
        t = generate_template(model, occupation, gen_config, rng, gendered)
        if tuple(t.token_ids) not in exclude:
            out.append(t)
    return out


def template_sets_for(model, occ, gen_config, config, gendered):
    """Optimization templates and a disjoint held-out set drawn with a shifted seed."""
    opt_cfg = replace(gen_config, n=config.n, seed=config.seed)
    templates = generate_template_set(model, occ, opt_cfg, gendered)
    held_cfg = replace(opt_cfg, seed=config.seed + config.heldout_seed_offset)
    held = heldout_templates(model, occ, held_cfg, templates, gendered)
    return templates, held


def _debias_word(model, occ, gen_config, config, gendered, given=None):
    work = model.copy()
    if given is None:
        templates, held = template_sets_for(work, occ, gen_config, config, gendered)
    else:
        templates, held = given
    if not held:
        log.warning("no disjoint held-out templates for %s; evaluating on the optimization set", occ)
    res = damp_debias(work, occ, templates, config, heldout=held or None)
    res.template_seeds = {"optimization": config.seed,
                          "heldout": config.seed + config.heldout_seed_offset}
    return res, templates, held


@dataclass
class VocabularyDebias:
    results: list
    failures: dict
    patch: dict
    heldout: dict
    fingerprint_before: bytes
    fingerprint_after: bytes
    config: DebiasConfig
    tde_after_merge: dict = field(default_factory=dict)

    @property
    def fingerprint_equal(self) -> bool:
        return self.fingerprint_before == self.fingerprint_after

    def to_dict(self) -> dict:
        words = {}
        for res in self.results:
            words[res.occupation] = res.report()
            if res.occupation in self.tde_after_merge:
                words[res.occupation]["tde_after_merge"] = self.tde_after_merge[res.occupation]
        return {
            "words": words,
            "failures": dict(self.failures),
            "patched_token_ids": sorted(self.patch),
            "fingerprint_before": self.fingerprint_before.hex(),
            "fingerprint_after": self.fingerprint_after.hex(),
            "fingerprint_equal": self.fingerprint_equal,
            "config": {"n": self.config.n, "m": self.config.m, "alpha": self.config.alpha,
                       "lr": self.config.lr, "seed": self.config.seed,
                       "sumt_rounds": self.config.sumt_rounds},
        }


def debias_vocabulary(model: LanguageModel, occupations: Sequence[str],
                      gen_config: TemplateGenConfig, config: DebiasConfig,
                      gendered: GenderedWordList | None = None, jobs: int = 1,
                      template_sets: dict | None = None):
    """Debias every occupation independently, merge shared tokens, install.

    ``template_sets`` optionally maps occupation -> (templates, heldout) to
    reuse previously generated sets.  Returns ``(debiased_model,
    VocabularyDebias)``; ``model`` itself is left untouched.  Per-word
    failures are collected rather than raised.
    """
    gendered = gendered or GenderedWordList.default()
    fp_before = fingerprint(model)
    out = model.copy()

    def run(occ):
        try:
            given = template_sets.get(occ) if template_sets else None
            return occ, _debias_word(model, occ, gen_config, config, gendered, given), None
        except DampError as exc:
            return occ, None, f"{type(exc).__name__}: {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outcomes = list(pool.map(run, occupations))
    else:
        outcomes = [run(o) for o in occupations]

    results, failures, heldout = [], {}, {}
    for occ, payload, err in outcomes:
        if err is not None:
            log.warning("debiasing %s failed: %s", occ, err)
            failures[occ] = err
            continue
        res, _templates, held = payload
        results.append(res)
        heldout[occ] = held

    patch = merge_shared_tokens(results, model.vocab)
    with torch.no_grad():
        for tid, row in patch.items():
            out.embeddings[tid] = torch.as_tensor(row, dtype=out.dtype)
    after_merge = {occ: mean_tde(out, held, occ).mean for occ, held in heldout.items() if held}
    summary = VocabularyDebias(results, failures, patch, heldout, fp_before,
                               fingerprint(out), config, after_merge)
    return out, summary
