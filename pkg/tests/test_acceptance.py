"""Acceptance checks on the desk-scale toy setting.

Each test records one PASS/FAIL line, printed in the terminal summary.
"""

import contextlib
import math
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_RESULTS
from damp.causal import decompose, gender_prediction
from damp.corpus_synth import DESK_PROFILE
from damp.debias import (DebiasConfig, DebiasResult, debias_vocabulary, merge_shared_tokens,
                         occupation_token_ids, per_template_loss, total_loss_gradient)
from damp.evalsuite.geometry import projection_neighbor_curve
from damp.evalsuite.perplexity import perplexity
from damp.evalsuite.seat import SeatSpec, encode_sentences, seat_effect_size
from damp.evalsuite.stereo import icat_score
from damp.model_api import fingerprint, get_embedding, next_token_distribution, set_embedding
from damp.templates import (GenderedWordList, Template, TemplateGenConfig, generate_template_set,
                            revalidate)

HIGH_BIAS = [o for o, r in DESK_PROFILE.male_rate.items() if r in (0.9, 0.95)]
SINGLE_TOKEN = [o for o in DESK_PROFILE.occupations if " " not in o]


@contextlib.contextmanager
def criterion(name):
    info = {"detail": ""}
    try:
        yield info
    except BaseException:
        ACCEPTANCE_RESULTS.append((name, False, info["detail"]))
        print(f"FAIL {name}: {info['detail']}")
        raise
    ACCEPTANCE_RESULTS.append((name, True, info["detail"]))
    print(f"PASS {name}: {info['detail']}")


@pytest.fixture(scope="module")
def full_run(desk_pair):
    """DAMP with default settings over every occupation of the desk profile."""
    biased, _ = desk_pair
    t0 = time.perf_counter()
    debiased, summary = debias_vocabulary(biased, DESK_PROFILE.occupations, TemplateGenConfig(), DebiasConfig())
    return debiased, summary, time.perf_counter() - t0


def test_k_invariance(desk_pair):
    biased, _ = desk_pair
    occs = ["doctor", "nurse", "pilot", "secretary", "travel agent", "insurance agent"]
    with criterion("K-invariance") as c:
        t0 = time.perf_counter()
        fp = fingerprint(biased)
        before = biased.embeddings.detach().clone()
        debiased, summary = debias_vocabulary(biased, occs, TemplateGenConfig(), DebiasConfig())
        elapsed = time.perf_counter() - t0
        allowed = {t for o in occs for t in occupation_token_ids(biased.vocab, o)}
        after = debiased.embeddings.detach()
        outside = [i for i in range(len(before)) if i not in allowed]
        untouched = bool(torch.equal(before[outside], after[outside]))
        c["detail"] = (f"{len(summary.results)} occupations, fingerprint equal={fingerprint(debiased) == fp}, "
                       f"{len(outside)} other rows bit-identical={untouched}, {elapsed:.1f}s")
        assert summary.failures == {} and len(summary.results) >= 6
        assert fingerprint(debiased) == fp
        assert untouched
        assert elapsed < 60


def test_decomposition_identity(desk_pair, full_run):
    biased, reference = desk_pair
    _, summary, _ = full_run
    with criterion("decomposition identity") as c:
        t0 = time.perf_counter()
        worst = 0.0
        for res in summary.results:
            rows = {t: summary.patch[t] for t in res.token_ids}
            dec = decompose(biased, rows, reference, summary.heldout[res.occupation], res.occupation)
            worst = max(worst, abs(dec.te - (dec.tde + dec.nie)))
        elapsed = time.perf_counter() - t0
        c["detail"] = f"max |te-(tde+nie)| = {worst:.2e} over {len(summary.results)} occupations, {elapsed:.1f}s"
        assert len(summary.results) == len(DESK_PROFILE.occupations)
        assert worst < 1e-9
        assert elapsed < 60


def test_debiasing_effectiveness(desk_pair, full_run):
    _, summary, seconds = full_run
    by_occ = {r.occupation: r for r in summary.results}
    with criterion("debiasing effectiveness") as c:
        ratios = {o: summary.tde_after_merge[o] / by_occ[o].tde_before for o in HIGH_BIAS}
        c["detail"] = ", ".join(f"{o} {by_occ[o].tde_before:.3f}->{summary.tde_after_merge[o]:.3f}"
                                for o in HIGH_BIAS) + f" (all words debiased in {seconds:.0f}s)"
        for o in HIGH_BIAS:
            assert by_occ[o].n_heldout == 50 and by_occ[o].n_templates == 50
        assert all(r <= 0.5 for r in ratios.values()), ratios
        assert seconds < 600


def test_performance_retention(desk_pair, full_run, heldout_corpus):
    biased, _ = desk_pair
    debiased, _, _ = full_run
    with criterion("performance retention") as c:
        before, after = perplexity(biased, heldout_corpus), perplexity(debiased, heldout_corpus)
        change = (after - before) / before
        c["detail"] = f"perplexity {before:.4f} -> {after:.4f} ({100 * change:+.2f}%)"
        assert abs(change) <= 0.05


def _oracle_loss(model, templates, ids, x0, alpha):
    v = model.vocab
    per = []
    for t in templates:
        p = next_token_distribution(model, t.token_ids)
        p1 = p[v.he_id] / (p[v.he_id] + p[v.she_id])
        per.append(1 + sum(q * math.log2(q) for q in (p1, 1 - p1) if q > 0))
    reg = sum(float(np.sum((get_embedding(model, i) - x) ** 2)) for i, x in zip(ids, x0))
    return float(np.mean(per)) + alpha * reg


def test_gradient_correctness(desk_pair, full_run):
    biased, _ = desk_pair
    _, summary, _ = full_run
    with criterion("gradient correctness") as c:
        worst, n = 0.0, 0
        for seed in (0, 1, 2):
            r = np.random.default_rng(seed)
            occ = HIGH_BIAS[seed]
            m = biased.copy()
            res = next(x for x in summary.results if x.occupation == occ)
            templates = summary.heldout[occ]
            ids = res.token_ids
            x0 = np.stack([get_embedding(m, i) for i in ids])
            for i, x in zip(ids, x0):
                set_embedding(m, i, x + r.normal(scale=2e-3, size=m.d))
            grad = total_loss_gradient(m, templates, ids, x0, 1000.0)
            h = 1e-6
            for _ in range(5):
                row, col = int(r.integers(len(ids))), int(r.integers(m.d))
                base = get_embedding(m, ids[row])
                vals = []
                for sgn in (1, -1):
                    x = base.copy()
                    x[col] += sgn * h
                    set_embedding(m, ids[row], x)
                    vals.append(_oracle_loss(m, templates, ids, x0, 1000.0))
                set_embedding(m, ids[row], base)
                fd = (vals[0] - vals[1]) / (2 * h)
                worst = max(worst, abs(grad[row, col] - fd) / abs(fd))
                n += 1
        c["detail"] = f"max relative error {worst:.2e} over {n} coordinates x 3 seeds"
        assert n >= 15 and worst < 1e-4


def test_template_validity(desk_pair, full_run):
    biased, _ = desk_pair
    _, summary, _ = full_run
    gendered = GenderedWordList.default()
    with criterion("template validity") as c:
        gen = TemplateGenConfig()
        checked = valid = 0
        for occ, held in summary.heldout.items():
            # optimization set as drawn inside debias_vocabulary
            opt = generate_template_set(biased, occ, TemplateGenConfig(n=50, seed=0), gendered)
            templates = opt + held
            prefix = 1 + len(occ.split())
            ok = revalidate(biased, templates, gen.s, gendered)
            for t, good in zip(templates, ok):
                checked += 1
                valid += good and len(t.tokens) - prefix <= gen.max_len
        c["detail"] = f"{valid}/{checked} templates re-validated (s={gen.s}, max {gen.max_len} sampled tokens)"
        assert valid == checked > 0


def test_icat_formula():
    with criterion("icat formula") as c:
        value = icat_score(89.47, 49.02)
        grid = [(lms, ss) for lms in np.linspace(0, 100, 21) for ss in np.linspace(0, 100, 201)]
        bounds = all(0 <= icat_score(lms, ss) <= lms + 1e-12 for lms, ss in grid)
        equality = all((abs(icat_score(lms, ss) - lms) < 1e-12) == (ss == 50 or lms == 0) for lms, ss in grid)
        c["detail"] = f"icat(89.47, 49.02) = {value:.4f}; bounds hold={bounds}; equality iff ss=50={equality}"
        assert abs(value - 87.72) <= 0.01
        assert bounds and equality


def test_loss_anchors(desk_pair):
    biased, _ = desk_pair
    with criterion("loss anchors") as c:
        v = biased.vocab
        gendered = GenderedWordList.default()
        neutral = [i for i, t in enumerate(v.tokens) if t not in gendered and i != v.bos_id]
        r = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            ids = tuple(int(x) for x in r.choice(neutral, size=int(r.integers(1, 16))))
            t = Template(ids, tuple(v.decode(ids)), "random", 0.0, 0.0)
            pred = gender_prediction(biased, t)
            worst = max(worst, abs(pred.p_male + pred.p_female - 1))
        c["detail"] = (f"L(0.5,0.5)={per_template_loss(0.5, 0.5)}, L(1,0)={per_template_loss(1.0, 0.0)}, "
                       f"max |p_male+p_female-1| = {worst:.1e} on 1000 random templates")
        assert per_template_loss(0.5, 0.5) == 0.0
        assert per_template_loss(1.0, 0.0) == 1.0
        assert worst <= 1e-12


def test_bpe_merge(full_run, desk_pair):
    biased, _ = desk_pair
    debiased, summary, _ = full_run
    with criterion("BPE merge") as c:
        r = np.random.default_rng(0)
        cases = 0
        for _ in range(100):
            # dyadic values: the exact mean is representable
            a = r.integers(-2 ** 20, 2 ** 20, size=8) / 2.0 ** 10
            b = r.integers(-2 ** 20, 2 ** 20, size=8) / 2.0 ** 10
            ra = DebiasResult("x shared", [1, 2], np.stack([a, a]), np.stack([a, a]), [0.0], 0, 0, 0, 0)
            rb = DebiasResult("y shared", [3, 2], np.stack([b, b]), np.stack([b, b]), [0.0], 0, 0, 0, 0)
            merged = merge_shared_tokens([ra, rb])
            assert merged[2].tobytes() == ((a + b) / 2).tobytes()
            assert merged[1].tobytes() == a.tobytes() and merged[3].tobytes() == b.tobytes()
            cases += 1
        agent = biased.vocab.id_of["agent"]
        props = [res.final_rows[res.token_ids.index(agent)] for res in summary.results if agent in res.token_ids]
        installed = get_embedding(debiased, agent)
        c["detail"] = f"{cases} synthetic cases bitwise exact; desk 'agent' row = mean of {len(props)} proposals"
        assert len(props) == 2
        assert installed.tobytes() == ((props[0] + props[1]) / 2).tobytes()


def test_geometry_flattening(desk_pair, full_run):
    biased, _ = desk_pair
    debiased, _, _ = full_run
    with criterion("geometry flattening") as c:
        before = projection_neighbor_curve(biased, SINGLE_TOKEN)
        after = projection_neighbor_curve(debiased, SINGLE_TOKEN, before.k, basis=before.subspace_basis)
        c["detail"] = (f"Spearman {before.correlation:.3f} -> {after.correlation:.3f} "
                       f"(k={before.k}, {len(SINGLE_TOKEN)} occupations)")
        assert before.correlation > 0.5
        assert abs(after.correlation) <= 0.5 * abs(before.correlation)


def _brute_force_d(X, Y, A, B):
    def cos(u, v):
        return sum(a * b for a, b in zip(u, v)) / math.sqrt(sum(a * a for a in u) * sum(b * b for b in v))

    def s(w):
        return sum(cos(w, a) for a in A) / len(A) - sum(cos(w, b) for b in B) / len(B)

    vals = [s(x) for x in X] + [s(y) for y in Y]
    mean = sum(vals) / len(vals)
    sd = math.sqrt(sum((x - mean) ** 2 for x in vals) / (len(vals) - 1))
    return (sum(vals[: len(X)]) / len(X) - sum(vals[len(X):]) / len(Y)) / sd


def test_seat_oracle(desk_pair, full_run):
    biased, _ = desk_pair
    debiased, _, _ = full_run
    spec = SeatSpec.default()
    with criterion("SEAT oracle equivalence") as c:
        worst, ds = 0.0, []
        for model in (biased, debiased):
            enc = [encode_sentences(model, s).tolist()
                   for s in (spec.targets_x, spec.targets_y, spec.attributes_a, spec.attributes_b)]
            assert max(len(e) for e in enc) <= 10
            d = seat_effect_size(model, spec)
            ds.append(d)
            worst = max(worst, abs(d - _brute_force_d(*enc)))
        c["detail"] = f"max |d - oracle| = {worst:.1e} (d before {ds[0]:.3f}, after {ds[1]:.3f})"
        assert worst < 1e-9
