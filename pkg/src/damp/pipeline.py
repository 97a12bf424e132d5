"""Stage orchestration: synth -> train -> templates -> debias -> tde -> evals -> report.

Every stage reads its upstream artifacts from the output directory, writes
its own artifacts atomically and leaves a ``<stage>.manifest.json`` recording
the config hash, seeds and SHA-256 digests of inputs and outputs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from damp.causal import decompose, mean_tde
from damp.corpus_synth import (DESK_PROFILE, BiasProfile, Corpus, TrainConfig, build_vocabulary,
                               cooccurrence_rates, fit_language_model, generate_corpus,
                               train_toy_model)
from damp.debias import DebiasConfig, debias_vocabulary, occupation_token_ids, template_sets_for
from damp.errors import ConfigError, DegenerateStatisticsError, InvalidInputError, MissingUpstreamError
from damp.evalsuite.geometry import projection_neighbor_curve, projection_plane
from damp.evalsuite.perplexity import perplexity
from damp.evalsuite.seat import SeatSpec, seat_effect_size
from damp.evalsuite.stereo import StereoFixture, stereo_metrics
from damp.evalsuite.svg import neighbor_plot, plane_plot
from damp.model_api import (ArchConfig, Vocabulary, fingerprint, load_checkpoint, load_patch,
                            save_checkpoint, save_patch)
from damp.templates import (GenderedWordList, TemplateGenConfig, load_templates, revalidate,
                            save_templates)

log = logging.getLogger(__name__)

STAGES = ("synth", "train", "templates", "debias", "tde", "eval-seat", "eval-ppl",
          "eval-stereo", "geometry", "report")
BACKENDS = ("toy", "adapter")

# file names, keyed for manifests
VOCAB = "vocab.txt"
PROFILE = "profile.yaml"
CORPUS = {"biased": "corpus_biased.txt", "reference": "corpus_reference.txt",
          "heldout": "corpus_heldout.txt"}
MODEL = {"biased": "model_biased.ckpt", "reference": "model_reference.ckpt",
         "debiased": "model_debiased.ckpt"}
TEMPLATES = "templates.jsonl"
HELDOUT = "templates_heldout.jsonl"
PATCH = "embedding_patch.bin"


@dataclass
class PipelineConfig:
    out: str = "runs/desk"
    seed: int = 0
    deterministic: bool = False
    jobs: int = 1
    backend: str = "toy"
    profile: str | None = None
    gendered_words: str | None = None
    seat: str | None = None
    stereo: str | None = None
    occupations: list | None = None
    corpus_size: int = 30000
    heldout_size: int = 2000
    arch: dict = field(default_factory=dict)
    adapter: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    templates: dict = field(default_factory=dict)
    debias: dict = field(default_factory=dict)
    geometry_k: int | None = None

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.corpus_size < 1 or self.heldout_size < 1:
            raise ConfigError("corpus sizes must be positive")
        if self.occupations is not None and not isinstance(self.occupations, list):
            raise ConfigError("occupations must be a list")
        for name in ("arch", "adapter", "train", "templates", "debias"):
            if "seed" in getattr(self, name):
                raise ConfigError(f"[{name}] must not set a seed; use the global seed")
        for name in ("profile", "gendered_words", "seat", "stereo"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{name} file {path!r} does not exist")
        # constructing the stage configs validates them up front
        self.arch_config()
        self.train_config()
        self.template_config()
        self.debias_config()
        if self.geometry_k is not None and self.geometry_k < 1:
            raise ConfigError("geometry_k must be at least 1")
        if self.deterministic:
            self.jobs = 1

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = {k: dict(v) if isinstance(v, dict) else v for k, v in (data or {}).items()}
        paths = data.pop("paths", None) or {}
        data.update(paths)
        corpus = data.pop("corpus", None) or {}
        if "size" in corpus:
            data["corpus_size"] = corpus.pop("size")
        if "heldout_size" in corpus:
            data["heldout_size"] = corpus.pop("heldout_size")
        if corpus:
            raise ConfigError(f"unknown [corpus] keys: {sorted(corpus)}")
        geometry = data.pop("geometry", None) or {}
        if "k" in geometry:
            data["geometry_k"] = geometry.pop("k")
        if geometry:
            raise ConfigError(f"unknown [geometry] keys: {sorted(geometry)}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_dict(data or {})

    def _section(self, cls, values, **extra):
        try:
            return cls(**{**values, **extra})
        except TypeError as exc:
            raise ConfigError(f"invalid {cls.__name__} settings: {exc}") from None

    def arch_config(self) -> ArchConfig:
        try:
            return self._section(ArchConfig, self.arch, seed=self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        return self._section(TrainConfig, self.train, seed=self.seed)

    def template_config(self) -> TemplateGenConfig:
        return self._section(TemplateGenConfig, self.templates, seed=self.seed)

    def debias_config(self) -> DebiasConfig:
        return self._section(DebiasConfig, self.debias, seed=self.seed)

    def bias_profile(self) -> BiasProfile:
        return BiasProfile.load(self.profile) if self.profile else DESK_PROFILE

    def occupation_list(self) -> list[str]:
        if self.occupations is None:
            return list(self.bias_profile().occupations)
        return [str(o) for o in self.occupations]

    def gendered(self) -> GenderedWordList:
        if self.gendered_words:
            return GenderedWordList.load(self.gendered_words)
        return GenderedWordList.default()

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        # run-location and parallelism do not change results
        for key in ("out", "jobs"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()


# -- artifact IO --------------------------------------------------------------


def write_atomic(path: Path, data: bytes | str):
    if isinstance(data, str):
        data = data.encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """One output directory plus the config that produces it."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.out)
        self.inputs: dict = {}
        self.outputs: list = []

    def path(self, name) -> Path:
        return self.out / name

    def require(self, name, stage) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingUpstreamError(stage, p)
        self.inputs[name] = file_digest(p)
        return p

    def write(self, name, data):
        write_atomic(self.path(name), data)
        self.outputs.append(name)

    def wrote(self, name):
        self.outputs.append(name)

    def manifest(self, stage, extra=None):
        m = {
            "stage": stage,
            "config_hash": self.config.digest(),
            "seed": self.config.seed,
            "backend": self.config.backend,
            "deterministic": self.config.deterministic,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {n: file_digest(self.path(n)) for n in sorted(set(self.outputs))},
        }
        if extra:
            m.update(extra)
        write_atomic(self.path(f"{stage}.manifest.json"), dumps_json(m))
        return m

    # shared loaders
    def vocab(self) -> Vocabulary:
        return Vocabulary.load(self.require(VOCAB, "synth"))

    def model(self, which: str):
        stage = "debias" if which == "debiased" else "train"
        return load_checkpoint(self.require(MODEL[which], stage), self.vocab())

    def corpus(self, which: str, vocab: Vocabulary) -> Corpus:
        profile = self.config.bias_profile()
        return Corpus.load(self.require(CORPUS[which], "synth"), vocab, profile)

    def template_sets(self, vocab) -> dict:
        opt = load_templates(self.require(TEMPLATES, "templates"), vocab)
        held = load_templates(self.require(HELDOUT, "templates"), vocab)
        sets = {}
        for t in opt:
            sets.setdefault(t.occupation, ([], []))[0].append(t)
        for t in held:
            sets.setdefault(t.occupation, ([], []))[1].append(t)
        return sets


# -- stages ---------------------------------------------------------------------


def stage_synth(run: Run) -> dict:
    cfg = run.config
    profile = cfg.bias_profile()
    vocab = build_vocabulary(profile)
    seeds = {"biased": cfg.seed, "reference": cfg.seed, "heldout": cfg.seed + 1}
    corpora = {
        "biased": generate_corpus(profile, cfg.corpus_size, seeds["biased"], cfg.jobs),
        "reference": generate_corpus(profile.balanced(), cfg.corpus_size, seeds["reference"], cfg.jobs),
        "heldout": generate_corpus(profile.balanced(), cfg.heldout_size, seeds["heldout"], cfg.jobs),
    }
    run.write(VOCAB, "".join(t + "\n" for t in vocab.tokens))
    run.write(PROFILE, yaml.safe_dump(profile.to_dict(), sort_keys=True))
    for name, corpus in corpora.items():
        run.write(CORPUS[name], "".join(t + "\n" for t in corpus.texts()))
    rates = cooccurrence_rates(corpora["biased"])
    table = [[occ, repr(profile.male_rate[occ]), repr(r) if n else "", n] for occ, (r, n) in sorted(rates.items())]
    run.write("cooccurrence.csv", csv_text(["occupation", "target_male_rate", "observed_male_rate", "n"], table))
    report = {"seeds": seeds, "sentences": {k: len(c) for k, c in corpora.items()},
              "tokens": {k: c.token_count() for k, c in corpora.items()},
              "cooccurrence": {occ: {"observed": r if n else None, "n": n, "target": profile.male_rate[occ]}
                               for occ, (r, n) in rates.items()}}
    run.write("synth.json", dumps_json(report))
    return run.manifest("synth", {"seeds": seeds})


def _train_one(run: Run, corpus: Corpus):
    cfg = run.config
    if cfg.backend == "toy":
        return train_toy_model(corpus, cfg.arch_config(), cfg.train_config())
    from damp.adapter import tiny_gpt2

    net = tiny_gpt2(corpus.vocab, seed=cfg.seed, **cfg.adapter)
    return fit_language_model(net, corpus, cfg.train_config())


def stage_train(run: Run) -> dict:
    vocab = run.vocab()
    report = {}
    for which in ("biased", "reference"):
        model = _train_one(run, run.corpus(which, vocab))
        save_checkpoint(model, run.path(MODEL[which]))
        run.wrote(MODEL[which])
        losses = model.metadata["train_loss"]
        report[which] = {"final_loss": losses[-1], "steps": len(losses)}
    run.write("train.json", dumps_json(report))
    return run.manifest("train")


def stage_templates(run: Run) -> dict:
    cfg = run.config
    vocab = run.vocab()
    model = run.model("biased")
    gendered = cfg.gendered()
    gen, deb = cfg.template_config(), cfg.debias_config()
    opt, held, rows = [], [], []
    for occ in cfg.occupation_list():
        o, h = template_sets_for(model, occ, gen, deb, gendered)
        ok = revalidate(model, o + h, gen.s, gendered)
        opt += o
        held += h
        rows.append([occ, len(o), len(h), sum(ok), len(ok)])
    save_templates(run.path(TEMPLATES), opt)
    save_templates(run.path(HELDOUT), held)
    run.wrote(TEMPLATES)
    run.wrote(HELDOUT)
    valid = sum(r[3] for r in rows)
    total = sum(r[4] for r in rows)
    report = {"per_occupation": {r[0]: {"optimization": r[1], "heldout": r[2], "valid": r[3]} for r in rows},
              "validity_rate": valid / total if total else 1.0, "s": gen.s}
    run.write("templates.json", dumps_json(report))
    run.write("templates.csv", csv_text(["occupation", "optimization", "heldout", "valid", "total"], rows))
    del vocab
    return run.manifest("templates", {"seeds": {"optimization": deb.seed,
                                                "heldout": deb.seed + deb.heldout_seed_offset}})


def stage_debias(run: Run) -> dict:
    cfg = run.config
    vocab = run.vocab()
    model = run.model("biased")
    sets = run.template_sets(vocab)
    occs = cfg.occupation_list()
    for occ in occs:
        if occ not in sets:
            raise MissingUpstreamError("templates", f"{TEMPLATES} entry for {occ!r}")
    debiased, summary = debias_vocabulary(model, occs, cfg.template_config(), cfg.debias_config(),
                                          cfg.gendered(), jobs=cfg.jobs, template_sets=sets)
    save_checkpoint(debiased, run.path(MODEL["debiased"]))
    ids = sorted(summary.patch)
    rows = np.stack([summary.patch[t] for t in ids]) if ids else np.zeros((0, model.d))
    save_patch(run.path(PATCH), ids, rows)
    run.wrote(MODEL["debiased"])
    run.wrote(PATCH)
    # recompute from the stored artifacts rather than trusting in-memory state
    stored = run.model("debiased")
    report = summary.to_dict()
    report["fingerprint_equal"] = fingerprint(stored) == fingerprint(model)
    run.write("debias.json", dumps_json(report))
    table = [[occ, w["tde_before"], w["tde_after"], w["displacement"], w["loss_final"]]
             for occ, w in sorted(report["words"].items())]
    run.write("debias.csv", csv_text(["occupation", "tde_before", "tde_after", "displacement", "final_loss"], table))
    return run.manifest("debias", {"fingerprint_equal": report["fingerprint_equal"]})


def stage_tde(run: Run) -> dict:
    vocab = run.vocab()
    biased = run.model("biased")
    reference = run.model("reference")
    sets = run.template_sets(vocab)
    debiased = run.model("debiased") if run.path(MODEL["debiased"]).exists() else None
    patch = {}
    if run.path(PATCH).exists():
        ids, rows = load_patch(run.require(PATCH, "debias"))
        patch = dict(zip(ids, rows))
    out, table = {}, []
    for occ in run.config.occupation_list():
        if occ not in sets:
            raise MissingUpstreamError("templates", f"{TEMPLATES} entry for {occ!r}")
        opt, held = sets[occ]
        eval_set = held or opt
        entry = {"tde_before": mean_tde(biased, eval_set, occ).mean, "n_templates": len(eval_set)}
        tids = occupation_token_ids(vocab, occ)
        if debiased is not None:
            entry["tde_after"] = mean_tde(debiased, eval_set, occ).mean
            if all(t in patch for t in tids):
                dec = decompose(biased, {t: patch[t] for t in tids}, reference, eval_set, occ)
                entry.update(te=dec.te, tde=dec.tde, nie=dec.nie, residual=dec.residual())
        out[occ] = entry
        table.append([occ, entry["tde_before"], entry.get("tde_after", ""), entry.get("te", ""),
                      entry.get("tde", ""), entry.get("nie", "")])
    report = {"per_occupation": out}
    if out:
        report["mean_tde_before"] = float(np.mean([e["tde_before"] for e in out.values()]))
        if debiased is not None:
            report["mean_tde_after"] = float(np.mean([e["tde_after"] for e in out.values()]))
    run.write("tde.json", dumps_json(report))
    run.write("tde.csv", csv_text(["occupation", "mean_tde_before", "mean_tde_after", "te", "tde", "nie"], table))
    return run.manifest("tde")


def _before_after(run: Run, fn, name) -> dict:
    before, after = fn(run.model("biased")), fn(run.model("debiased"))
    report = {"before": before, "after": after}
    run.write(f"{name}.json", dumps_json(report))
    return report


def stage_eval_seat(run: Run) -> dict:
    spec = SeatSpec.load(run.config.seat) if run.config.seat else SeatSpec.default()
    _before_after(run, lambda m: seat_effect_size(m, spec), "seat")
    return run.manifest("eval-seat", {"spec": spec.name})


def stage_eval_ppl(run: Run) -> dict:
    held = run.corpus("heldout", run.vocab())
    rep = _before_after(run, lambda m: perplexity(m, held), "perplexity")
    rep["relative_change"] = (rep["after"] - rep["before"]) / rep["before"]
    run.write("perplexity.json", dumps_json(rep))
    return run.manifest("eval-ppl")


def stage_eval_stereo(run: Run) -> dict:
    fixture = StereoFixture.load(run.config.stereo) if run.config.stereo else StereoFixture.default()
    _before_after(run, lambda m: stereo_metrics(m, fixture), "stereo")
    return run.manifest("eval-stereo")


def geometry_words(config: PipelineConfig) -> list[str]:
    return [o for o in config.bias_profile().occupations if " " not in o]


def stage_geometry(run: Run) -> dict:
    words = geometry_words(run.config)
    biased, debiased = run.model("biased"), run.model("debiased")
    k = run.config.geometry_k
    before = projection_neighbor_curve(biased, words, k)
    # the definitional words are untouched, so both runs share one basis
    after = projection_neighbor_curve(debiased, words, before.k, basis=before.subspace_basis)
    run.write("geometry_before.csv", before.to_csv())
    run.write("geometry_after.csv", after.to_csv())
    run.write("geometry.json", dumps_json({"before": before.to_dict(), "after": after.to_dict()}))
    run.write("geometry_neighbors.svg", neighbor_plot(before, after))
    try:
        plane = plane_plot(words, projection_plane(biased, words), projection_plane(debiased, words))
        run.write("geometry_plane.svg", plane)
    except (InvalidInputError, DegenerateStatisticsError):
        log.warning("gender plane needs two non-degenerate components; plot skipped")
    return run.manifest("geometry")


def _maybe(run: Run, name):
    p = run.path(name)
    if not p.exists():
        return None
    run.inputs[name] = file_digest(p)
    return json.loads(p.read_text(encoding="utf-8"))


def stage_report(run: Run) -> dict:
    run.require("train.manifest.json", "train")
    tde, deb = _maybe(run, "tde.json"), _maybe(run, "debias.json")
    ppl, seat = _maybe(run, "perplexity.json"), _maybe(run, "seat.json")
    stereo, geo = _maybe(run, "stereo.json"), _maybe(run, "geometry.json")
    pick = lambda rep, key: None if rep is None else rep.get(key)  # noqa: E731
    headline = {
        "mean_tde_before": pick(tde, "mean_tde_before"),
        "mean_tde_after": pick(tde, "mean_tde_after"),
        "fingerprint_equal": pick(deb, "fingerprint_equal"),
        "debiased_words": None if deb is None else len(deb["words"]),
        "perplexity_before": pick(ppl, "before"),
        "perplexity_after": pick(ppl, "after"),
        "seat_d_before": pick(seat, "before"),
        "seat_d_after": pick(seat, "after"),
        "icat_before": None if stereo is None else stereo["before"]["icat"],
        "icat_after": None if stereo is None else stereo["after"]["icat"],
        "geometry_correlation_before": None if geo is None else geo["before"]["correlation"],
        "geometry_correlation_after": None if geo is None else geo["after"]["correlation"],
    }
    manifests = {}
    for stage in STAGES[:-1]:
        m = _maybe(run, f"{stage}.manifest.json")
        if m is not None:
            manifests[stage] = m
    summary = {"headline": headline, "stages": manifests, "config": run.config.to_dict()}
    summary["config"].pop("out")
    summary["config"].pop("jobs")
    run.write("summary.json", dumps_json(summary))
    run.write("summary.csv", csv_text(["metric", "value"], [[k, "" if v is None else v]
                                                            for k, v in sorted(headline.items())]))
    return run.manifest("report")


STAGE_FUNCS = {
    "synth": stage_synth, "train": stage_train, "templates": stage_templates,
    "debias": stage_debias, "tde": stage_tde, "eval-seat": stage_eval_seat,
    "eval-ppl": stage_eval_ppl, "eval-stereo": stage_eval_stereo,
    "geometry": stage_geometry, "report": stage_report,
}


def configure_runtime(config: PipelineConfig):
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)


def run_stage(name: str, config: PipelineConfig) -> dict:
    if name not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {name!r}; choose from {', '.join(STAGES)}")
    configure_runtime(config)
    Path(config.out).mkdir(parents=True, exist_ok=True)
    log.info("stage %s -> %s", name, config.out)
    return STAGE_FUNCS[name](Run(config))


def full_pipeline(config: PipelineConfig) -> dict:
    """Run every stage in order, stopping at the first failure."""
    for name in STAGES:
        run_stage(name, config)
    return json.loads((Path(config.out) / "summary.json").read_text(encoding="utf-8"))


def with_overrides(config: PipelineConfig, **overrides) -> PipelineConfig:
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})
