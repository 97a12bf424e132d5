"""Synthetic gender-imbalanced corpora and toy-model training.

Sentences come from a handful of fixed skeletons.  Occupation sentences bind
a pronoun to the occupation with gender drawn from the profile's
``male_rate``; "tell" sentences introduce a gender-balanced second
participant that the pronoun refers to half of the time, which is what makes
contexts like "the doctor told the patient that" genuinely ambiguous.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from damp.errors import InvalidInputError, TrainingFailure
from damp.model_api import BOS, HE, SHE, ArchConfig, LanguageModel, Vocabulary, build_toy_model

log = logging.getLogger(__name__)

BLOCK_SIZE = 1000


@dataclass(frozen=True)
class Grammar:
    say_verbs: tuple = ("said", "thought", "believed", "claimed", "mentioned",
                        "explained", "felt", "knew", "hoped", "announced")
    tell_verbs: tuple = ("told", "asked", "reminded", "informed", "promised",
                         "warned", "assured", "showed", "taught", "convinced")
    participants: tuple = ("patient", "client", "customer", "student", "visitor",
                           "neighbor", "friend", "guest", "passenger", "reader")
    # (male, female) definitional nouns
    gendered_pairs: tuple = (("man", "woman"), ("boy", "girl"), ("father", "mother"),
                             ("brother", "sister"), ("son", "daughter"), ("king", "queen"),
                             ("husband", "wife"), ("uncle", "aunt"))
    adjectives: tuple = ("tired", "busy", "late", "ready", "happy", "early",
                         "sick", "right", "wrong", "calm", "angry", "hungry")
    modals: tuple = ("would", "could", "will", "might")
    base_verbs: tuple = ("finish", "read", "sign", "check", "bring", "fix", "open", "find")
    past_verbs: tuple = ("finished", "signed", "checked", "brought", "fixed",
                         "opened", "found", "lost", "forgot", "needed")
    objects: tuple = ("report", "keys", "plan", "book", "car", "letter",
                      "door", "money", "file", "form")
    things: tuple = ("weather", "train", "market", "meeting", "city",
                     "house", "garden", "road", "room", "window")
    thing_adjectives: tuple = ("nice", "cold", "quiet", "crowded", "empty",
                               "closed", "dark", "clean", "old", "new")
    times: tuple = ("today", "yesterday", "again", "there")
    # relative frequency of each skeleton
    weights: dict = field(default_factory=lambda: {
        "occ_say": 0.26, "occ_tell": 0.26, "other_say": 0.08, "definitional": 0.16,
        "pronoun": 0.06, "occ_plain": 0.04, "distractor": 0.14,
    })

    @property
    def male_words(self) -> tuple:
        return (HE,) + tuple(m for m, _ in self.gendered_pairs)

    @property
    def female_words(self) -> tuple:
        return (SHE,) + tuple(f for _, f in self.gendered_pairs)

    def lexicon(self) -> list[str]:
        words = ["the", "that", "was", HE, SHE]
        for group in (self.say_verbs, self.tell_verbs, self.participants,
                      [w for pair in self.gendered_pairs for w in pair],
                      self.adjectives, self.modals, self.base_verbs, self.past_verbs,
                      self.objects, self.things, self.thing_adjectives, self.times):
            words.extend(group)
        return words


DEFAULT_GRAMMAR = Grammar()


@dataclass(frozen=True)
class BiasProfile:
    male_rate: dict  # occupation (space-separated tokens) -> probability of a male referent
    grammar: Grammar = DEFAULT_GRAMMAR

    def __post_init__(self):
        if not self.male_rate:
            raise InvalidInputError("bias profile needs at least one occupation")
        for occ, r in self.male_rate.items():
            if not 0.0 <= float(r) <= 1.0:
                raise InvalidInputError(f"male_rate for {occ!r} must lie in [0, 1], got {r}")
            if not occ.split():
                raise InvalidInputError("occupation names must be non-empty")

    @property
    def occupations(self) -> list[str]:
        return list(self.male_rate)

    @property
    def is_balanced(self) -> bool:
        return all(float(r) == 0.5 for r in self.male_rate.values())

    def balanced(self) -> "BiasProfile":
        return replace(self, male_rate={o: 0.5 for o in self.male_rate})

    @classmethod
    def load(cls, path) -> "BiasProfile":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data) -> "BiasProfile":
        rates = data.get("occupations", data.get("male_rate"))
        if not isinstance(rates, dict):
            raise InvalidInputError("bias profile needs an 'occupations' mapping of rates")
        return cls({str(k): float(v) for k, v in rates.items()})

    def to_dict(self):
        return {"occupations": dict(self.male_rate)}

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")


DESK_PROFILE = BiasProfile({
    "doctor": 0.95, "engineer": 0.9, "pilot": 0.9, "carpenter": 0.95,
    "mechanic": 0.95, "plumber": 0.9, "surgeon": 0.85, "architect": 0.8,
    "programmer": 0.85, "firefighter": 0.9, "farmer": 0.8, "soldier": 0.85,
    "banker": 0.75, "manager": 0.7, "scientist": 0.7, "professor": 0.65,
    "nurse": 0.05, "secretary": 0.1, "dancer": 0.1, "librarian": 0.05,
    "receptionist": 0.05, "hairdresser": 0.1, "housekeeper": 0.1, "nanny": 0.05,
    "cashier": 0.2, "designer": 0.25, "therapist": 0.3, "pharmacist": 0.35,
    "teacher": 0.5, "writer": 0.5, "lawyer": 0.5, "baker": 0.5,
    "chef": 0.6, "artist": 0.45, "painter": 0.55, "singer": 0.4,
    "journalist": 0.5, "dentist": 0.6, "accountant": 0.45, "clerk": 0.4,
    "travel agent": 0.8, "insurance agent": 0.3,
})


def build_vocabulary(profile: BiasProfile) -> Vocabulary:
    seen = {BOS: None}
    for w in profile.grammar.lexicon():
        seen.setdefault(w, None)
    for occ in profile.occupations:
        for w in occ.split():
            seen.setdefault(w, None)
    return Vocabulary(list(seen))


@dataclass
class Corpus:
    sentences: list  # list[list[int]]
    profile: BiasProfile
    seed: int
    vocab: Vocabulary

    def __len__(self):
        return len(self.sentences)

    def texts(self) -> list[str]:
        return [" ".join(self.vocab.decode(s)) for s in self.sentences]

    def save(self, path):
        Path(path).write_text("\n".join(self.texts()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, vocab: Vocabulary, profile: BiasProfile, seed: int = -1) -> "Corpus":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([vocab.encode(ln) for ln in lines if ln.strip()], profile, seed, vocab)

    def token_count(self) -> int:
        return sum(len(s) for s in self.sentences)


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _predicate(rng, g: Grammar) -> list[str]:
    kind = int(rng.integers(3))
    if kind == 0:
        return ["was", _pick(rng, g.adjectives)]
    if kind == 1:
        return [_pick(rng, g.modals), _pick(rng, g.base_verbs), "the", _pick(rng, g.objects)]
    return [_pick(rng, g.past_verbs), "the", _pick(rng, g.objects)]


def _pronoun(male: bool) -> str:
    return HE if male else SHE


def _sentence(rng, profile: BiasProfile, kinds, probs) -> list[str]:
    g = profile.grammar
    kind = kinds[int(rng.choice(len(kinds), p=probs))]
    occs = profile.occupations
    if kind in ("occ_say", "occ_tell", "occ_plain"):
        occ = _pick(rng, occs)
        occ_male = bool(rng.random() < profile.male_rate[occ])
        subject = ["the", *occ.split()]
        if kind == "occ_say":
            return subject + [_pick(rng, g.say_verbs), "that", _pronoun(occ_male)] + _predicate(rng, g)
        if kind == "occ_tell":
            other = _pick(rng, g.participants)
            other_male = bool(rng.random() < 0.5)
            refers_to_occ = bool(rng.random() < 0.5)
            male = occ_male if refers_to_occ else other_male
            return (subject + [_pick(rng, g.tell_verbs), "the", other, "that", _pronoun(male)]
                    + _predicate(rng, g))
        return subject + _predicate(rng, g) + [_pick(rng, g.times)]
    if kind == "other_say":
        male = bool(rng.random() < 0.5)
        return ["the", _pick(rng, g.participants), _pick(rng, g.say_verbs), "that",
                _pronoun(male)] + _predicate(rng, g)
    if kind == "definitional":
        male_noun, female_noun = _pick(rng, g.gendered_pairs)
        male = bool(rng.random() < 0.5)
        noun = male_noun if male else female_noun
        return ["the", noun, _pick(rng, g.say_verbs), "that", _pronoun(male)] + _predicate(rng, g)
    if kind == "pronoun":
        male = bool(rng.random() < 0.5)
        return [_pronoun(male), _pick(rng, g.say_verbs), "that", _pronoun(male)] + _predicate(rng, g)
    return ["the", _pick(rng, g.things), "was", _pick(rng, g.thing_adjectives), _pick(rng, g.times)]


def _block(args):
    profile, vocab, block_seed, count = args
    rng = np.random.default_rng(block_seed)
    kinds = list(profile.grammar.weights)
    probs = np.array([profile.grammar.weights[k] for k in kinds], dtype=float)
    probs /= probs.sum()
    return [vocab.encode(_sentence(rng, profile, kinds, probs)) for _ in range(count)]


def generate_corpus(profile: BiasProfile, size: int, seed: int, jobs: int = 1) -> Corpus:
    """Sample ``size`` sentences; blocks of 1000 get their own derived seed."""
    if size < 1:
        raise InvalidInputError("corpus size must be at least 1")
    if not profile.occupations:
        raise InvalidInputError("occupation list is empty")
    vocab = build_vocabulary(profile)
    n_blocks = math.ceil(size / BLOCK_SIZE)
    seeds = np.random.SeedSequence(seed).spawn(n_blocks)
    tasks = [(profile, vocab, s, min(BLOCK_SIZE, size - i * BLOCK_SIZE)) for i, s in enumerate(seeds)]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            blocks = list(pool.map(_block, tasks))
    else:
        blocks = [_block(t) for t in tasks]
    return Corpus([s for b in blocks for s in b], profile, seed, vocab)


def _find(seq, sub):
    n = len(sub)
    return any(seq[i : i + n] == sub for i in range(len(seq) - n + 1))


def cooccurrence_rates(corpus: Corpus) -> dict:
    """Per occupation: (male fraction, count) over unambiguous occupation sentences.

    A sentence counts when it contains the occupation, a gendered word, and
    no second participant the pronoun could refer to instead.
    """
    vocab, g = corpus.vocab, corpus.profile.grammar
    male = {vocab.id_of[w] for w in g.male_words if w in vocab}
    female = {vocab.id_of[w] for w in g.female_words if w in vocab}
    others = {vocab.id_of[w] for w in g.participants if w in vocab}
    occ_ids = {o: vocab.encode(o) for o in corpus.profile.occupations}
    counts = {o: [0, 0] for o in occ_ids}
    for s in corpus.sentences:
        toks = set(s)
        if toks & others:
            continue
        has_m, has_f = bool(toks & male), bool(toks & female)
        if not (has_m or has_f):
            continue
        for o, ids in occ_ids.items():
            if _find(s, ids):
                counts[o][0] += has_m
                counts[o][1] += 1
    return {o: ((m / n) if n else float("nan"), n) for o, (m, n) in counts.items()}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 0


def _pad(batch, pad_id):
    width = 1 + max(len(s) for s in batch)
    idx = torch.full((len(batch), width), pad_id, dtype=torch.long)
    target = torch.full((len(batch), width), -100, dtype=torch.long)
    for i, s in enumerate(batch):
        t = torch.as_tensor(s, dtype=torch.long)
        idx[i, 1 : 1 + len(s)] = t
        target[i, : len(s)] = t
    return idx, target


def train_toy_model(corpus: Corpus, arch: ArchConfig | None = None,
                    train: TrainConfig | None = None) -> LanguageModel:
    """Cross-entropy next-token training (float32), returned as a float64 model."""
    arch = arch or ArchConfig()
    model = build_toy_model(corpus.vocab, arch, dtype=torch.float32)
    # rows live at 1/embed_scale of residual units; scale their step to match
    return fit_language_model(model, corpus, train, embedding_lr_scale=1.0 / arch.embed_scale)


def fit_language_model(model: LanguageModel, corpus: Corpus, train: TrainConfig | None = None,
                       embedding_lr_scale: float = 1.0) -> LanguageModel:
    """Train every parameter of ``model`` in float32; returns a float64 copy."""
    if len(corpus) == 0:
        raise InvalidInputError("cannot train on an empty corpus")
    if corpus.vocab != model.vocab:
        raise InvalidInputError("corpus and model vocabularies differ")
    train = train or TrainConfig()
    vocab = corpus.vocab
    model.to(torch.float32)
    longest = max(len(s) for s in corpus.sentences)
    if longest > model.max_context:
        raise InvalidInputError(f"sentence of {longest} tokens exceeds the context window")
    net = model.net
    for p in net.parameters():
        p.requires_grad_(True)
    net.train()
    emb = model.embeddings
    groups = [
        {"params": [emb], "lr_scale": embedding_lr_scale},
        {"params": [p for _, p in model.knowledge_params()], "lr_scale": 1.0},
    ]
    opt = torch.optim.AdamW(groups, lr=train.lr, weight_decay=train.weight_decay)
    rng = np.random.default_rng(train.seed)
    n = len(corpus)
    steps_per_epoch = math.ceil(n / train.batch_size)
    total = train.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(train.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            batch = [corpus.sentences[i] for i in order[b * train.batch_size : (b + 1) * train.batch_size]]
            idx, target = _pad(batch, vocab.bos_id)
            lr = train.lr * 0.5 * (1 + math.cos(math.pi * step / max(total, 1)))
            for group in opt.param_groups:
                group["lr"] = lr * group["lr_scale"]
            logits = net(idx)
            loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1))
            if not torch.isfinite(loss):
                raise TrainingFailure(step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(loss.item())
            if train.log_every and step % train.log_every == 0:
                log.info("epoch %d step %d loss %.4f", epoch, step, loss.item())
            step += 1
    net.eval()
    out = LanguageModel(vocab, net.to(torch.float64), model.backend, dict(model.metadata))
    out.metadata["train_loss"] = history
    return out


def train_reference_pair(profile: BiasProfile, size: int, seed: int,
                         arch: ArchConfig | None = None, train: TrainConfig | None = None):
    """Biased model and its balanced-twin reference (same init and data seed)."""
    biased = train_toy_model(generate_corpus(profile, size, seed), arch, train)
    reference = train_toy_model(generate_corpus(profile.balanced(), size, seed), arch, train)
    return biased, reference
