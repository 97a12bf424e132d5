"""Language-model contract, the toy transformer backend, and checkpoint IO.

Every consumer goes through :class:`LanguageModel`.  Its trainable
parameters are split in two disjoint groups: the token embedding table
(the rows debiasing is allowed to touch) and everything else, referred to
as the knowledge parameters.  :func:`fingerprint` hashes only the latter, so
an unchanged fingerprint proves the transformer itself was left alone.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from damp.errors import InvalidInputError, UnsupportedOperationError

BOS = "<s>"
HE = "he"
SHE = "she"

CHECKPOINT_MAGIC = "DAMP-TENSORS"


class Vocabulary:
    """Dense word-level vocabulary; line number in the vocab file is the id."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        id_of = {}
        for i, tok in enumerate(tokens):
            if not tok or any(c.isspace() for c in tok):
                raise InvalidInputError(f"invalid token {tok!r} at id {i}")
            if tok in id_of:
                raise InvalidInputError(f"duplicate token {tok!r}")
            id_of[tok] = i
        for required in (BOS, HE, SHE):
            if required not in id_of:
                raise InvalidInputError(f"vocabulary lacks required token {required!r}")
        self.tokens = tokens
        self.id_of = id_of

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.id_of

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self):
        return hash(tuple(self.tokens))

    @property
    def he_id(self) -> int:
        return self.id_of[HE]

    @property
    def she_id(self) -> int:
        return self.id_of[SHE]

    @property
    def bos_id(self) -> int:
        return self.id_of[BOS]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset({self.bos_id})

    def encode(self, text: str | Iterable[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        ids = []
        for w in words:
            if w not in self.id_of:
                raise InvalidInputError(f"token {w!r} is not in the vocabulary")
            ids.append(self.id_of[w])
        return ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])


@dataclass(frozen=True)
class ArchConfig:
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    n_ctx: int = 24
    mlp_ratio: int = 4
    # token rows are multiplied by this before entering the residual stream
    embed_scale: float = 64.0
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise InvalidInputError("d_model must be divisible by n_heads")
        if min(self.d_model, self.n_heads, self.n_layers, self.n_ctx, self.mlp_ratio) < 1:
            raise InvalidInputError("architecture sizes must be positive")


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x):
        B, T, C = x.shape
        hd = C // self.n_heads
        q, k, v = self.qkv(x).split(C, dim=2)
        q = q.view(B, T, self.n_heads, hd).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        mask = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        att = att.masked_fill(~mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, C)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, mlp_ratio * d_model),
            nn.GELU(),
            nn.Linear(mlp_ratio * d_model, d_model),
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class ToyTransformer(nn.Module):
    """Pre-LN decoder-only transformer with an untied output head."""

    def __init__(self, vocab_size: int, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(vocab_size, cfg.d_model)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.n_ctx, cfg.d_model))
        self.blocks = nn.ModuleList(
            Block(cfg.d_model, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_layers)
        )
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, vocab_size)

        gen = torch.Generator().manual_seed(cfg.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif "ln" in name:
                    p.fill_(1.0)
                else:
                    std = cfg.init_std / cfg.embed_scale if name == "tok_emb.weight" else cfg.init_std
                    p.copy_(torch.randn(p.shape, generator=gen) * std)

    @property
    def max_positions(self) -> int:
        return self.cfg.n_ctx

    def token_embedding(self) -> nn.Parameter:
        return self.tok_emb.weight

    def forward(self, idx, table=None):
        """Logits for every position of ``idx``; ``table`` overrides the embedding rows."""
        table = self.tok_emb.weight if table is None else table
        T = idx.shape[1]
        x = F.embedding(idx, table) * self.cfg.embed_scale + self.pos_emb[:T]
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))

    def hidden_states(self, idx, table=None):
        table = self.tok_emb.weight if table is None else table
        T = idx.shape[1]
        x = F.embedding(idx, table) * self.cfg.embed_scale + self.pos_emb[:T]
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)


class LanguageModel:
    """A next-token predictor over a :class:`Vocabulary`.

    ``net`` is any ``nn.Module`` exposing ``token_embedding()``,
    ``max_positions`` and ``forward(idx, table=None)``.  The sequence-start
    token is prepended internally, so callers pass plain contexts.
    """

    def __init__(self, vocab: Vocabulary, net: nn.Module, backend: str = "toy", metadata=None):
        self.vocab = vocab
        self.net = net
        self.backend = backend
        self.metadata = dict(metadata or {})
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        if self.embeddings.shape[0] != len(vocab):
            raise InvalidInputError("embedding row count differs from vocabulary size")

    @property
    def embeddings(self) -> torch.Tensor:
        return self.net.token_embedding()

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def dtype(self):
        return self.embeddings.dtype

    @property
    def max_context(self) -> int:
        # one position is reserved for the sequence-start token
        return self.net.max_positions - 1

    def knowledge_params(self) -> list[tuple[str, torch.Tensor]]:
        emb = self.embeddings
        return [(n, p) for n, p in self.net.named_parameters() if p is not emb]

    def check_partition(self):
        emb = self.embeddings
        names = [n for n, p in self.net.named_parameters() if p is emb]
        if len(names) != 1:
            raise UnsupportedOperationError("embedding table is shared with another parameter")
        total = sum(1 for _ in self.net.parameters())
        if total != len(self.knowledge_params()) + 1:
            raise UnsupportedOperationError("parameter partition is not exhaustive")

    def copy(self) -> "LanguageModel":
        return LanguageModel(self.vocab, copy.deepcopy(self.net), self.backend, self.metadata)

    def to(self, dtype) -> "LanguageModel":
        self.net.to(dtype)
        return self

    def validate_context(self, context: Sequence[int]):
        if len(context) == 0:
            raise InvalidInputError("context must not be empty")
        if len(context) > self.max_context:
            raise InvalidInputError(
                f"context of {len(context)} tokens exceeds the window of {self.max_context}"
            )
        n = len(self.vocab)
        for t in context:
            if not 0 <= int(t) < n:
                raise InvalidInputError(f"token id {t} outside vocabulary of size {n}")

    def batch(self, contexts: Sequence[Sequence[int]]):
        """Right-padded id tensor (BOS prepended) and index of each last real position."""
        for c in contexts:
            self.validate_context(c)
        width = 1 + max(len(c) for c in contexts)
        idx = torch.full((len(contexts), width), self.vocab.bos_id, dtype=torch.long)
        for i, c in enumerate(contexts):
            idx[i, 1 : 1 + len(c)] = torch.as_tensor(list(c), dtype=torch.long)
        last = torch.tensor([len(c) for c in contexts], dtype=torch.long)
        return idx, last

    def last_logits(self, contexts: Sequence[Sequence[int]], table=None) -> torch.Tensor:
        """Next-token logits after each context, shape (len(contexts), |V|).

        Differentiable with respect to ``table`` when it requires grad.
        """
        idx, last = self.batch(contexts)
        logits = self.net(idx, table=table)
        return logits[torch.arange(len(contexts)), last]

    def sequence_logits(self, contexts: Sequence[Sequence[int]], table=None) -> torch.Tensor:
        idx, _ = self.batch(contexts)
        return self.net(idx, table=table)


def next_token_distribution(model: LanguageModel, context: Sequence[int]) -> np.ndarray:
    """Probability vector over the vocabulary for the token following ``context``."""
    with torch.no_grad():
        logits = model.last_logits([list(context)])[0]
    return torch.softmax(logits.double(), dim=-1).numpy()


def next_token_distributions(model: LanguageModel, contexts) -> np.ndarray:
    if len(contexts) == 0:
        return np.zeros((0, len(model.vocab)))
    with torch.no_grad():
        logits = model.last_logits([list(c) for c in contexts])
    return torch.softmax(logits.double(), dim=-1).numpy()


def _check_token(model, token_id):
    if not 0 <= int(token_id) < len(model.vocab):
        raise InvalidInputError(f"token id {token_id} outside vocabulary")


def get_embedding(model: LanguageModel, token_id: int) -> np.ndarray:
    _check_token(model, token_id)
    return model.embeddings[int(token_id)].detach().cpu().numpy().astype(np.float64)


def set_embedding(model: LanguageModel, token_id: int, vector) -> LanguageModel:
    """Install ``vector`` as the embedding row of ``token_id`` (in place; returns ``model``)."""
    _check_token(model, token_id)
    vec = torch.as_tensor(np.asarray(vector, dtype=np.float64))
    if vec.shape != (model.d,):
        raise InvalidInputError(f"expected vector of shape ({model.d},), got {tuple(vec.shape)}")
    if not torch.isfinite(vec).all():
        raise InvalidInputError("embedding vector must be finite")
    with torch.no_grad():
        model.embeddings[int(token_id)] = vec.to(model.dtype)
    return model


def fingerprint(model: LanguageModel) -> bytes:
    """SHA-256 over the knowledge parameters in declaration order, as little-endian float64."""
    h = hashlib.sha256()
    for name, p in model.knowledge_params():
        arr = p.detach().cpu().to(torch.float64).contiguous().numpy()
        h.update(name.encode("utf-8"))
        h.update(json.dumps(list(arr.shape)).encode("ascii"))
        h.update(arr.astype("<f8").tobytes())
    return h.digest()


def model_id(model: LanguageModel) -> str:
    """Short digest over embeddings and knowledge parameters together."""
    h = hashlib.sha256(fingerprint(model))
    h.update(model.embeddings.detach().cpu().to(torch.float64).numpy().astype("<f8").tobytes())
    return h.hexdigest()[:16]


def rows_digest(rows) -> str:
    h = hashlib.sha256()
    for tid in sorted(rows):
        h.update(str(int(tid)).encode("ascii"))
        h.update(np.asarray(rows[tid], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def embedding_gradient(
    model: LanguageModel,
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    token_id: int,
) -> np.ndarray:
    """Exact gradient of ``loss_fn(table)`` with respect to one embedding row.

    ``loss_fn`` receives a differentiable copy of the embedding table (to be
    passed to ``model.last_logits(..., table=...)``) and must return a 0-d
    floating tensor.
    """
    _check_token(model, token_id)
    table = model.embeddings.detach().clone().requires_grad_(True)
    loss = loss_fn(table)
    if not isinstance(loss, torch.Tensor) or loss.ndim != 0 or not loss.is_floating_point():
        raise UnsupportedOperationError("loss must be a 0-d floating point torch tensor")
    if not loss.requires_grad:
        return np.zeros(model.d)
    (grad,) = torch.autograd.grad(loss, table, allow_unused=True)
    if grad is None:
        return np.zeros(model.d)
    return grad[int(token_id)].detach().cpu().numpy().astype(np.float64)


def build_toy_model(vocab: Vocabulary, cfg: ArchConfig | None = None, dtype=torch.float64) -> LanguageModel:
    cfg = cfg or ArchConfig()
    net = ToyTransformer(len(vocab), cfg).to(dtype)
    return LanguageModel(vocab, net, backend="toy", metadata={"arch": asdict(cfg)})


# -- tensor container -------------------------------------------------------


def _write_container(path, header: dict, tensors: Sequence[np.ndarray]):
    buf = io.BytesIO()
    buf.write(f"{CHECKPOINT_MAGIC}\n".encode("ascii"))
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for arr in tensors:
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def _read_container(path):
    raw = Path(path).read_bytes()
    magic_end = raw.index(b"\n")
    if raw[:magic_end].decode("ascii", "replace") != CHECKPOINT_MAGIC:
        raise InvalidInputError(f"{path} is not a tensor container")
    header_end = raw.index(b"\n", magic_end + 1)
    header = json.loads(raw[magic_end + 1 : header_end].decode("utf-8"))
    offset = header_end + 1
    tensors = []
    for entry in header["manifest"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        tensors.append(arr.copy())
        offset += 4 * count
    if offset != len(raw):
        raise InvalidInputError(f"{path}: trailing bytes after manifest tensors")
    return header, tensors


def save_checkpoint(model: LanguageModel, path):
    """Structured header + float32 tensors in manifest order (embedding first)."""
    named = [("embedding", model.embeddings)] + model.knowledge_params()
    manifest = [{"name": n, "shape": list(p.shape)} for n, p in named]
    header = {
        "kind": "checkpoint",
        "backend": model.backend,
        "d": model.d,
        "vocab_size": len(model.vocab),
        "manifest": manifest,
    }
    if model.backend == "toy":
        header["arch"] = model.metadata.get("arch")
    elif model.backend == "adapter":
        header["hf_config"] = model.net.hf.config.to_dict()
    else:
        raise UnsupportedOperationError(f"cannot checkpoint backend {model.backend!r}")
    _write_container(path, header, [p.detach().cpu().numpy() for _, p in named])


def load_checkpoint(path, vocab: Vocabulary, dtype=torch.float64) -> LanguageModel:
    header, tensors = _read_container(path)
    if header.get("kind") != "checkpoint":
        raise InvalidInputError(f"{path} is not a model checkpoint")
    if header["vocab_size"] != len(vocab):
        raise InvalidInputError("checkpoint vocabulary size differs from the vocabulary file")
    if header.get("backend") == "adapter":
        from damp.adapter import build_from_config

        model = build_from_config(header["hf_config"], vocab)
    else:
        model = build_toy_model(vocab, ArchConfig(**header["arch"]), dtype=dtype)
    params = dict([("embedding", model.embeddings)] + model.knowledge_params())
    if [e["name"] for e in header["manifest"]] != list(params):
        raise InvalidInputError(f"{path}: parameter manifest does not match the architecture")
    with torch.no_grad():
        for entry, arr in zip(header["manifest"], tensors):
            target = params[entry["name"]]
            if list(target.shape) != entry["shape"]:
                raise InvalidInputError(f"{path}: shape mismatch for {entry['name']!r}")
            target.copy_(torch.from_numpy(arr))
    return model.to(dtype)


def save_patch(path, token_ids: Sequence[int], rows: np.ndarray):
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.shape[0] != len(token_ids):
        raise InvalidInputError("patch rows must be a (len(token_ids), d) matrix")
    header = {
        "kind": "embedding_patch",
        "d": int(rows.shape[1]),
        "token_ids": [int(t) for t in token_ids],
        "manifest": [{"name": "rows", "shape": list(rows.shape)}],
    }
    _write_container(path, header, [rows])


def load_patch(path) -> tuple[list[int], np.ndarray]:
    header, tensors = _read_container(path)
    if header.get("kind") != "embedding_patch":
        raise InvalidInputError(f"{path} is not an embedding patch")
    return header["token_ids"], tensors[0].astype(np.float64)


def apply_patch(model: LanguageModel, token_ids, rows) -> LanguageModel:
    for t, row in zip(token_ids, rows):
        set_embedding(model, t, row)
    return model
