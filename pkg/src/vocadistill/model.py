"""BERT-style transformer encoder with a tied masked-LM head."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .alignment import split_teacher_token
from .tokenizer import SPECIAL_ROLES, Vocabulary

ModelParams = dict  # name -> autodiff.Tensor, insertion-ordered
INIT_STD = 0.02
MASK_NEG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    hidden: int
    n_heads: int
    vocab_size: int
    ffn_dim: int | None = None
    max_positions: int = 512
    dropout: float = 0.1
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden)
        if self.n_layers < 0 or self.hidden <= 0 or self.n_heads <= 0 or self.vocab_size < 0:
            raise ValueError(f"invalid model dimensions in {self}")
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden {self.hidden} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


# Architectures of the released teacher and students. The 3-layer students
# use ffn_dim = 3 * hidden (792); with the 4 * hidden default their totals
# drift 4-12% above the published parameter counts.
PRESETS = {
    "teacher": ModelConfig(12, 768, 12, 119547, 3072),
    "distil-base": ModelConfig(6, 768, 12, 119547, 3072),
    "distil-small": ModelConfig(2, 768, 12, 119547, 3072),
    "distil-tiny30": ModelConfig(3, 264, 12, 30500, 792),
    "distil-tiny20": ModelConfig(3, 264, 12, 20000, 792),
    "distil-tiny10": ModelConfig(3, 264, 12, 10000, 792),
    "distil-tiny5": ModelConfig(3, 264, 12, 5000, 792),
}
# millions of parameters, as published
PUBLISHED_PARAMS_M = {
    "teacher": 177.9, "distil-base": 135.5, "distil-small": 107.1,
    "distil-tiny30": 10.4, "distil-tiny20": 7.6, "distil-tiny10": 5.0, "distil-tiny5": 3.6,
}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = config.hidden, config.ffn_dim, config.vocab_size
    shapes = {
        "emb.token": (v, d),
        "emb.position": (config.max_positions, d),
        "emb.ln.weight": (d,),
        "emb.ln.bias": (d,),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        for name in ("q", "k", "v", "o"):
            shapes[p + f"attn.{name}.weight"] = (d, d)
            shapes[p + f"attn.{name}.bias"] = (d,)
        shapes[p + "attn_ln.weight"] = (d,)
        shapes[p + "attn_ln.bias"] = (d,)
        shapes[p + "ffn.in.weight"] = (d, f)
        shapes[p + "ffn.in.bias"] = (f,)
        shapes[p + "ffn.out.weight"] = (f, d)
        shapes[p + "ffn.out.bias"] = (d,)
        shapes[p + "ffn_ln.weight"] = (d,)
        shapes[p + "ffn_ln.bias"] = (d,)
    shapes["head.transform.weight"] = (d, d)
    shapes["head.transform.bias"] = (d,)
    shapes["head.ln.weight"] = (d,)
    shapes["head.ln.bias"] = (d,)
    shapes["head.bias"] = (v,)
    return shapes


def count_params(config: ModelConfig) -> tuple[int, float]:
    """Total parameter count and the share held by the token embedding matrix.

    The output projection is tied to the token embeddings, so only its bias
    is counted separately.
    """
    d, f, v, p = config.hidden, config.ffn_dim, config.vocab_size, config.max_positions
    per_layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    total = v * d + p * d + 2 * d + config.n_layers * per_layer + (d * d + d) + 2 * d + v
    return total, (v * d / total if total else 0.0)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight") and len(shape) == 1:
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = ad.Tensor(arr, requires_grad=True)
    return params


def params_digest(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def freeze(params: ModelParams) -> ModelParams:
    for t in params.values():
        t.requires_grad = False
        t.grad = None
    return params


class ForwardOutput(NamedTuple):
    logits: ad.Tensor             # (B, L, V), pre-softmax
    hiddens: list[ad.Tensor]      # embeddings output + one per layer, each (B, L, d)
    attentions: list[ad.Tensor]   # one per layer, each (B, heads, L, L)


def _linear(x, params, name):
    return x @ params[name + ".weight"] + params[name + ".bias"]


def forward(params: ModelParams, config: ModelConfig, ids, attention_mask=None,
            train: bool = False, rng: np.random.Generator | None = None) -> ForwardOutput:
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    b, n = ids.shape
    if n > config.max_positions:
        raise ValueError(f"sequence length {n} exceeds max_positions {config.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"token ids must lie in [0, {config.vocab_size})")
    mask = np.ones((b, n)) if attention_mask is None else np.asarray(attention_mask)
    if mask.shape != (b, n):
        raise ValueError(f"attention_mask shape {mask.shape} does not match ids shape {(b, n)}")
    p, eps = config.dropout, config.layer_norm_eps
    heads, hd = config.n_heads, config.head_dim

    x = ad.embedding_lookup(params["emb.token"], ids) + params["emb.position"][:n]
    x = ad.layer_norm(x, params["emb.ln.weight"], params["emb.ln.bias"], eps=eps)
    x = ad.dropout(x, p, train, rng)
    key_bias = ((1.0 - mask) * MASK_NEG)[:, None, None, :].astype(ad.default_dtype())
    scale = float(1.0 / np.sqrt(hd))
    hiddens, attentions = [x], []

    def split_heads(t):
        return t.reshape(b, n, heads, hd).transpose(0, 2, 1, 3)

    for i in range(config.n_layers):
        pre = f"layer{i}."
        q = split_heads(_linear(x, params, pre + "attn.q"))
        k = split_heads(_linear(x, params, pre + "attn.k"))
        v = split_heads(_linear(x, params, pre + "attn.v"))
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + key_bias
        attn = ad.softmax(scores, axis=-1)
        attentions.append(attn)
        ctx = ad.dropout(attn, p, train, rng) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, n, config.hidden)
        out = ad.dropout(_linear(ctx, params, pre + "attn.o"), p, train, rng)
        x = ad.layer_norm(x + out, params[pre + "attn_ln.weight"], params[pre + "attn_ln.bias"],
                          eps=eps)
        h = ad.gelu(_linear(x, params, pre + "ffn.in"))
        h = ad.dropout(_linear(h, params, pre + "ffn.out"), p, train, rng)
        x = ad.layer_norm(x + h, params[pre + "ffn_ln.weight"], params[pre + "ffn_ln.bias"],
                          eps=eps)
        hiddens.append(x)

    t = ad.gelu(_linear(x, params, "head.transform"))
    t = ad.layer_norm(t, params["head.ln.weight"], params["head.ln.bias"], eps=eps)
    logits = t @ params["emb.token"].T + params["head.bias"]
    return ForwardOutput(logits, hiddens, attentions)


# -- initialization from a teacher --------------------------------------------------

def student_token_sources(teacher_vocab: Vocabulary, student_vocab: Vocabulary) -> list[list[int]]:
    """For each student id, the teacher ids whose greedy student split contains it.

    Special tokens are paired by role. Teacher subwords that cannot be split
    contribute nothing.
    """
    sources: list[list[int]] = [[] for _ in range(len(student_vocab))]
    t_special, s_special = teacher_vocab.specials, student_vocab.specials
    for role in SPECIAL_ROLES:
        sources[s_special[role]].append(t_special[role])
    for tid, tok in enumerate(teacher_vocab.tokens):
        if teacher_vocab.is_special(tid):
            continue
        pieces = split_teacher_token(tok, teacher_vocab, student_vocab)
        if pieces is None:
            continue
        for sid in dict.fromkeys(student_vocab.token_to_id[p] for p in pieces):
            sources[sid].append(tid)
    return sources


def _average_rows(table: np.ndarray, sources: list[list[int]], width: int,
                  rng: np.random.Generator, fill_std: float | None) -> np.ndarray:
    out = np.empty((len(sources), width), dtype=table.dtype)
    for sid, rows in enumerate(sources):
        if rows:
            out[sid] = table[rows].mean(axis=0)[:width]
        elif fill_std is None:
            out[sid] = 0.0
        else:
            out[sid] = rng.normal(0.0, fill_std, size=width)
    return out


def init_student_embeddings(teacher_params: ModelParams, teacher_vocab: Vocabulary,
                            student_vocab: Vocabulary, d_s: int,
                            rng: np.random.Generator | None = None) -> np.ndarray:
    """Average the teacher rows of every teacher subword containing each student subword.

    The averaged rows are cut to their first ``d_s`` coordinates. Student
    subwords that occur in no split get N(0, 0.02) rows.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    table = teacher_params["emb.token"].data
    if d_s > table.shape[1]:
        raise ValueError(f"student width {d_s} exceeds teacher width {table.shape[1]}")
    sources = student_token_sources(teacher_vocab, student_vocab)
    return _average_rows(table, sources, d_s, rng, INIT_STD)


def _cut(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if any(s > t for s, t in zip(shape, arr.shape)):
        raise ValueError(f"cannot cut array of shape {arr.shape} to larger shape {shape}")
    return arr[tuple(slice(0, s) for s in shape)].copy()


def init_student_layers(teacher_params: ModelParams, teacher_config: ModelConfig,
                        n_layers: int, hidden: int, ffn_dim: int | None = None) -> dict[str, np.ndarray]:
    """Average consecutive groups of teacher layers, then cut to the student width.

    Teacher layers are split into ``n_layers`` consecutive groups of
    ``L_t / n_layers``; each parameter is the elementwise group mean, cut to
    its leading coordinates. ``ffn_dim`` defaults to the teacher's ffn width
    scaled by ``hidden / d_t``.
    """
    lt = teacher_config.n_layers
    if n_layers <= 0 or lt % n_layers:
        raise ValueError(f"teacher layers {lt} not divisible into {n_layers} student layers")
    if ffn_dim is None:
        ffn_dim = teacher_config.ffn_dim * hidden // teacher_config.hidden
    group = lt // n_layers
    target = ModelConfig(n_layers, hidden, 1, 0, ffn_dim)
    shapes = param_shapes(target)
    out = {}
    for name, shape in shapes.items():
        if not name.startswith("layer"):
            continue
        idx, rest = name[len("layer"):].split(".", 1)
        members = [teacher_params[f"layer{int(idx) * group + j}.{rest}"].data for j in range(group)]
        avg = members[0].copy() if group == 1 else np.mean(members, axis=0)
        out[name] = _cut(avg, shape)
    return out


def init_student(teacher_params: ModelParams, teacher_config: ModelConfig,
                 teacher_vocab: Vocabulary, student_config: ModelConfig,
                 student_vocab: Vocabulary, rng: np.random.Generator | None = None) -> ModelParams:
    """Full student parameter set initialized from the teacher.

    Token embeddings and the output bias are averaged over split membership;
    layers are group-averaged; position embeddings, embedding layer norm and
    the head transform are cut to the student width.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if student_config.vocab_size != len(student_vocab):
        raise ValueError(f"student config vocab_size {student_config.vocab_size} "
                         f"!= student vocabulary size {len(student_vocab)}")
    shapes = param_shapes(student_config)
    sources = student_token_sources(teacher_vocab, student_vocab)
    d_s = student_config.hidden
    arrays = init_student_layers(teacher_params, teacher_config, student_config.n_layers,
                                 d_s, student_config.ffn_dim)
    arrays["emb.token"] = _average_rows(teacher_params["emb.token"].data, sources, d_s, rng,
                                        INIT_STD)
    head_bias = teacher_params["head.bias"].data[:, None]
    arrays["head.bias"] = _average_rows(head_bias, sources, 1, rng, None)[:, 0]
    for name, shape in shapes.items():
        if name not in arrays:
            arrays[name] = _cut(teacher_params[name].data, shape)
    return {name: ad.Tensor(arrays[name], requires_grad=True) for name in shapes}


# -- hidden-state projection ---------------------------------------------------------

@dataclass
class ProjectionLayer:
    """Affine map from student width to teacher width; frozen or trainable."""

    weight: ad.Tensor
    bias: ad.Tensor
    mode: str = "trainable"

    def __post_init__(self):
        if self.mode not in ("frozen", "trainable"):
            raise ValueError(f"projection mode must be 'frozen' or 'trainable', got {self.mode!r}")
        trainable = self.mode == "trainable"
        self.weight.requires_grad = trainable
        self.bias.requires_grad = trainable

    @classmethod
    def random(cls, d_s: int, d_t: int, mode: str = "trainable",
               rng: np.random.Generator | None = None) -> "ProjectionLayer":
        """He-normal weights (std sqrt(2 / d_s)), zero bias."""
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.normal(0.0, np.sqrt(2.0 / d_s), size=(d_s, d_t))
        return cls(ad.Tensor(w), ad.Tensor(np.zeros(d_t)), mode)

    @classmethod
    def identity(cls, d: int, mode: str = "trainable") -> "ProjectionLayer":
        return cls(ad.Tensor(np.eye(d)), ad.Tensor(np.zeros(d)), mode)

    @property
    def frozen(self) -> bool:
        return self.mode == "frozen"

    def parameters(self) -> dict[str, ad.Tensor]:
        return {} if self.frozen else {"proj.weight": self.weight, "proj.bias": self.bias}

    def named_arrays(self) -> dict[str, ad.Tensor]:
        return {"proj.weight": self.weight, "proj.bias": self.bias}

    def digest(self) -> str:
        return params_digest(self.named_arrays())

    def __call__(self, hidden: ad.Tensor) -> ad.Tensor:
        return project_hiddens(self, hidden)


def project_hiddens(proj: ProjectionLayer, student_hidden: ad.Tensor) -> ad.Tensor:
    if student_hidden.shape[-1] != proj.weight.shape[0]:
        raise ValueError(f"projection expects width {proj.weight.shape[0]}, "
                         f"got hidden of shape {student_hidden.shape}")
    return student_hidden @ proj.weight + proj.bias
