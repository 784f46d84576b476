"""Training objectives: masked-LM cross-entropy and the distillation terms."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad

TERMS = ("mlm", "kl", "mse_hidden", "cosine", "mse_attention")
IGNORE = -1


def _zero() -> ad.Tensor:
    return ad.Tensor(0.0)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x)


def mlm_loss(student_logits: ad.Tensor, targets) -> ad.Tensor:
    """Mean negative log-likelihood of the original ids at masked positions.

    ``targets`` has the leading shape of the logits and holds the true id at
    masked positions and ``IGNORE`` (-1) elsewhere.
    """
    targets = np.asarray(targets, dtype=np.int64)
    v = student_logits.shape[-1]
    if targets.shape != student_logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits "
                         f"{student_logits.shape}")
    flat = targets.reshape(-1)
    pos = np.nonzero(flat != IGNORE)[0]
    if pos.size == 0:
        return _zero()
    labels = flat[pos]
    if labels.min() < 0 or labels.max() >= v:
        raise ValueError(f"target ids must lie in [0, {v})")
    rows = ad.take(student_logits.reshape(-1, v), pos, axis=0)
    picked = ad.log_softmax(rows, axis=-1)[np.arange(pos.size), labels]
    return -picked.mean()


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def distill_kl_loss(teacher_logits, student_logits: ad.Tensor, temperature: float = 1.0,
                    variant: str = "kl") -> ad.Tensor:
    """Row-mean KL(p_teacher || p_student) over aligned logits of shape ``(n, |V_match|)``.

    ``variant="ce"`` gives the soft-target cross-entropy instead; the two
    differ by the teacher entropy, which carries no gradient.
    """
    t = _data(teacher_logits)
    if t.shape != student_logits.shape:
        raise ValueError(f"teacher logits {t.shape} and student logits "
                         f"{student_logits.shape} differ in shape")
    if variant not in ("kl", "ce"):
        raise ValueError(f"unknown distillation variant {variant!r}")
    if student_logits.size == 0 or student_logits.shape[0] == 0:
        return _zero()
    p_t = _softmax_np(t / temperature)
    log_ps = ad.log_softmax(student_logits * (1.0 / temperature), axis=-1)
    cross = -(log_ps * p_t).sum(axis=-1)
    if variant == "ce":
        return cross.mean()
    neg_entropy = np.where(p_t > 0, p_t * np.log(np.where(p_t > 0, p_t, 1.0)), 0.0).sum(axis=-1)
    return (cross + neg_entropy).mean()


def cosine_hidden_loss(teacher_h, student_h: ad.Tensor) -> ad.Tensor:
    """Row-mean cosine distance ``1 - cos(a, b)``; values lie in [0, 2].

    Rows where either side has zero norm raise in checked mode and are
    skipped otherwise.
    """
    t = _data(teacher_h)
    if t.shape != student_h.shape:
        raise ValueError(f"teacher hiddens {t.shape} and student hiddens "
                         f"{student_h.shape} differ in shape")
    t_norm = np.linalg.norm(t, axis=-1)
    s_norm = np.linalg.norm(student_h.data, axis=-1)
    keep = (t_norm > 0) & (s_norm > 0)
    if not keep.all():
        if ad.is_checked():
            raise FloatingPointError("cosine distance undefined for zero-norm rows")
        rows = np.nonzero(keep)[0]
        t, t_norm, student_h = t[rows], t_norm[rows], ad.take(student_h, rows, axis=0)
    if student_h.shape[0] == 0:
        return _zero()
    dots = (student_h * t).sum(axis=-1)
    norms = (student_h * student_h).sum(axis=-1) ** 0.5
    return (1.0 - dots / (norms * t_norm)).mean()


def average_layers(hiddens: Sequence[ad.Tensor]) -> ad.Tensor:
    """Per-token mean of the transformer layer outputs (embeddings output excluded)."""
    layers = list(hiddens[1:])
    if not layers:
        raise ValueError("need at least one transformer layer output to average")
    total = layers[0]
    for h in layers[1:]:
        total = total + h
    return total * (1.0 / len(layers))


def mse_hidden_loss(teacher_h, student_h: ad.Tensor) -> ad.Tensor:
    """Mean squared elementwise difference between aligned, projected hidden states."""
    t = _data(teacher_h)
    if t.shape != student_h.shape:
        raise ValueError(f"teacher hiddens {t.shape} and student hiddens "
                         f"{student_h.shape} differ in shape")
    if student_h.size == 0:
        return _zero()
    diff = student_h - t
    return (diff * diff).mean()


def group_attention(teacher_attn: Sequence, group_size: int) -> list[np.ndarray]:
    maps = [_data(a) for a in teacher_attn]
    if group_size <= 0 or len(maps) % group_size:
        raise ValueError(f"{len(maps)} teacher layers cannot be grouped by {group_size}")
    return [np.mean(maps[i:i + group_size], axis=0) for i in range(0, len(maps), group_size)]


def mse_attention_loss(teacher_attn: Sequence, student_attn: Sequence[ad.Tensor],
                       group_size: int, attention_mask=None) -> ad.Tensor:
    """MSE between student attention maps and consecutive-group teacher averages.

    Maps are ``(B, heads, L, L)``. With ``attention_mask`` (B, L) only pairs
    of real query and key positions count. Averaged over layers, heads and
    positions.
    """
    if len(teacher_attn) != group_size * len(student_attn):
        raise ValueError(f"{len(teacher_attn)} teacher layers != {group_size} x "
                         f"{len(student_attn)} student layers")
    grouped = group_attention(teacher_attn, group_size)
    weight = None
    if attention_mask is not None:
        m = np.asarray(attention_mask, dtype=ad.default_dtype())
        weight = m[:, None, :, None] * m[:, None, None, :]
    per_layer = []
    for t, s in zip(grouped, student_attn):
        if t.shape != s.shape:
            raise ValueError(f"teacher map {t.shape} and student map {s.shape} differ in shape")
        diff = s - t
        sq = diff * diff
        if weight is None:
            per_layer.append(sq.mean())
        else:
            denom = float(np.broadcast_to(weight, s.shape).sum())
            per_layer.append((sq * weight).sum() * (1.0 / denom))
    total = per_layer[0]
    for term in per_layer[1:]:
        total = total + term
    return total * (1.0 / len(per_layer))


@dataclass
class LossBundle:
    mlm: ad.Tensor | None = None
    kl: ad.Tensor | None = None
    mse_hidden: ad.Tensor | None = None
    cosine: ad.Tensor | None = None
    mse_attention: ad.Tensor | None = None
    weights: dict[str, float] = field(default_factory=dict)
    total: ad.Tensor | None = None

    def terms(self) -> dict[str, ad.Tensor]:
        return {k: getattr(self, k) for k in TERMS if getattr(self, k) is not None}

    def values(self) -> dict[str, float]:
        """Floats for logging; inactive terms are omitted."""
        out = {k: t.item() for k, t in self.terms().items()}
        out["total"] = self.total.item()
        return out


def combine(terms: Mapping[str, ad.Tensor], weights: Mapping[str, float] | None = None) -> LossBundle:
    """Weighted sum of the active terms; inactive terms stay absent.

    Without ``weights`` every term gets weight 1. Given weights must name
    exactly the active terms.
    """
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    if not terms:
        raise ValueError("no active loss terms")
    if weights is None:
        weights = {k: 1.0 for k in terms}
    extra = set(weights) - set(terms)
    if extra:
        raise ValueError(f"weights given for inactive terms {sorted(extra)}")
    missing = set(terms) - set(weights)
    if missing:
        raise ValueError(f"no weight for active terms {sorted(missing)}")
    total = None
    for name in TERMS:
        if name in terms:
            term = terms[name] * float(weights[name])
            total = term if total is None else total + term
    return LossBundle(**{k: terms[k] for k in terms}, weights=dict(weights), total=total)
