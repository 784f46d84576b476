"""Distillation loop: masking, dual-input batches, AdamW, plateau schedule."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .alignment import MatchAlignment, ReduceAlignment, match_align, reduce_split
from .checkpoint import save_model
from .losses import (IGNORE, TERMS, LossBundle, average_layers, combine, cosine_hidden_loss,
                     distill_kl_loss, mlm_loss, mse_attention_loss, mse_hidden_loss)
from .model import (ModelConfig, ModelParams, ProjectionLayer, forward, freeze, init_params,
                    init_student)
from .tokenizer import TokenizedSequence, Vocabulary, tokenize, vocab_intersection

log = logging.getLogger(__name__)

STRATEGIES = ("match", "reduce", "reduce-match")
METRIC_COLUMNS = ("step", "lr", "mlm", "kl", "mse_hidden", "cosine", "mse_attention", "total",
                  "val_mlm", "val_acc")


@dataclass
class TrainConfig:
    """Every knob of a run. ``model`` holds the trained model's architecture
    (all ModelConfig fields except ``vocab_size``, which comes from the
    vocabulary); the vocabulary is read from ``vocab_path`` or learned from
    the training corpus with ``vocab_size`` entries."""

    strategy: str = "match"
    losses: tuple[str, ...] = ("mlm",)
    projection_mode: str = "frozen"
    mask_prob: float = 0.15
    batch_size: int = 8
    accum_steps: int = 4
    peak_lr: float = 5e-4
    warmup_steps: int = 100
    plateau_patience: int = 3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    epochs: int = 1
    max_steps: int | None = None
    val_every: int = 50
    val_fraction: float = 0.05
    max_length: int = 64
    temperature: float = 1.0
    kl_variant: str = "kl"
    loss_weights: dict[str, float] | None = None
    init_from_teacher: bool = True
    model: dict = field(default_factory=lambda: {"n_layers": 2, "hidden": 32, "n_heads": 4})
    vocab_size: int | None = None
    vocab_path: str | None = None

    def __post_init__(self):
        self.losses = tuple(self.losses)
        self.betas = tuple(self.betas)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        bad = set(self.losses) - set(TERMS)
        if bad or not self.losses or len(set(self.losses)) != len(self.losses):
            raise ValueError(f"losses must be distinct members of {TERMS}, got {self.losses}")
        if self.projection_mode not in ("frozen", "trainable"):
            raise ValueError("projection_mode must be frozen or trainable")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must be in [0, 1]")
        for name in ("batch_size", "accum_steps", "epochs", "val_every", "max_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.warmup_steps < 0 or self.plateau_patience < 1:
            raise ValueError("warmup_steps must be >= 0 and plateau_patience >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.kl_variant not in ("kl", "ce"):
            raise ValueError("kl_variant must be 'kl' or 'ce'")
        if self.loss_weights is not None and set(self.loss_weights) != set(self.losses):
            raise ValueError("loss_weights must name exactly the active losses")
        if "vocab_size" in self.model:
            raise ValueError("model.vocab_size is taken from the vocabulary; remove it")

    @property
    def distill_terms(self) -> tuple[str, ...]:
        return tuple(t for t in self.losses if t != "mlm")

    @property
    def uses_reduce(self) -> bool:
        return self.strategy in ("reduce", "reduce-match") and bool(
            set(self.distill_terms) & {"kl", "mse_hidden", "cosine"})

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "vocab_size": vocab_size})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["losses"] = list(self.losses)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Teacher(NamedTuple):
    params: ModelParams
    config: ModelConfig
    vocab: Vocabulary


# -- batches -------------------------------------------------------------------------

@dataclass(frozen=True)
class Example:
    """One text, tokenized and aligned; independent of masking."""

    text: str
    student: TokenizedSequence
    teacher: TokenizedSequence | None
    alignment: MatchAlignment | ReduceAlignment | None
    truncated: bool


def prepare_example(text: str, student_vocab: Vocabulary, teacher_vocab: Vocabulary | None,
                    config: TrainConfig, vocab_pairs=None) -> Example:
    n = config.max_length
    student = tokenize(student_vocab, text)
    truncated = len(student) > n
    student = student.truncate(n)
    teacher = alignment = None
    if teacher_vocab is not None and config.distill_terms:
        teacher = tokenize(teacher_vocab, text)
        truncated = truncated or len(teacher) > n
        teacher = teacher.truncate(n)
        if config.uses_reduce:
            alignment = reduce_split(teacher, teacher_vocab, student_vocab)
        else:
            if vocab_pairs is None:
                vocab_pairs, _ = vocab_intersection(teacher_vocab, student_vocab)
            alignment = match_align(teacher, student, vocab_pairs)
    return Example(text, student, teacher, alignment, truncated)


@dataclass(frozen=True)
class Batch:
    student_input: np.ndarray            # (B, Ls) ids after MLM corruption
    student_mask: np.ndarray             # (B, Ls) 1 for real tokens
    mlm_targets: np.ndarray              # (B, Ls) original id where masked, else IGNORE
    teacher_input: np.ndarray | None     # (B, Lt), never corrupted
    teacher_mask: np.ndarray | None
    alignment: tuple | None              # per-example MatchAlignment / ReduceAlignment
    aux_student_input: np.ndarray | None  # (B, La) teacher text re-split into student subwords
    aux_mask: np.ndarray | None
    aux_segments: np.ndarray | None      # (B, La) owning teacher position, -1 for padding
    teacher_rows: np.ndarray | None      # flat (b * Lt + t) rows used by distillation terms
    student_rows: np.ndarray | None      # match: flat (b * Ls + s) rows paired with teacher_rows
    n_truncated: int = 0
    texts: tuple[str, ...] = ()


def _pad(seqs: Sequence[Sequence[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(s) for s in seqs), default=0)
    width = max(width, 1)
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.float32)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def mask_tokens(ids: np.ndarray, attention: np.ndarray, vocab: Vocabulary, mask_prob: float,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Select real tokens with ``mask_prob``; of those 80% -> MASK, 10% -> random, 10% kept."""
    ids = ids.copy()
    targets = np.full(ids.shape, IGNORE, dtype=np.int64)
    chosen = (rng.random(ids.shape) < mask_prob) & (attention > 0)
    action = rng.random(ids.shape)
    normal = np.array([i for i in range(len(vocab)) if not vocab.is_special(i)])
    random_ids = rng.choice(normal, size=ids.shape) if normal.size else ids
    targets[chosen] = ids[chosen]
    ids[chosen & (action < 0.8)] = vocab.mask_id
    swap = chosen & (action >= 0.8) & (action < 0.9)
    ids[swap] = random_ids[swap]
    return ids, targets


def collate(examples: Sequence[Example], student_vocab: Vocabulary, config: TrainConfig,
            rng: np.random.Generator) -> Batch:
    s_ids, s_mask = _pad([e.student.ids for e in examples], student_vocab.pad_id)
    s_input, targets = mask_tokens(s_ids, s_mask, student_vocab, config.mask_prob, rng)
    n_trunc = sum(e.truncated for e in examples)
    texts = tuple(e.text for e in examples)
    if examples[0].teacher is None:
        return Batch(s_input, s_mask, targets, None, None, None, None, None, None, None, None,
                     n_trunc, texts)

    t_ids, t_mask = _pad([e.teacher.ids for e in examples], 0)
    lt, ls = t_ids.shape[1], s_ids.shape[1]
    alignments = tuple(e.alignment for e in examples)
    aux = aux_mask = segments = student_rows = None
    if config.uses_reduce:
        aux_seqs, seg_rows, rows = [], [], []
        for b, al in enumerate(alignments):
            seg = al.segment_ids()
            keep = len(seg)
            if keep > config.max_length:
                # drop teacher positions whose group would run past max_length
                keep = max((g[-1] + 1 for g in al.groups if g[-1] < config.max_length), default=0)
            aux_seqs.append(al.student_ids[:keep])
            seg_rows.append(seg[:keep])
            usable = {int(t) for t in seg[:keep]} - set(al.unk_groups)
            rows.extend(b * lt + t for t in sorted(usable))
        aux, aux_mask = _pad(aux_seqs, student_vocab.pad_id)
        segments = np.full(aux.shape, -1, dtype=np.int64)
        for b, seg in enumerate(seg_rows):
            segments[b, :len(seg)] = seg
        teacher_rows = np.array(rows, dtype=np.int64)
    else:
        t_rows, s_rows = [], []
        for b, al in enumerate(alignments):
            for t, s in al.seq_pairs:
                if targets[b, s] == IGNORE:     # masked student positions are excluded
                    t_rows.append(b * lt + t)
                    s_rows.append(b * ls + s)
        teacher_rows = np.array(t_rows, dtype=np.int64)
        student_rows = np.array(s_rows, dtype=np.int64)
    return Batch(s_input, s_mask, targets, t_ids, t_mask, alignments, aux, aux_mask, segments,
                 teacher_rows, student_rows, n_trunc, texts)


def make_batch(texts: Sequence[str], teacher_vocab: Vocabulary | None, student_vocab: Vocabulary,
               config: TrainConfig, rng: np.random.Generator) -> Batch:
    if not texts:
        raise ValueError("make_batch needs at least one text")
    pairs = None
    if teacher_vocab is not None and config.distill_terms:
        pairs, _ = vocab_intersection(teacher_vocab, student_vocab)
    examples = [prepare_example(t, student_vocab, teacher_vocab, config, pairs) for t in texts]
    return collate(examples, student_vocab, config, rng)


# -- losses on a batch -----------------------------------------------------------------

def compute_losses(params: ModelParams, model_config: ModelConfig, batch: Batch,
                   config: TrainConfig, teacher: Teacher | None = None,
                   projection: ProjectionLayer | None = None, vocab_pairs=None,
                   train: bool = True, rng: np.random.Generator | None = None) -> LossBundle:
    """Forward the student (and teacher when needed) and assemble the configured terms."""
    out = forward(params, model_config, batch.student_input, batch.student_mask, train, rng)
    terms = {}
    if "mlm" in config.losses:
        terms["mlm"] = mlm_loss(out.logits, batch.mlm_targets)
    distill = config.distill_terms
    if distill:
        if teacher is None:
            raise ValueError(f"loss terms {distill} need a teacher")
        with ad.no_grad():
            t_out = forward(teacher.params, teacher.config, batch.teacher_input,
                            batch.teacher_mask, train=False)
        d_t, v_t = teacher.config.hidden, teacher.config.vocab_size
        d_s, v_s = model_config.hidden, model_config.vocab_size
        rows = batch.teacher_rows
        need_hidden = bool({"mse_hidden", "cosine"} & set(distill))
        if {"kl", "mse_hidden", "cosine"} & set(distill):
            if config.uses_reduce:
                a_out = forward(params, model_config, batch.aux_student_input, batch.aux_mask,
                                train, rng)
                lt = batch.teacher_input.shape[1]
                s_logits = ad.segment_sum(a_out.logits, batch.aux_segments, lt)
                s_logits = ad.take(s_logits.reshape(-1, v_s), rows, axis=0)
                if need_hidden:
                    s_hidden = ad.segment_sum(average_layers(a_out.hiddens), batch.aux_segments, lt)
                    s_hidden = ad.take(s_hidden.reshape(-1, d_s), rows, axis=0)
            else:
                s_logits = ad.take(out.logits.reshape(-1, v_s), batch.student_rows, axis=0)
                if need_hidden:
                    s_hidden = ad.take(average_layers(out.hiddens).reshape(-1, d_s),
                                       batch.student_rows, axis=0)
        if "kl" in distill:
            if vocab_pairs is None:
                raise ValueError("the kl term needs vocab_pairs from vocab_intersection")
            s_cols = np.array([s for s, _ in vocab_pairs], dtype=np.int64)
            t_cols = np.array([t for _, t in vocab_pairs], dtype=np.int64)
            t_logits = t_out.logits.data.reshape(-1, v_t)[rows][:, t_cols]
            terms["kl"] = distill_kl_loss(t_logits, ad.take(s_logits, s_cols, axis=-1),
                                          config.temperature, config.kl_variant)
        if need_hidden:
            if projection is None:
                raise ValueError("hidden-state terms need a projection layer")
            t_hidden = average_layers(t_out.hiddens).data.reshape(-1, d_t)[rows]
            projected = projection(s_hidden)
            if "mse_hidden" in distill:
                terms["mse_hidden"] = mse_hidden_loss(t_hidden, projected)
            if "cosine" in distill:
                terms["cosine"] = cosine_hidden_loss(t_hidden, projected)
        if "mse_attention" in distill:
            if batch.teacher_input.shape != batch.student_input.shape:
                raise ValueError("attention-map distillation needs identical tokenizations")
            group = teacher.config.n_layers // max(model_config.n_layers, 1)
            terms["mse_attention"] = mse_attention_loss(t_out.attentions, out.attentions, group,
                                                        batch.student_mask)
    return combine(terms, config.loss_weights)


# -- optimizer and schedule --------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, ad.Tensor], state: AdamWState, lr: float,
                   weight_decay: float = 0.01, betas: tuple[float, float] = (0.9, 0.999),
                   eps: float = 1e-8) -> AdamWState:
    """One AdamW update in place, reading gradients from ``.grad``.

    Decay is decoupled: ``p <- p - lr * wd * p`` before the bias-corrected
    Adam step. Tensors without ``requires_grad`` are skipped.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class PlateauSchedule:
    """Linear warmup from 0 to ``peak_lr``, then constant with halving on plateaus.

    After warmup, every ``patience`` consecutive validations without a new
    best loss halve the rate.
    """

    def __init__(self, peak_lr: float, warmup_steps: int, patience: int = 3):
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.patience = patience
        self.current = peak_lr
        self.best = math.inf
        self.bad = 0
        self.history: list[tuple[int, float]] = []

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be >= 0")
        if step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        return self.current

    def record_validation(self, step: int, loss: float) -> bool:
        """Register a validation loss; returns True when it is a new best."""
        self.history.append((step, loss))
        if loss < self.best:
            self.best = loss
            self.bad = 0
            return True
        if step >= self.warmup_steps:
            self.bad += 1
            if self.bad >= self.patience:
                self.current /= 2.0
                self.bad = 0
        return False


# -- evaluation --------------------------------------------------------------------------

def evaluate_mlm(params: ModelParams, model_config: ModelConfig, vocab: Vocabulary,
                 texts: Sequence[str], mask_prob: float = 0.15, batch_size: int = 16,
                 max_length: int = 64, seed: int = 0,
                 batches: Sequence[Batch] | None = None) -> tuple[float, float, int]:
    """Mean masked-LM loss, top-1 accuracy and number of masked tokens."""
    if batches is None:
        batches = validation_batches(texts, vocab, mask_prob, batch_size, max_length, seed)
    nll = correct = count = 0.0
    with ad.no_grad():
        for batch in batches:
            out = forward(params, model_config, batch.student_input, batch.student_mask)
            pos = batch.mlm_targets != IGNORE
            if not pos.any():
                continue
            logits = out.logits.data[pos].astype(np.float64)
            labels = batch.mlm_targets[pos]
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            nll += -logp[np.arange(len(labels)), labels].sum()
            correct += (logits.argmax(axis=-1) == labels).sum()
            count += len(labels)
    if count == 0:
        return 0.0, 0.0, 0
    return nll / count, correct / count, int(count)


def validation_batches(texts: Sequence[str], vocab: Vocabulary, mask_prob: float,
                       batch_size: int, max_length: int, seed: int) -> list[Batch]:
    cfg = TrainConfig(mask_prob=mask_prob, batch_size=batch_size, max_length=max_length)
    rng = np.random.default_rng(seed)
    examples = [prepare_example(t, vocab, None, cfg) for t in texts]
    return [collate(examples[i:i + batch_size], vocab, cfg, rng)
            for i in range(0, len(examples), batch_size)]


# -- training loop -------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: ModelParams
    model_config: ModelConfig
    vocab: Vocabulary
    projection: ProjectionLayer | None
    metrics: list[dict]
    best_val_mlm: float
    best_val_acc: float
    final_val_mlm: float
    final_val_acc: float
    n_truncated: int


def split_corpus(texts: Sequence[str], val_fraction: float) -> tuple[list[str], list[str]]:
    """Hold out the trailing ``val_fraction`` of the corpus for validation."""
    texts = list(texts)
    if len(texts) < 2:
        raise ValueError("need at least two texts to split off a validation set")
    n_val = min(len(texts) - 1, max(1, int(round(len(texts) * val_fraction))))
    return texts[:-n_val], texts[-n_val:]


def _zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def write_metrics(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else repr(row[k])) for k in METRIC_COLUMNS})


def train(texts: Sequence[str], config: TrainConfig, student_vocab: Vocabulary,
          teacher: Teacher | None = None, params: ModelParams | None = None,
          out_dir: str | Path | None = None) -> TrainResult:
    """Train a masked-LM student, distilling from ``teacher`` when distillation terms are set.

    Without ``params`` the student is initialized from the teacher (or
    randomly when ``init_from_teacher`` is off or there is no teacher).
    Validation runs every ``val_every`` optimizer steps and at the end of
    every epoch; the student checkpoint is rewritten on each improvement.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(5)
    init_rng, shuffle_rng, mask_rng, drop_rng, proj_rng = (np.random.default_rng(s) for s in seeds)
    model_config = config.model_config(len(student_vocab))
    distill = config.distill_terms
    if distill and teacher is None:
        raise ValueError(f"loss terms {distill} need a teacher")
    if "mse_attention" in distill and teacher.vocab != student_vocab:
        raise ValueError("mse_attention is only defined for students sharing the teacher vocabulary")
    if teacher is not None:
        freeze(teacher.params)

    if params is None:
        if teacher is not None and config.init_from_teacher:
            params = init_student(teacher.params, teacher.config, teacher.vocab, model_config,
                                  student_vocab, init_rng)
        else:
            params = init_params(model_config, init_rng)
    projection = None
    trainable = dict(params)
    if {"mse_hidden", "cosine"} & set(distill):
        projection = ProjectionLayer.random(model_config.hidden, teacher.config.hidden,
                                            config.projection_mode, proj_rng)
        trainable.update(projection.parameters())
    vocab_pairs = None
    if distill:
        vocab_pairs, coverage = vocab_intersection(teacher.vocab, student_vocab)
        log.info("vocabulary coverage %.3f (%d shared subwords)", coverage, len(vocab_pairs))

    train_texts, val_texts = split_corpus(texts, config.val_fraction)
    t_vocab = teacher.vocab if (teacher is not None and distill) else None
    examples = [prepare_example(t, student_vocab, t_vocab, config, vocab_pairs)
                for t in train_texts]
    val_batches = validation_batches(val_texts, student_vocab, config.mask_prob,
                                     config.batch_size, config.max_length, config.seed + 1)
    n_truncated = sum(e.truncated for e in examples)
    if n_truncated:
        log.warning("%d training texts were truncated to %d tokens", n_truncated, config.max_length)

    schedule = PlateauSchedule(config.peak_lr, config.warmup_steps, config.plateau_patience)
    opt_state = AdamWState()
    metrics: list[dict] = []
    best = (math.inf, 0.0)
    last_val = (math.inf, 0.0)
    step = micro = 0
    pending: dict[str, list[float]] = {}
    out_dir = Path(out_dir) if out_dir is not None else None

    def validate(row: dict) -> None:
        nonlocal best, last_val
        loss, acc, _ = evaluate_mlm(params, model_config, student_vocab, (), batches=val_batches)
        loss, acc = float(loss), float(acc)
        row["val_mlm"], row["val_acc"] = loss, acc
        last_val = (loss, acc)
        if schedule.record_validation(step, loss):
            best = (loss, acc)
            if out_dir is not None:
                extra = projection.named_arrays() if projection is not None else None
                save_model(out_dir / "checkpoint", params, model_config, student_vocab, extra,
                           {"step": step, "val_mlm": loss, "val_acc": acc,
                            "train_config": config.to_dict()})

    done = False
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(examples))
        validated_at = -1
        for start in range(0, len(order), config.batch_size):
            chunk = [examples[i] for i in order[start:start + config.batch_size]]
            batch = collate(chunk, student_vocab, config, mask_rng)
            bundle = compute_losses(params, model_config, batch, config, teacher, projection,
                                    vocab_pairs, train=True, rng=drop_rng)
            total = bundle.total.item()
            if not math.isfinite(total):
                _dump_batch(out_dir, batch, bundle)
                raise TrainingDiverged(f"non-finite loss {total} at step {step}, "
                                       f"texts: {list(batch.texts)[:4]}")
            if bundle.total.requires_grad:
                bundle.total.backward()
            for k, v in bundle.values().items():
                pending.setdefault(k, []).append(v)
            micro += 1
            if micro % config.accum_steps:
                continue
            lr = schedule.lr_at(step + 1)
            optimizer_step(trainable, opt_state, lr, config.weight_decay, config.betas,
                           config.adam_eps)
            _zero_grads(trainable.values())
            step += 1
            row = {"step": step, "lr": lr}
            row.update({k: float(np.mean(v)) for k, v in pending.items()})
            pending = {}
            if step % config.val_every == 0:
                validate(row)
                validated_at = step
            metrics.append(row)
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        if validated_at != step and metrics:
            validate(metrics[-1])
        if done:
            break

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics(out_dir / "metrics.csv", metrics)
    return TrainResult(params, model_config, student_vocab, projection, metrics,
                       best[0], best[1], last_val[0], last_val[1], n_truncated)


def _dump_batch(out_dir: Path | None, batch: Batch, bundle: LossBundle) -> None:
    dump = {"texts": list(batch.texts), "student_input": batch.student_input.tolist(),
            "terms": {k: t.item() for k, t in bundle.terms().items()}}
    log.error("diverged on batch: %s", json.dumps(dump)[:2000])
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "diverged_batch.json").write_text(json.dumps(dump, indent=2))
