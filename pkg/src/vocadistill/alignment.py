"""Sequence and vocabulary alignment between teacher and student tokenizations.

Two strategies:

* match: keep only positions where both tokenizers produced the same
  subword over the same characters, and only vocabulary columns whose
  subword exists in both vocabularies;
* reduce: re-split every teacher subword into student subwords (the
  auxiliary student input) and sum student rows back per teacher position.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .tokenizer import TokenizedSequence, Vocabulary, greedy_split


@dataclass(frozen=True)
class MatchAlignment:
    seq_pairs: tuple[tuple[int, int], ...]     # (teacher_pos, student_pos)
    vocab_pairs: tuple[tuple[int, int], ...]   # (student_id, teacher_id)

    @property
    def n_match(self) -> int:
        return len(self.seq_pairs)

    @property
    def teacher_positions(self) -> np.ndarray:
        return np.array([t for t, _ in self.seq_pairs], dtype=np.int64)

    @property
    def student_positions(self) -> np.ndarray:
        return np.array([s for _, s in self.seq_pairs], dtype=np.int64)

    @property
    def student_columns(self) -> np.ndarray:
        return np.array([s for s, _ in self.vocab_pairs], dtype=np.int64)

    @property
    def teacher_columns(self) -> np.ndarray:
        return np.array([t for _, t in self.vocab_pairs], dtype=np.int64)


@dataclass(frozen=True)
class ReduceAlignment:
    groups: tuple[tuple[int, ...], ...]
    student_ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]
    unk_groups: frozenset[int] = frozenset()

    def __post_init__(self):
        expected = 0
        for group in self.groups:
            if not group or list(group) != list(range(expected, expected + len(group))):
                raise ValueError("groups must partition the auxiliary positions in order")
            expected += len(group)
        if expected != len(self.student_ids):
            raise ValueError(f"groups cover {expected} positions, "
                             f"auxiliary input has {len(self.student_ids)}")

    @property
    def n_teacher(self) -> int:
        return len(self.groups)

    @property
    def n_student(self) -> int:
        return len(self.student_ids)

    def segment_ids(self) -> np.ndarray:
        """Teacher position owning each auxiliary student position."""
        seg = np.empty(self.n_student, dtype=np.int64)
        for i, group in enumerate(self.groups):
            seg[list(group)] = i
        return seg

    def valid_positions(self) -> np.ndarray:
        """Teacher positions usable by distillation terms (UNK fallbacks excluded)."""
        return np.array([i for i in range(self.n_teacher) if i not in self.unk_groups],
                        dtype=np.int64)

    def as_sequence(self, source_hash: str) -> TokenizedSequence:
        return TokenizedSequence(self.student_ids, self.spans, source_hash)


def match_align(teacher_seq: TokenizedSequence, student_seq: TokenizedSequence,
                vocab_pairs: Sequence[tuple[int, int]]) -> MatchAlignment:
    """Pair positions whose subword string and character span coincide."""
    if teacher_seq.source_hash != student_seq.source_hash:
        raise ValueError("teacher and student sequences come from different source texts")
    allowed = set(map(tuple, vocab_pairs))
    pairs = []
    i = j = 0
    t_spans, s_spans = teacher_seq.spans, student_seq.spans
    while i < len(t_spans) and j < len(s_spans):
        ts, ss = t_spans[i], s_spans[j]
        if ts == ss:
            if (student_seq.ids[j], teacher_seq.ids[i]) in allowed:
                pairs.append((i, j))
            i += 1
            j += 1
        elif ts < ss:
            i += 1
        else:
            j += 1
    return MatchAlignment(tuple(pairs), tuple(map(tuple, vocab_pairs)))


def split_teacher_token(token: str, teacher_vocab: Vocabulary,
                        student_vocab: Vocabulary) -> list[str] | None:
    """Greedy student segmentation of one teacher subword, or None if impossible.

    A continuation teacher subword is split starting from continuation forms.
    """
    initial = not teacher_vocab.is_continuation(token)
    return greedy_split(teacher_vocab.strip(token), student_vocab, word_initial=initial)


def reduce_split(teacher_seq: TokenizedSequence, teacher_vocab: Vocabulary,
                 student_vocab: Vocabulary) -> ReduceAlignment:
    """Build the auxiliary student input by re-splitting each teacher subword."""
    groups, ids, spans, unk = [], [], [], set()
    s_unk = student_vocab.unk_id
    for pos, (tid, (start, end)) in enumerate(zip(teacher_seq.ids, teacher_seq.spans)):
        pieces = None
        if not teacher_vocab.is_special(tid):
            pieces = split_teacher_token(teacher_vocab.tokens[tid], teacher_vocab, student_vocab)
        first = len(ids)
        if pieces is None:
            ids.append(s_unk)
            spans.append((start, end))
            unk.add(pos)
        else:
            at = start
            for piece in pieces:
                length = len(student_vocab.strip(piece))
                ids.append(student_vocab.token_to_id[piece])
                spans.append((at, at + length))
                at += length
        groups.append(tuple(range(first, len(ids))))
    return ReduceAlignment(tuple(groups), tuple(ids), tuple(spans), frozenset(unk))


def reduce_aggregate(student_rows: ad.Tensor, alignment: ReduceAlignment) -> ad.Tensor:
    """Sum student rows per teacher position: ``(|X_s'|, d) -> (|X_t|, d)``."""
    if student_rows.ndim != 2 or student_rows.shape[0] != alignment.n_student:
        raise ValueError(f"expected {alignment.n_student} student rows, "
                         f"got tensor of shape {student_rows.shape}")
    return ad.segment_sum(student_rows, alignment.segment_ids(), alignment.n_teacher)


def gather_matched_logits(logits: ad.Tensor, vocab_index_map) -> ad.Tensor:
    """Select vocabulary columns in the given order: ``(n, |V|) -> (n, |V_match|)``."""
    idx = np.asarray(vocab_index_map, dtype=np.int64)
    v = logits.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"vocabulary index out of range for {v} columns")
    return ad.take(logits, idx, axis=-1)


def format_alignment(teacher_tokens: Sequence[str], student_tokens: Sequence[str],
                     alignment: MatchAlignment | ReduceAlignment) -> str:
    """One line per teacher position: position, subword, aligned student positions."""
    lines = []
    if isinstance(alignment, ReduceAlignment):
        for i, group in enumerate(alignment.groups):
            parts = " ".join(f"{k}:{student_tokens[k]}" for k in group)
            flag = "\tUNK" if i in alignment.unk_groups else ""
            lines.append(f"{i}\t{teacher_tokens[i]}\t{parts}{flag}")
    else:
        paired = dict(alignment.seq_pairs)
        for i, tok in enumerate(teacher_tokens):
            k = paired.get(i)
            lines.append(f"{i}\t{tok}\t" + (f"{k}:{student_tokens[k]}" if k is not None else "-"))
    return "\n".join(lines)
