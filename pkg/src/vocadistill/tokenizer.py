"""Subword vocabularies: BPE-style construction and greedy longest-prefix tokenization."""
from __future__ import annotations

import hashlib
import heapq
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

SPECIAL_ROLES = ("PAD", "UNK", "CLS", "SEP", "MASK")
DEFAULT_SPECIALS = {role: f"[{role}]" for role in SPECIAL_ROLES}
N_SPECIALS = len(SPECIAL_ROLES)

_HEADER = "#!"


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PS"


def pre_tokenize(text: str) -> list[tuple[str, int, int]]:
    """Split text into words with half-open character spans.

    Whitespace separates words; every punctuation or symbol character
    becomes a word of its own.
    """
    words = []
    start = None
    for i, ch in enumerate(text):
        if ch.isspace() or _is_punct(ch):
            if start is not None:
                words.append((text[start:i], start, i))
                start = None
            if not ch.isspace():
                words.append((ch, i, i + 1))
        elif start is None:
            start = i
    if start is not None:
        words.append((text[start:], start, len(text)))
    return words


def _lower_preserving_length(text: str) -> str:
    return "".join(c if len(c.lower()) != 1 else c.lower() for c in text)


@dataclass(frozen=True)
class Vocabulary:
    """Immutable ordered subword vocabulary; id is the position in ``tokens``."""

    tokens: tuple[str, ...]
    continuation_prefix: str = "##"
    special_tokens: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_SPECIALS))
    lowercase: bool = False
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)
    max_token_chars: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        index = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise ValueError(f"duplicate token {tok!r} at ids {index[tok]} and {i}")
            index[tok] = i
        object.__setattr__(self, "token_to_id", index)
        if set(self.special_tokens) != set(SPECIAL_ROLES):
            raise ValueError(f"special roles must be exactly {SPECIAL_ROLES}")
        special_strings = set(self.special_tokens.values())
        if len(special_strings) != N_SPECIALS:
            raise ValueError("special tokens must be distinct")
        for role, tok in self.special_tokens.items():
            if tok not in index:
                raise ValueError(f"special token {role}={tok!r} missing from vocabulary")
        p = self.continuation_prefix
        for tok in tokens:
            if tok in special_strings:
                continue
            body = tok[len(p):] if p and tok.startswith(p) else tok
            if not body:
                raise ValueError(f"token {tok!r} is empty after stripping {p!r}")
        object.__setattr__(self, "max_token_chars", max((len(t) for t in tokens), default=0))

    @classmethod
    def from_tokens(cls, tokens: Iterable[str], continuation_prefix: str = "##",
                    lowercase: bool = False) -> "Vocabulary":
        """Build a vocabulary with the default specials prepended (ids 0..4)."""
        specials = [DEFAULT_SPECIALS[r] for r in SPECIAL_ROLES]
        rest = [t for t in tokens if t not in specials]
        return cls(tuple(specials + rest), continuation_prefix, dict(DEFAULT_SPECIALS), lowercase)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def specials(self) -> dict[str, int]:
        return {role: self.token_to_id[tok] for role, tok in self.special_tokens.items()}

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.specials.values())

    @property
    def pad_id(self) -> int:
        return self.token_to_id[self.special_tokens["PAD"]]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[self.special_tokens["UNK"]]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[self.special_tokens["MASK"]]

    def is_special(self, token_id: int) -> bool:
        return token_id in self.special_ids

    def is_continuation(self, token: str) -> bool:
        return bool(self.continuation_prefix) and token.startswith(self.continuation_prefix)

    def strip(self, token: str) -> str:
        """Token text without its continuation prefix."""
        return token[len(self.continuation_prefix):] if self.is_continuation(token) else token

    def normalize(self, text: str) -> str:
        return _lower_preserving_length(text) if self.lowercase else text

    def to_text(self) -> str:
        lines = [f"{_HEADER} continuation_prefix={self.continuation_prefix}",
                 f"{_HEADER} lowercase={'true' if self.lowercase else 'false'}"]
        lines += [f"{_HEADER} special.{role}={self.special_tokens[role]}" for role in SPECIAL_ROLES]
        lines += list(self.tokens)
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        prefix, lowercase = "##", False
        specials = dict(DEFAULT_SPECIALS)
        tokens = []
        in_header = True
        for line in text.split("\n"):
            if in_header and line.startswith(_HEADER):
                key, _, value = line[len(_HEADER):].strip().partition("=")
                if key == "continuation_prefix":
                    prefix = value
                elif key == "lowercase":
                    lowercase = value == "true"
                elif key.startswith("special."):
                    specials[key[len("special."):]] = value
                else:
                    raise ValueError(f"unknown vocabulary header key {key!r}")
                continue
            in_header = False
            tokens.append(line)
        if tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tuple(tokens), prefix, specials, lowercase)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class TokenizedSequence:
    ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]
    source_hash: str

    def __post_init__(self):
        if len(self.ids) != len(self.spans):
            raise ValueError(f"{len(self.ids)} ids but {len(self.spans)} spans")

    def __len__(self) -> int:
        return len(self.ids)

    def tokens(self, vocab: Vocabulary) -> list[str]:
        return [vocab.tokens[i] for i in self.ids]

    def truncate(self, n: int) -> "TokenizedSequence":
        return TokenizedSequence(self.ids[:n], self.spans[:n], self.source_hash)


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# -- vocabulary construction -------------------------------------------------

def _word_symbols(word: str, prefix: str) -> tuple[str, ...]:
    return (word[0],) + tuple(prefix + c for c in word[1:])


def _merge_symbols(left: str, right: str, prefix: str) -> str:
    return left + (right[len(prefix):] if prefix else right)


def build_vocab(corpus: Iterable[str] | str, target_size: int, continuation_prefix: str = "##",
                lowercase: bool = False) -> Vocabulary:
    """Learn a vocabulary of exactly ``target_size`` entries by pair merging.

    ``corpus`` is a string or an iterable of lines. Words are split with
    :func:`pre_tokenize`; symbols after the first character of a word carry
    ``continuation_prefix``. The most frequent adjacent symbol pair is
    merged repeatedly; ties go to the lexicographically smallest pair.
    Ids: specials first, then the sorted character alphabet, then merges in
    the order they were learned.
    """
    if isinstance(corpus, str):
        corpus = [corpus]
    prefix = continuation_prefix
    word_counts: Counter[str] = Counter()
    for line in corpus:
        if lowercase:
            line = _lower_preserving_length(line)
        word_counts.update(w for w, _, _ in pre_tokenize(line))
    if not word_counts:
        raise ValueError("empty corpus: no words to learn a vocabulary from")

    # deterministic word order: first occurrence order is preserved by Counter
    words = [list(_word_symbols(w, prefix)) for w in word_counts]
    freqs = list(word_counts.values())
    alphabet = sorted({s for w in words for s in w})
    min_size = N_SPECIALS + len(alphabet)
    if target_size < min_size:
        raise ValueError(
            f"target_size {target_size} is too small: the corpus needs at least {min_size} "
            f"entries ({N_SPECIALS} specials + {len(alphabet)} character forms)")

    tokens = [DEFAULT_SPECIALS[r] for r in SPECIAL_ROLES] + alphabet
    known = set(tokens)

    pair_counts: dict[tuple[str, str], int] = defaultdict(int)
    pair_words: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, (syms, f) in enumerate(zip(words, freqs)):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += f
            pair_words[pair].add(wi)
    heap = [(-c, pair) for pair, c in pair_counts.items()]
    heapq.heapify(heap)

    while len(tokens) < target_size:
        while heap:
            neg, pair = heapq.heappop(heap)
            if pair_counts.get(pair, 0) == -neg and neg < 0:
                break
        else:
            raise ValueError(
                f"corpus supports at most {len(tokens)} vocabulary entries; "
                f"requested {target_size}")
        left, right = pair
        merged = _merge_symbols(left, right, prefix)
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
        touched = set()
        for wi in sorted(pair_words.pop(pair, ())):
            syms, f = words[wi], freqs[wi]
            for p in zip(syms, syms[1:]):
                pair_counts[p] -= f
                touched.add(p)
            out = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == left and syms[i + 1] == right:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[wi] = out
            for p in zip(out, out[1:]):
                pair_counts[p] += f
                pair_words[p].add(wi)
                touched.add(p)
        pair_counts.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                pair_counts.pop(p, None)
                pair_words.pop(p, None)
    return Vocabulary(tuple(tokens), prefix, dict(DEFAULT_SPECIALS), lowercase)


# -- tokenization -------------------------------------------------------------

def greedy_split(body: str, vocab: Vocabulary, word_initial: bool) -> list[str] | None:
    """Segment ``body`` left to right by longest-prefix match.

    The first piece uses the word-initial form when ``word_initial`` is true
    and the continuation form otherwise; all later pieces are continuations.
    Returns None when some position has no matching vocabulary entry.
    """
    prefix = vocab.continuation_prefix
    lookup = vocab.token_to_id
    pieces = []
    start = 0
    n = len(body)
    while start < n:
        mark = "" if (start == 0 and word_initial) else prefix
        longest = min(n, start + vocab.max_token_chars - len(mark))
        for end in range(longest, start, -1):
            cand = mark + body[start:end]
            if cand in lookup:
                pieces.append(cand)
                start = end
                break
        else:
            return None
    return pieces


def tokenize(vocab: Vocabulary, text: str) -> TokenizedSequence:
    """Tokenize ``text`` word by word; an unsegmentable word becomes one UNK."""
    normalized = vocab.normalize(text)
    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    specials = set(vocab.special_tokens.values())
    for word, start, end in pre_tokenize(normalized):
        pieces = greedy_split(word, vocab, word_initial=True)
        if pieces is None or any(p in specials for p in pieces):
            ids.append(vocab.unk_id)
            spans.append((start, end))
            continue
        pos = start
        for piece in pieces:
            length = len(vocab.strip(piece))
            ids.append(vocab.token_to_id[piece])
            spans.append((pos, pos + length))
            pos += length
    return TokenizedSequence(tuple(ids), tuple(spans), text_digest(text))


def vocab_intersection(v_teacher: Vocabulary, v_student: Vocabulary,
                       include_specials: bool = False) -> tuple[list[tuple[int, int]], float]:
    """Pairs ``(student_id, teacher_id)`` of identical non-special token strings.

    Coverage is the matched share of the student's non-special tokens.
    With ``include_specials`` the five special roles are prepended, paired
    by role rather than by string; coverage is unaffected.
    """
    s_special = set(v_student.special_tokens.values())
    t_special = set(v_teacher.special_tokens.values())
    pairs = []
    for sid, tok in enumerate(v_student.tokens):
        if tok in s_special:
            continue
        tid = v_teacher.token_to_id.get(tok)
        if tid is not None and tok not in t_special:
            pairs.append((sid, tid))
    if not pairs:
        raise ValueError("teacher and student vocabularies share no non-special tokens; "
                         "distillation alignment needs a non-empty intersection")
    coverage = len(pairs) / (len(v_student) - N_SPECIALS)
    if include_specials:
        s_ids, t_ids = v_student.specials, v_teacher.specials
        pairs = [(s_ids[r], t_ids[r]) for r in SPECIAL_ROLES] + pairs
    return pairs, coverage
