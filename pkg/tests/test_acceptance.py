"""End-to-end acceptance checks, one test per criterion.

The terminal summary lists one PASS/FAIL line per criterion (see conftest).
Criterion 8 trains a teacher and six students and takes roughly ten minutes.
"""
import json
import math
import random
import time

import numpy as np
import pytest

from gradcases import CASES, run_case
from oracles import greedy_by_enumeration, grouping_matrix, span_pairs
from vocadistill import autodiff as ad
from vocadistill.alignment import (ReduceAlignment, gather_matched_logits, match_align,
                                   reduce_aggregate, reduce_split, split_teacher_token)
from vocadistill.cli import main
from vocadistill.data import synthetic_corpus
from vocadistill.losses import cosine_hidden_loss, distill_kl_loss, mlm_loss
from vocadistill.model import (PRESETS, PUBLISHED_PARAMS_M, ModelConfig, forward, init_params,
                               init_student)
from vocadistill.tokenizer import Vocabulary, build_vocab, tokenize, vocab_intersection
from vocadistill.trainer import (PlateauSchedule, Teacher, TrainConfig, evaluate_mlm,
                                 split_corpus, train)

ALPHABET = "abcd"


def random_pieces(rng: random.Random, n: int, max_len: int = 4) -> set[str]:
    return {"".join(rng.choice(ALPHABET) for _ in range(rng.randint(2, max_len)))
            for _ in range(n)}


def random_vocab(rng: random.Random, n_pieces: int, full_alphabet: bool = True) -> Vocabulary:
    chars = set(ALPHABET) if full_alphabet else set(rng.sample(ALPHABET, rng.randint(1, 4)))
    pieces = random_pieces(rng, n_pieces) | chars
    tokens = {p for p in pieces if rng.random() < 0.7} | chars
    tokens |= {"##" + p for p in pieces if rng.random() < 0.7} | {"##" + c for c in chars}
    return Vocabulary.from_tokens(sorted(tokens))


def random_text(rng: random.Random, n_words: int) -> str:
    return " ".join("".join(rng.choice(ALPHABET) for _ in range(rng.randint(1, 8)))
                    for _ in range(n_words))


# -- 1 ---------------------------------------------------------------------------------

@pytest.mark.criterion(1, "parameter accounting within 5% of published counts")
def test_parameter_accounting(capsys):
    assert main(["report", "params", "--config", *PRESETS, "--json"]) == 0
    rows = {r["name"]: r["params"] / 1e6 for r in json.loads(capsys.readouterr().out)}
    assert set(rows) == set(PUBLISHED_PARAMS_M)
    for name, published in PUBLISHED_PARAMS_M.items():
        assert abs(rows[name] - published) / published < 0.05, (name, rows[name])


# -- 2 ---------------------------------------------------------------------------------

@pytest.mark.criterion(2, "shape contracts of match, reduce and reduce-match")
def test_shape_contracts():
    rng = random.Random(2)
    nrng = np.random.default_rng(2)
    for _ in range(1000):
        tv, sv = random_vocab(rng, rng.randint(3, 30)), random_vocab(rng, rng.randint(0, 12))
        text = random_text(rng, rng.randint(1, 6))
        t_seq, s_seq = tokenize(tv, text), tokenize(sv, text)
        pairs, _ = vocab_intersection(tv, sv)
        d = rng.randint(1, 8)
        n_t, n_s, v_t, v_s, v_m = len(t_seq), len(s_seq), len(tv), len(sv), len(pairs)

        # match: rows at coinciding positions, columns at shared subwords
        m = match_align(t_seq, s_seq, pairs)
        s_logits, t_logits = ad.Tensor(nrng.normal(size=(n_s, v_s))), nrng.normal(size=(n_t, v_t))
        s_hidden = ad.Tensor(nrng.normal(size=(n_s, d)))
        s_rows = ad.take(s_logits, m.student_positions)
        assert gather_matched_logits(s_rows, m.student_columns).shape == (m.n_match, v_m)
        assert t_logits[m.teacher_positions][:, m.teacher_columns].shape == (m.n_match, v_m)
        assert ad.take(s_hidden, m.student_positions).shape == (m.n_match, d)

        # reduce: auxiliary student rows summed back to teacher positions
        r = reduce_split(t_seq, tv, sv)
        aux_hidden = ad.Tensor(nrng.normal(size=(r.n_student, d)))
        aux_logits = ad.Tensor(nrng.normal(size=(r.n_student, v_s)))
        assert reduce_aggregate(aux_hidden, r).shape == (n_t, d)
        reduced = reduce_aggregate(aux_logits, r)
        assert reduced.shape == (n_t, v_s)

        # reduce-match: reduced rows, shared vocabulary columns
        assert gather_matched_logits(reduced, m.student_columns).shape == (n_t, v_m)


# -- 3 ---------------------------------------------------------------------------------

@pytest.mark.criterion(3, "alignment functions agree with brute-force oracles")
def test_alignment_oracles():
    rng = random.Random(3)
    for _ in range(500):
        tv, sv = random_vocab(rng, rng.randint(3, 30)), random_vocab(rng, rng.randint(0, 20))
        text = random_text(rng, rng.randint(1, 5))
        t_seq, s_seq = tokenize(tv, text), tokenize(sv, text)
        pairs, _ = vocab_intersection(tv, sv)
        t_tok, s_tok = t_seq.tokens(tv), s_seq.tokens(sv)
        expected = [(i, j) for i, j in span_pairs(t_tok, t_seq.spans, s_tok, s_seq.spans)
                    if not tv.is_special(t_seq.ids[i])]
        assert list(match_align(t_seq, s_seq, pairs).seq_pairs) == expected

    for _ in range(500):
        tv = random_vocab(rng, rng.randint(3, 30))
        sv = random_vocab(rng, rng.randint(0, 12), full_alphabet=rng.random() < 0.5)
        t_seq = tokenize(tv, random_text(rng, rng.randint(1, 4)))
        r = reduce_split(t_seq, tv, sv)
        student_tokens = set(sv.tokens)
        for pos, tid in enumerate(t_seq.ids):
            token = tv.tokens[tid]
            got = [sv.tokens[i] for i in (r.student_ids[k] for k in r.groups[pos])]
            want = None if tv.is_special(tid) else greedy_by_enumeration(
                tv.strip(token), student_tokens, "##", not tv.is_continuation(token))
            if want is None:
                assert pos in r.unk_groups and got == [sv.tokens[sv.unk_id]]
            else:
                assert pos not in r.unk_groups and got == want

    nrng = np.random.default_rng(3)
    for _ in range(500):
        sizes = nrng.integers(1, 5, size=int(nrng.integers(1, 10)))
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        groups = tuple(tuple(range(a, b)) for a, b in zip(bounds[:-1], bounds[1:]))
        n = int(bounds[-1])
        al = ReduceAlignment(groups, tuple(range(n)), tuple((i, i + 1) for i in range(n)))
        x = nrng.normal(size=(n, int(nrng.integers(1, 7))))
        with ad.precision(np.float64):
            got = reduce_aggregate(ad.Tensor(x), al).data
        # summing at most four terms in either order gives identical doubles here
        np.testing.assert_allclose(got, grouping_matrix(groups, n) @ x, rtol=0, atol=1e-12)


# -- 4 ---------------------------------------------------------------------------------

@pytest.mark.criterion(4, "reduce groups concatenate to the teacher subword")
def test_reduce_concatenation_invariant():
    rng = random.Random(4)
    violations = splits = 0
    for _ in range(100):
        sv = random_vocab(rng, rng.randint(0, 15), full_alphabet=rng.random() < 0.6)
        for _ in range(100):
            body = "".join(rng.choice(ALPHABET) for _ in range(rng.randint(1, 10)))
            token = body if rng.random() < 0.5 else "##" + body
            tv = Vocabulary.from_tokens([token])
            pieces = split_teacher_token(token, tv, sv)
            if pieces is None:
                continue  # flagged UNK
            splits += 1
            ok = (all(p in sv.token_to_id for p in pieces)
                  and "".join(sv.strip(p) for p in pieces) == body
                  and sv.is_continuation(pieces[0]) == tv.is_continuation(token)
                  and all(sv.is_continuation(p) for p in pieces[1:]))
            violations += not ok
    assert violations == 0
    assert splits > 1000  # the sample exercises real splits, not only UNK


# -- 5 ---------------------------------------------------------------------------------

@pytest.mark.criterion(5, "finite-difference gradient checks")
def test_gradient_checks():
    start = time.perf_counter()
    fractions = {name: run_case(name) for name in CASES}
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in fractions.items() if v < 0.99}
    assert not bad, bad
    assert elapsed < 60, elapsed


# -- 6 ---------------------------------------------------------------------------------

@pytest.mark.criterion(6, "loss identities")
def test_loss_identities():
    rng = np.random.default_rng(6)
    with ad.precision(np.float64):
        for _ in range(50):
            n, v = int(rng.integers(1, 6)), int(rng.integers(2, 30))
            t, s = rng.normal(size=(n, v)) * 3, rng.normal(size=(n, v)) * 3
            assert abs(distill_kl_loss(t, ad.Tensor(t)).item()) <= 1e-9
            kl = distill_kl_loss(t, ad.Tensor(s)).item()
            ce = distill_kl_loss(t, ad.Tensor(s), variant="ce").item()
            p = np.exp(t - t.max(1, keepdims=True))
            p /= p.sum(1, keepdims=True)
            entropy = float(-(p * np.log(p)).sum(1).mean())
            assert abs((ce - kl) - entropy) <= 1e-6

            d = int(rng.integers(2, 10))
            a = rng.normal(size=(n, d))
            ortho = rng.normal(size=(n, d))
            ortho -= (ortho * a).sum(1, keepdims=True) / (a * a).sum(1, keepdims=True) * a
            scale = rng.uniform(0.1, 10, size=(n, 1))
            assert abs(cosine_hidden_loss(a, ad.Tensor(a * scale)).item()) <= 1e-6
            assert abs(cosine_hidden_loss(a, ad.Tensor(ortho)).item() - 1.0) <= 1e-6
            assert abs(cosine_hidden_loss(a, ad.Tensor(-a * scale)).item() - 2.0) <= 1e-6

            targets = rng.integers(0, v, size=n)
            uniform = ad.Tensor(np.full((n, v), rng.normal()))
            assert abs(mlm_loss(uniform, targets).item() - math.log(v)) <= 1e-6


# -- 7 ---------------------------------------------------------------------------------

@pytest.mark.criterion(7, "copy-configured student reproduces teacher logits")
def test_initialization_fidelity():
    corpus = synthetic_corpus(20_000, seed=7)
    vocab = build_vocab(corpus, 200)
    config = ModelConfig(4, 32, 4, len(vocab), max_positions=40)
    rng = np.random.default_rng(7)
    teacher = init_params(config, rng)
    student = init_student(teacher, config, vocab, config, vocab)
    for _ in range(20):
        b, n = int(rng.integers(1, 5)), int(rng.integers(2, 40))
        ids = rng.integers(0, len(vocab), size=(b, n))
        mask = np.ones((b, n), dtype=bool)
        mask[:, int(rng.integers(1, n + 1)):] = False
        with ad.no_grad():
            t = forward(teacher, config, ids, mask).logits.data
            s = forward(student, config, ids, mask).logits.data
        assert np.abs(t - s).max() <= 1e-6


# -- 8 ---------------------------------------------------------------------------------

DESK = dict(epochs=100, warmup_steps=100, peak_lr=2e-3, accum_steps=1, batch_size=32)
MASK_DRAWS = 10


@pytest.mark.slow
@pytest.mark.criterion(8, "KL-match distillation beats MLM-only at desk scale")
def test_desk_scale_distillation_trend():
    texts = synthetic_corpus(200_000, seed=0)
    teacher_vocab = build_vocab(texts, 500)
    student_vocab = build_vocab(texts, 250)
    teacher_cfg = TrainConfig(losses=("mlm",), max_steps=2000, val_every=200, seed=0,
                              model={"n_layers": 4, "hidden": 64, "n_heads": 4}, **DESK)
    t = train(texts, teacher_cfg, teacher_vocab)
    teacher = Teacher(t.params, t.model_config, t.vocab)

    _, val = split_corpus(texts, 0.05)
    scores: dict[tuple[str, ...], list[float]] = {("mlm",): [], ("mlm", "kl"): []}
    for seed in range(3):
        for losses in scores:
            cfg = TrainConfig(losses=losses, strategy="match", max_steps=1000, val_every=100,
                              seed=seed, model={"n_layers": 2, "hidden": 32, "n_heads": 4},
                              **DESK)
            r = train(texts, cfg, student_vocab, teacher)
            # average over several masking draws of the same held-out texts
            accs = [evaluate_mlm(r.params, r.model_config, student_vocab, val, seed=s)[1]
                    for s in range(MASK_DRAWS)]
            scores[losses].append(float(np.mean(accs)))
    mlm_only, with_kl = np.mean(scores[("mlm",)]), np.mean(scores[("mlm", "kl")])
    print(f"validation accuracy: MLM {mlm_only:.4f}  MLM+KL {with_kl:.4f}  per seed {scores}")
    assert with_kl > mlm_only


# -- 9 ---------------------------------------------------------------------------------

@pytest.mark.criterion(9, "warmup ramp and plateau halving")
def test_schedule_conformance():
    peak, warmup = 5e-4, 40
    s = PlateauSchedule(peak, warmup, patience=3)
    assert [s.lr_at(k) for k in range(warmup + 1)] == [peak * k / warmup
                                                      for k in range(warmup + 1)]
    # validation losses at steps 50, 60, ...: two improvements, then three misses
    losses = [3.0, 2.5, 2.6, 2.5, 2.7]
    for i, loss in enumerate(losses):
        step = 50 + 10 * i
        s.record_validation(step, loss)
        expected = peak if i < 4 else peak / 2
        assert s.lr_at(step) == expected
    # improvement resets the counter, three more misses halve again
    for i, loss in enumerate([2.0, 2.1, 2.2, 2.3]):
        step = 100 + 10 * i
        s.record_validation(step, loss)
        assert s.lr_at(step) == (peak / 2 if i < 3 else peak / 4)


# -- 10 --------------------------------------------------------------------------------

@pytest.mark.criterion(10, "identical-seed distill runs write identical metrics")
def test_distill_run_determinism(tmp_path, capsys):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("\n".join(synthetic_corpus(10_000, seed=10)) + "\n")
    small = {"batch_size": 4, "accum_steps": 2, "warmup_steps": 2, "max_steps": 8,
             "val_every": 4, "max_length": 24}
    teacher_cfg = tmp_path / "teacher.json"
    teacher_cfg.write_text(json.dumps({
        "losses": ["mlm"], "vocab_size": 120, **small,
        "model": {"n_layers": 2, "hidden": 16, "n_heads": 2, "max_positions": 32}}))
    student_cfg = tmp_path / "student.json"
    student_cfg.write_text(json.dumps({
        "losses": ["mlm", "kl", "mse_hidden"], "strategy": "reduce-match", "vocab_size": 70,
        "projection_mode": "trainable", **small,
        "model": {"n_layers": 1, "hidden": 8, "n_heads": 2, "max_positions": 32}}))
    assert main(["pretrain-teacher", "--corpus", str(corpus), "--config", str(teacher_cfg),
                 "--out", str(tmp_path / "teacher")]) == 0
    for name in ("a", "b"):
        assert main(["distill", "run", "--teacher", str(tmp_path / "teacher" / "final"),
                     "--config", str(student_cfg), "--corpus", str(corpus),
                     "--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert len(a.splitlines()) > 8
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
