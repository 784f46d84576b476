import csv
import io
import json
import random

import pytest

from vocadistill.cli import file_digest, main
from vocadistill.data import synthetic_corpus

TEACHER_CFG = {"losses": ["mlm"], "vocab_size": 120, "max_steps": 6, "val_every": 3,
               "batch_size": 4, "accum_steps": 1, "warmup_steps": 2, "max_length": 24,
               "model": {"n_layers": 2, "hidden": 16, "n_heads": 2, "max_positions": 32}}
STUDENT_CFG = {"losses": ["mlm", "kl"], "strategy": "match", "vocab_size": 70, "max_steps": 6,
               "val_every": 3, "batch_size": 4, "accum_steps": 1, "warmup_steps": 2,
               "max_length": 24,
               "model": {"n_layers": 1, "hidden": 8, "n_heads": 2, "max_positions": 32}}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("\n".join(synthetic_corpus(8_000, seed=2)) + "\n")
    return path


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


def test_vocab_build_sizes(tmp_path, capsys):
    rng = random.Random(0)
    words = ["".join(rng.choice("abcdefghijklmnopqrstuvwxyz") for _ in range(rng.randint(3, 9)))
             for _ in range(40_000)]
    corpus = tmp_path / "big.txt"
    corpus.write_text("\n".join(" ".join(words[i:i + 20]) for i in range(0, len(words), 20)))
    for size in (5000, 10000, 20000, 30000):
        out = tmp_path / f"v{size}.txt"
        code, _, err = run(capsys, "vocab", "build", "--corpus", corpus, "--size", size,
                           "--out", out)
        assert code == 0, err
        assert len(out.read_text().splitlines()) - 7 == size  # 7 header lines
        assert (tmp_path / f"v{size}.txt.manifest.json").exists()


def test_vocab_build_errors_and_determinism(tmp_path, corpus_file, capsys):
    code, _, err = run(capsys, "vocab", "build", "--corpus", corpus_file, "--size", 10,
                       "--out", tmp_path / "v.txt")
    assert code == 2 and "at least" in err
    digests = []
    for name in ("a.txt", "b.txt"):
        assert run(capsys, "vocab", "build", "--corpus", corpus_file, "--size", 100,
                   "--out", tmp_path / name)[0] == 0
        digests.append(file_digest(tmp_path / name))
    assert digests[0] == digests[1]
    assert run(capsys, "vocab", "build", "--corpus", tmp_path / "missing.txt", "--size", 100,
               "--out", tmp_path / "c.txt")[0] == 2
    assert run(capsys, "vocab", "build", "--corpus", corpus_file)[0] == 2


def test_tokenize_and_align(tmp_path, corpus_file, capsys):
    tv, sv = tmp_path / "t.txt", tmp_path / "s.txt"
    run(capsys, "vocab", "build", "--corpus", corpus_file, "--size", 150, "--out", tv)
    run(capsys, "vocab", "build", "--corpus", corpus_file, "--size", 60, "--out", sv)
    text = tmp_path / "text.txt"
    text.write_text("the klosoulai zugaibo tous .\n")

    code, out, _ = run(capsys, "tokenize", "--vocab", sv, "--text", text, "--json")
    rows = json.loads(out)
    assert code == 0 and rows[0]["text"].startswith("the")

    code, out, _ = run(capsys, "align", "inspect", "--teacher-vocab", tv, "--student-vocab", tv,
                       "--text", text, "--json")
    stats = json.loads(out)
    assert code == 0 and stats["vocab_coverage"] == 1.0 and stats["match_fraction"] == 1.0

    code, out, _ = run(capsys, "align", "inspect", "--teacher-vocab", tv, "--student-vocab", sv,
                       "--text", text, "--strategy", "reduce")
    assert code == 0 and "mean_group_size" in out
    for line in out.splitlines():
        parts = line.split("\t")
        if len(parts) == 3 and parts[0].isdigit():
            pieces = [p.split(":", 1)[1].removeprefix("##") for p in parts[2].split()]
            assert "".join(pieces) == parts[1].removeprefix("##")


def test_pipeline_and_determinism(tmp_path, corpus_file, capsys, monkeypatch):
    tcfg = write_json(tmp_path / "teacher.json", TEACHER_CFG)
    scfg = write_json(tmp_path / "student.json", STUDENT_CFG)
    code, _, err = run(capsys, "pretrain-teacher", "--corpus", corpus_file, "--config", tcfg,
                       "--out", tmp_path / "teacher")
    assert code == 0, err
    assert (tmp_path / "teacher" / "run_manifest.json").exists()
    for name in ("s1", "s2"):
        code, _, err = run(capsys, "distill", "run", "--teacher", tmp_path / "teacher" / "final",
                           "--config", scfg, "--corpus", corpus_file, "--out", tmp_path / name)
        assert code == 0, err
    assert ((tmp_path / "s1" / "metrics.csv").read_bytes()
            == (tmp_path / "s2" / "metrics.csv").read_bytes())
    manifest = json.loads((tmp_path / "s1" / "run_manifest.json").read_text())
    assert manifest["command"] == "distill run" and manifest["seed"] == 0
    assert str(corpus_file) in manifest["inputs"]

    code, out, _ = run(capsys, "eval", "mlm", "--model", tmp_path / "s1" / "final",
                       "--corpus", corpus_file, "--json")
    result = json.loads(out)
    assert code == 0 and 0.0 <= result["accuracy"] <= 1.0 and result["masked_tokens"] > 0

    monkeypatch.setenv("VOCADISTILL_SEED", "5")
    run(capsys, "distill", "run", "--teacher", tmp_path / "teacher" / "final", "--config", scfg,
        "--corpus", corpus_file, "--out", tmp_path / "s3")
    assert json.loads((tmp_path / "s3" / "run_manifest.json").read_text())["seed"] == 5


def test_bad_configs_exit_2(tmp_path, corpus_file, capsys):
    bad = write_json(tmp_path / "bad.json", {**TEACHER_CFG, "colour": "blue"})
    assert run(capsys, "pretrain-teacher", "--corpus", corpus_file, "--config", bad,
               "--out", tmp_path / "o")[0] == 2
    kl = write_json(tmp_path / "kl.json", STUDENT_CFG)
    assert run(capsys, "pretrain-teacher", "--corpus", corpus_file, "--config", kl,
               "--out", tmp_path / "o")[0] == 2
    assert run(capsys, "distill", "run", "--teacher", tmp_path / "nowhere", "--config", kl,
               "--corpus", corpus_file, "--out", tmp_path / "o")[0] == 2
    assert run(capsys, "report", "params", "--config", tmp_path / "missing.json")[0] == 2
    assert run(capsys, "no-such-command")[0] == 2


def test_runtime_failure_exit_1(tmp_path, corpus_file, capsys):
    tcfg = write_json(tmp_path / "teacher.json", TEACHER_CFG)
    run(capsys, "pretrain-teacher", "--corpus", corpus_file, "--config", tcfg,
        "--out", tmp_path / "teacher")
    (tmp_path / "teacher" / "final" / "arrays.bin").write_bytes(b"\0" * 8)
    code, _, err = run(capsys, "eval", "mlm", "--model", tmp_path / "teacher" / "final",
                       "--corpus", corpus_file)
    assert code == 1 and "error" in err


def test_report_params(capsys):
    code, out, _ = run(capsys, "report", "params", "--config", "teacher", "distil-tiny5", "--json")
    rows = {r["name"]: r for r in json.loads(out)}
    assert code == 0
    assert abs(rows["teacher"]["params"] / 1e6 - 177.9) / 177.9 < 0.05
    assert abs(rows["distil-tiny5"]["params"] / 1e6 - 3.6) / 3.6 < 0.05


def test_report_params_from_json(tmp_path, capsys):
    cfg = write_json(tmp_path / "m.json", {"n_layers": 3, "hidden": 264, "n_heads": 12,
                                           "vocab_size": 30500, "ffn_dim": 792})
    code, out, _ = run(capsys, "report", "params", "--config", cfg)
    assert code == 0 and out.startswith("m\t10.4M")


def test_embedding_ratio_csv(capsys):
    code, out, _ = run(capsys, "report", "embedding-ratio", "--configs", "distil-tiny5",
                       "--vocab-sizes", 5000, 10000, 20000, 30000)
    rows = list(csv.DictReader(io.StringIO(out)))
    fracs = [float(r["embedding_fraction"]) for r in rows]
    assert code == 0 and len(rows) == 4
    assert all(a < b for a, b in zip(fracs, fracs[1:]))
