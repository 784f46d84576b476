"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 invalid usage or configuration.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .alignment import format_alignment, match_align, reduce_split
from .checkpoint import load_model, save_model
from .data import read_corpus
from .model import PRESETS, ModelConfig, count_params
from .tokenizer import Vocabulary, build_vocab, tokenize, vocab_intersection
from .trainer import Teacher, TrainConfig, evaluate_mlm, train

log = logging.getLogger("vocadistill")

SEED_ENV = "VOCADISTILL_SEED"


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 2."""


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int | None
    inputs: dict[str, str]
    outputs: list[str]
    tool_version: str = __version__
    started: float = field(default_factory=time.time)
    finished: float | None = None

    def write(self, path: str | Path) -> Path:
        self.finished = time.time()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _manifest_path(out: Path) -> Path:
    return out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None


def _corpus(path: str) -> list[str]:
    if not Path(path).is_file():
        raise UsageError(f"no such corpus file: {path}")
    texts = read_corpus(path)
    if not texts:
        raise UsageError(f"corpus {path} has no non-empty lines")
    return texts


def _vocab(path: str) -> Vocabulary:
    if not Path(path).is_file():
        raise UsageError(f"no such vocabulary file: {path}")
    return Vocabulary.load(path)


def _train_config(path: str) -> TrainConfig:
    raw = _read_json(path)
    if SEED_ENV in os.environ:
        try:
            raw["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer") from None
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config {path}: {exc}") from None


def _model_config(choice: str) -> tuple[str, ModelConfig]:
    if choice in PRESETS:
        return choice, PRESETS[choice]
    raw = _read_json(choice)
    raw = raw.get("model_config", raw)
    try:
        return Path(choice).stem, ModelConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config {choice}: {exc}") from None


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- commands --------------------------------------------------------------------------

def cmd_vocab_build(args) -> int:
    texts = _corpus(args.corpus)
    try:
        vocab = build_vocab(texts, args.size, args.prefix, args.lowercase)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    settings = {"size": args.size, "prefix": args.prefix, "lowercase": args.lowercase}
    RunManifest("vocab build", config_digest(settings), None, {args.corpus: file_digest(args.corpus)},
                [str(out)]).write(_manifest_path(out))
    print(f"wrote {len(vocab)} tokens to {out} (sha256 {file_digest(out)[:16]})")
    return 0


def cmd_tokenize(args) -> int:
    vocab = _vocab(args.vocab)
    rows = []
    for line in _corpus(args.text):
        seq = tokenize(vocab, line)
        rows.append({"text": line, "tokens": seq.tokens(vocab), "ids": list(seq.ids),
                     "spans": [list(s) for s in seq.spans]})
    if args.json:
        _emit(rows)
    else:
        for row in rows:
            print(" ".join(row["tokens"]))
    return 0


def cmd_align_inspect(args) -> int:
    tv, sv = _vocab(args.teacher_vocab), _vocab(args.student_vocab)
    try:
        pairs, coverage = vocab_intersection(tv, sv)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sentences, n_teacher, n_matched, n_groups, n_pieces, n_unk = [], 0, 0, 0, 0, 0
    for line in _corpus(args.text):
        t_seq, s_seq = tokenize(tv, line), tokenize(sv, line)
        t_tokens = t_seq.tokens(tv)
        if args.strategy == "match":
            al = match_align(t_seq, s_seq, pairs)
            s_tokens = s_seq.tokens(sv)
            n_matched += al.n_match
        else:
            al = reduce_split(t_seq, tv, sv)
            s_tokens = [sv.tokens[i] for i in al.student_ids]
            n_groups += len(al.groups)
            n_pieces += len(al.student_ids)
            n_unk += len(al.unk_groups)
        n_teacher += len(t_seq)
        sentences.append((line, format_alignment(t_tokens, s_tokens, al)))
    stats = {"strategy": args.strategy, "sentences": len(sentences),
             "vocab_coverage": coverage, "shared_subwords": len(pairs),
             "teacher_positions": n_teacher}
    if args.strategy == "match":
        stats["match_fraction"] = n_matched / n_teacher if n_teacher else 0.0
    else:
        stats["mean_group_size"] = n_pieces / n_groups if n_groups else 0.0
        stats["unk_groups"] = n_unk
    if args.json:
        _emit(stats)
        return 0
    for text, table in sentences:
        print(f"# {text}")
        print(table)
        print()
    for k, v in stats.items():
        print(f"{k}\t{v}")
    return 0


def _run_training(args, texts: list[str], config: TrainConfig, teacher: Teacher | None,
                  command: str, inputs: dict[str, str]) -> int:
    if config.vocab_path:
        vocab = _vocab(config.vocab_path)
        inputs[config.vocab_path] = file_digest(config.vocab_path)
    elif config.vocab_size:
        try:
            vocab = build_vocab(texts, config.vocab_size)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    elif teacher is not None:
        vocab = teacher.vocab
    else:
        raise UsageError("config needs vocab_path or vocab_size")
    try:
        config.model_config(len(vocab))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model section: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(texts, config, vocab, teacher, out_dir=out)
    extra = result.projection.named_arrays() if result.projection is not None else None
    save_model(out / "final", result.params, result.model_config, vocab, extra,
               {"train_config": config.to_dict(), "val_mlm": result.final_val_mlm,
                "val_acc": result.final_val_acc})
    outputs = [str(out / "final"), str(out / "metrics.csv")]
    if (out / "checkpoint").exists():
        outputs.append(str(out / "checkpoint"))
    RunManifest(command, config_digest(config.to_dict()), config.seed, inputs,
                outputs).write(out / "run_manifest.json")
    print(f"steps {len(result.metrics)}  val_mlm {result.final_val_mlm:.4f}  "
          f"val_acc {result.final_val_acc:.4f}  (best val_mlm {result.best_val_mlm:.4f})")
    if result.n_truncated:
        print(f"{result.n_truncated} training texts were truncated")
    return 0


def cmd_pretrain_teacher(args) -> int:
    config = _train_config(args.config)
    if config.distill_terms:
        raise UsageError("teacher pre-training uses the mlm loss only")
    texts = _corpus(args.corpus)
    inputs = {args.corpus: file_digest(args.corpus), args.config: file_digest(args.config)}
    return _run_training(args, texts, config, None, "pretrain-teacher", inputs)


def cmd_distill_run(args) -> int:
    config = _train_config(args.config)
    texts = _corpus(args.corpus)
    if not (Path(args.teacher) / "manifest.json").is_file():
        raise UsageError(f"{args.teacher} is not a checkpoint directory")
    params, t_config, t_vocab, _ = load_model(args.teacher)
    inputs = {args.corpus: file_digest(args.corpus), args.config: file_digest(args.config),
              args.teacher: file_digest(Path(args.teacher) / "arrays.bin")}
    return _run_training(args, texts, config, Teacher(params, t_config, t_vocab), "distill run",
                         inputs)


def cmd_eval_mlm(args) -> int:
    if not (Path(args.model) / "manifest.json").is_file():
        raise UsageError(f"{args.model} is not a checkpoint directory")
    params, config, vocab, _ = load_model(args.model)
    texts = _corpus(args.corpus)
    loss, acc, n = evaluate_mlm(params, config, vocab, texts, args.mask_prob,
                                max_length=min(args.max_length, config.max_positions),
                                seed=args.seed)
    result = {"mlm_loss": loss, "accuracy": acc, "masked_tokens": n}
    if args.json:
        _emit(result)
    else:
        print(f"accuracy {acc:.4f}  mlm_loss {loss:.4f}  masked_tokens {n}")
    return 0


def cmd_report_params(args) -> int:
    rows = []
    for choice in args.config:
        name, config = _model_config(choice)
        total, frac = count_params(config)
        rows.append({"name": name, "params": total, "params_m": round(total / 1e6, 2),
                     "embedding_fraction": frac})
    if args.json:
        _emit(rows)
    else:
        for r in rows:
            print(f"{r['name']}\t{r['params_m']:.1f}M\t{r['params']}\t"
                  f"embedding {r['embedding_fraction']:.3f}")
    return 0


def cmd_report_embedding_ratio(args) -> int:
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["name", "n_layers", "hidden", "vocab_size", "params", "embedding_fraction"])
    for choice in args.configs:
        name, config = _model_config(choice)
        sizes = args.vocab_sizes or [config.vocab_size]
        for v in sizes:
            c = config.replace(vocab_size=v)
            total, frac = count_params(c)
            writer.writerow([name, c.n_layers, c.hidden, v, total, f"{frac:.6f}"])
    return 0


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vocadistill",
                                description="Distil masked-LM students with reduced vocabularies.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    vocab = sub.add_parser("vocab").add_subparsers(dest="action", required=True)
    vb = vocab.add_parser("build", help="learn a subword vocabulary")
    vb.add_argument("--corpus", required=True)
    vb.add_argument("--size", type=int, required=True)
    vb.add_argument("--out", required=True)
    vb.add_argument("--prefix", default="##", help="continuation prefix")
    vb.add_argument("--lowercase", action="store_true")
    vb.set_defaults(func=cmd_vocab_build)

    tk = sub.add_parser("tokenize", help="tokenize every line of a text file")
    tk.add_argument("--vocab", required=True)
    tk.add_argument("--text", required=True)
    tk.add_argument("--json", action="store_true")
    tk.set_defaults(func=cmd_tokenize)

    align = sub.add_parser("align").add_subparsers(dest="action", required=True)
    ai = align.add_parser("inspect", help="show teacher/student alignments")
    ai.add_argument("--teacher-vocab", required=True)
    ai.add_argument("--student-vocab", required=True)
    ai.add_argument("--text", required=True)
    ai.add_argument("--strategy", choices=("match", "reduce"), default="match")
    ai.add_argument("--json", action="store_true", help="print summary statistics as JSON")
    ai.set_defaults(func=cmd_align_inspect)

    pt = sub.add_parser("pretrain-teacher", help="train a toy teacher with the mlm loss")
    pt.add_argument("--corpus", required=True)
    pt.add_argument("--config", required=True)
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=cmd_pretrain_teacher)

    distill = sub.add_parser("distill").add_subparsers(dest="action", required=True)
    dr = distill.add_parser("run", help="distil a student from a teacher checkpoint")
    dr.add_argument("--teacher", required=True)
    dr.add_argument("--config", required=True)
    dr.add_argument("--corpus", required=True)
    dr.add_argument("--out", required=True)
    dr.set_defaults(func=cmd_distill_run)

    ev = sub.add_parser("eval").add_subparsers(dest="action", required=True)
    em = ev.add_parser("mlm", help="masked-token accuracy and loss of a checkpoint")
    em.add_argument("--model", required=True)
    em.add_argument("--corpus", required=True)
    em.add_argument("--mask-prob", type=float, default=0.15)
    em.add_argument("--max-length", type=int, default=128)
    em.add_argument("--seed", type=int, default=0)
    em.add_argument("--json", action="store_true")
    em.set_defaults(func=cmd_eval_mlm)

    report = sub.add_parser("report").add_subparsers(dest="action", required=True)
    rp = report.add_parser("params", help="parameter totals per model config")
    rp.add_argument("--config", nargs="+", required=True,
                    help="model config JSON files or preset names")
    rp.add_argument("--json", action="store_true")
    rp.set_defaults(func=cmd_report_params)
    rr = report.add_parser("embedding-ratio", help="CSV of embedding fraction per vocabulary size")
    rr.add_argument("--configs", nargs="+", required=True)
    rr.add_argument("--vocab-sizes", nargs="+", type=int)
    rr.set_defaults(func=cmd_report_embedding_ratio)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
