"""Pre-train a toy teacher, then distill it into a student with half the vocabulary.

Runs in a few minutes on one core. The student is trained twice from the
same seed, once on masked-LM alone and once with an added KL term on the
positions and subwords both tokenizers share, and both are evaluated on the
same held-out texts.

    python demos/tiny_distillation.py [steps]
"""
import sys

import numpy as np

from vocadistill.data import synthetic_corpus
from vocadistill.tokenizer import build_vocab
from vocadistill.trainer import Teacher, TrainConfig, evaluate_mlm, split_corpus, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
common = dict(epochs=100, warmup_steps=50, peak_lr=2e-3, accum_steps=1, batch_size=32)

texts = synthetic_corpus(100_000, seed=0)
teacher_vocab, student_vocab = build_vocab(texts, 400), build_vocab(texts, 200)

print(f"teacher: 4 layers, width 64, {len(teacher_vocab)} subwords, {2 * steps} steps")
cfg = TrainConfig(losses=("mlm",), max_steps=2 * steps, val_every=steps // 2,
                  model={"n_layers": 4, "hidden": 64, "n_heads": 4}, **common)
result = train(texts, cfg, teacher_vocab)
teacher = Teacher(result.params, result.model_config, result.vocab)
print(f"  validation accuracy {result.final_val_acc:.3f}")

_, val = split_corpus(texts, 0.05)
for losses in [("mlm",), ("mlm", "kl")]:
    cfg = TrainConfig(losses=losses, strategy="match", max_steps=steps, val_every=steps // 4,
                      model={"n_layers": 2, "hidden": 32, "n_heads": 4}, **common)
    r = train(texts, cfg, student_vocab, teacher)
    accs = [evaluate_mlm(r.params, r.model_config, student_vocab, val, seed=s)[1]
            for s in range(5)]
    print(f"student {'+'.join(losses):<7} validation accuracy {np.mean(accs):.3f}")
