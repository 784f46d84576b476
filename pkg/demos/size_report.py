"""How much of each preset is token embeddings, and how that moves with vocabulary size.

    python demos/size_report.py
"""
from dataclasses import replace

from vocadistill.model import PRESETS, count_params

print(f"{'preset':<15}{'params (M)':>12}{'embedding share':>18}")
for name, config in PRESETS.items():
    total, frac = count_params(config)
    print(f"{name:<15}{total / 1e6:>12.1f}{frac:>18.1%}")

print("\n3-layer, 264-wide model with a shrinking vocabulary:")
base = PRESETS["distil-tiny30"]
for vocab_size in (119_547, 60_000, 30_500, 10_000, 5_000, 2_000):
    total, frac = count_params(replace(base, vocab_size=vocab_size))
    print(f"  |V|={vocab_size:>7,}  {total / 1e6:6.1f}M params, {frac:.0%} embeddings")
