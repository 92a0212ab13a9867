"""
Four ways to fine-tune one toy transformer
==========================================

A small encoder-decoder is first trained to reverse sequences and then
adapted to copy them. The same seed gives the same pretrained base in every
mode, so the runs differ only in what is trained.
"""

from peftlab.harness import ExperimentConfig, compare_modes, mode_sweep

base = ExperimentConfig(task="copy", steps=500, pretrain_steps=500, eval_count=100, seed=0)
table = compare_modes(mode_sweep(base, rank=8))

print(f"{'mode':8s} {'scheme':6s} {'trainable':>9s} {'base bytes':>10s} {'loss':>13s} {'acc':>5s}")
for row in table.rows:
    print(
        f"{row['mode']:8s} {row['scheme'] or '-':6s} {row['trainable']:9d} {row['base_bytes']:10d} "
        f"{row['initial_loss']:5.2f} -> {row['final_loss']:5.3f} {row['accuracy']:5.2f}"
    )

# %%
# The per-step losses are kept too, ready for plotting elsewhere.
for key, curve in table.curves.items():
    print(key, [round(v, 2) for v in curve[::100]])
