"""
LoRA and AdaLoRA adapters
=========================

A LoRA adapter adds ``x A B`` to a frozen projection. ``A`` starts at zero,
so the adapted layer starts out identical to the base layer. AdaLoRA instead
learns ``P diag(lambda) Q`` and prunes the smallest singular values on a
budget schedule.
"""

import numpy as np

from peftlab.adapters import (
    AdaLoraAdapter,
    BudgetSchedule,
    LoraAdapter,
    adalora_forward,
    budget_at,
    lora_forward,
    orthogonality_penalty,
    parameter_ratio,
    prune_step,
)
from peftlab.tensor import SgdConfig, Tensor, add, backward, sgd_step, sub, sum_squares

print("768x768 projection at rank 8:", parameter_ratio(768, 768, 8), "times fewer trainable values")

rng = np.random.default_rng(0)
W = Tensor(rng.normal(size=(16, 16)))
x = Tensor(rng.normal(size=(32, 16)))
# the target differs from the base by a rank-2 update
U = rng.normal(size=(16, 2)) @ rng.normal(size=(2, 16)) * 0.3
y = Tensor(x.data @ (W.data + U))

lora = LoraAdapter(16, 16, 4, rng)
print("identity at init:", np.array_equal(lora_forward(x, W, lora).data, x.data @ W.data))
cfg = SgdConfig(0.002)
for step in range(400):
    backward(sum_squares(sub(lora_forward(x, W, lora), y)))
    sgd_step(lora.parameters(), cfg)
print("LoRA residual:", round(sum_squares(sub(lora_forward(x, W, lora), y)).item(), 4))

# %%
# AdaLoRA starts with rank 6 and is pruned down to 2 after a warmup.
sched = BudgetSchedule(initial=6, final=2, total=600, warmup=150)
ada = AdaLoraAdapter(16, 16, 6, rng, gamma=0.1, schedule=sched)
print("budget at t=0, 150, 375, 600:", [budget_at(sched, t) for t in (0, 150, 375, 600)])
cfg = SgdConfig(0.005, clip_norm=5.0)
for step in range(600):
    loss = add(sum_squares(sub(adalora_forward(x, W, ada), y)), orthogonality_penalty(ada))
    backward(loss)
    sgd_step(ada.parameters(), cfg)
    prune_step(ada)
print("surviving singular values:", ada.lam.data[0, ada.mask].round(3), "mask", ada.mask.astype(int))
print("AdaLoRA residual:", round(sum_squares(sub(adalora_forward(x, W, ada), y)).item(), 4))
print("rank of the learned update:", np.linalg.matrix_rank(ada.delta_weight(), tol=1e-8))
