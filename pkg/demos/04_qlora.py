"""
QLoRA: a 4-bit base with 32-bit adapters
========================================

The base weight lives only as NF4 codes plus scales. Each forward pass
dequantizes it for one matmul and lets it go, and backward does the same
again. Only the adapter receives gradients.
"""

import numpy as np

from peftlab.adapters import LoraAdapter
from peftlab.pqt import serialize
from peftlab.qlora import QloraLinear, qlora_forward, track_materialization
from peftlab.quant import QuantScheme, dequantize
from peftlab.tensor import SgdConfig, Tensor, backward, sgd_step, sub, sum_squares

rng = np.random.default_rng(0)
W = rng.normal(size=(64, 32))
layer = QloraLinear.from_weight(W, QuantScheme.parse("nf4"))
layer.attach(LoraAdapter(64, 32, 4, rng, dtype=np.float32))
frozen = serialize(layer.weight_q)
print(f"base stored in {len(frozen)} bytes instead of {2 * W.size} at 16-bit")

x = Tensor(rng.normal(size=(16, 64)).astype(np.float32))
# the new task moves the stored weight by a rank-2 update
U = rng.normal(size=(64, 2)) @ rng.normal(size=(2, 32)) * 0.2
y = Tensor((x.data @ (dequantize(layer.weight_q).data + U)).astype(np.float32))
cfg = SgdConfig(3e-4)
with track_materialization() as tracker:
    for step in range(200):
        loss = sum_squares(sub(qlora_forward(x, layer), y))
        backward(loss)
        sgd_step(layer.parameters(), cfg)
        if step % 50 == 0:
            print(f"step {step:3d} loss {loss.item():.4g}")
print("dequantizations:", tracker.calls, "most alive at once:", tracker.peak)
print("base bytes unchanged:", serialize(layer.weight_q) == frozen)
