"""
Affine and NF4 quantization
===========================

Weights are split into groups (whole tensor, each row, or blocks of 64
values). Each group gets its own scale, and the codes are packed into bytes.
"""

import numpy as np

from peftlab.pqt import footprint_bytes, load, reduction, serialize
from peftlab.quant import QuantScheme, build_nf4_codebook, dequantize, per_block, per_row, per_tensor, quantize

print("NF4 levels:", build_nf4_codebook().round(4))

rng = np.random.default_rng(0)
W = rng.standard_t(df=4, size=(64, 128))  # heavy tails, like trained weights

# %%
# Finer groups give smaller scales, so the worst-case error shrinks.
for name in ("asym8", "int8", "int4", "nf4"):
    scheme = QuantScheme.parse(name)
    row = []
    for gran in (per_tensor(), per_row(), per_block(64)):
        err = np.abs(W - dequantize(quantize(W, scheme, gran)).data).max()
        row.append(f"{gran.kind:>6s} {err:.4f}")
    print(f"{name:6s}", " | ".join(row))

# %%
# Zeros survive exactly: every scheme has a code that maps to 0.0.
Z = W.copy()
Z[:, ::7] = 0.0
print("zeros kept:", np.all(dequantize(quantize(Z, QuantScheme.parse("nf4"))).data[:, ::7] == 0.0))

# %%
# PQT1 blobs are self-describing. The footprint is computed from the header
# fields and always equals the blob length.
for dq in (False, True):
    q = quantize(W, QuantScheme.parse("nf4"), per_block(64), double_quant=dq)
    blob = serialize(q)
    fp = footprint_bytes(q)
    assert fp.total == len(blob)
    same = np.array_equal(dequantize(load(blob)).data, dequantize(q).data)
    print(f"double quant {dq!s:5s}: {len(blob)} bytes, {100 * reduction(len(blob), W.size):.1f}% below 16-bit, lossless reload {same}")
