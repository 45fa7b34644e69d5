"""
Gradients by hand and by finite differences
===========================================

A tiny tour of the tensor engine: build a small expression, call
backward, and compare against central differences.
"""

import numpy as np

from vitsr import diffcore as dc
from vitsr.gradcheck import check_ops, numeric_grad

# a two-layer expression on a 2x3 input
rng = np.random.default_rng(0)
with dc.precision(np.float64):
    x = dc.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    w = dc.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    y = dc.gelu(dc.linear(x, w)).sum()
    y.backward()
    print("loss", y.item())
    print("d loss / d x\n", x.grad)

    # the same derivative for one entry, by perturbation
    def objective():
        with dc.no_grad():
            return dc.gelu(dc.linear(dc.Tensor(x.data), dc.Tensor(w.data))).sum().item()

    print("numeric d/dx[0,0]", numeric_grad(objective, x.data, (0, 0)))

# every op in the engine, 5 random draws each
for r in check_ops(instances=5):
    print(f"{r.name:22s} worst rel err {r.max_rel_error:.1e}")
