"""Reverse-mode differentiation on a tiny logistic model, checked numerically.

    python demos/01_autodiff.py
"""
import numpy as np

from cellgraph import autodiff as ad

rng = np.random.default_rng(0)
x = ad.Tensor(rng.normal(size=(8, 3)))
w = ad.Tensor(rng.normal(size=(3, 2)), requires_grad=True, name="w")
target = rng.integers(0, 2, size=8)


def loss_fn(*_):
    return ad.softmax_cross_entropy(ad.matmul(x, w), target)


loss = loss_fn()
(grad,) = ad.backward(loss, [w])
print(f"loss {float(loss.data):.6f}")
print("dL/dw from the tape:\n", np.round(grad, 6))

# the same gradient by central differences, coordinate by coordinate
report = ad.gradcheck(loss_fn, [w], tol=1e-5)
print(f"gradcheck: max relative error {report.max_rel_error:.2e} over {report.n_checked} "
      f"coordinates -> {'ok' if report.passed else 'MISMATCH'}")

# one Adam step lowers the loss
opt = ad.Adam([w], lr=0.1)
opt.zero_grad()
ad.backward(loss_fn())
opt.step()
print(f"after one Adam step: loss {float(loss_fn().data):.6f}")
