# Reverse-mode autodiff on plain numpy arrays, checked against finite differences.
import numpy as np

from pstr import gradcheck
from pstr import numerics as nx
from pstr.numerics import Tensor

nx.set_default_dtype(np.float64)
rng = np.random.default_rng(0)

# a tiny expression: sum(softmax(x @ w))^2
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
y = nx.softmax(nx.matmul(x, w), axis=-1)
loss = nx.tsum(y * y)
nx.backward(loss)
print("loss", float(loss.data))
print("dL/dx\n", np.round(x.grad, 4))


def f(xv):
    return float(np.sum(nx.softmax(nx.matmul(Tensor(xv), w), axis=-1).data ** 2))


numeric = nx.finite_diff_gradient(f, x.data, h=1e-5)
print("max relative error vs central differences:", nx.relative_error(x.grad, numeric, floor=1e-5))

# bilinear sampling is differentiable in the sampling points too
fmap = Tensor(rng.normal(size=(1, 6, 6, 2)))
pts = Tensor(np.array([[[1.3, 2.7], [4.5, 0.2]]]), requires_grad=True)
out = nx.bilinear_sample(fmap, pts)
nx.backward(nx.tsum(out))
print("samples\n", np.round(out.data[0], 4))
print("d/dpoints\n", np.round(pts.grad[0], 4))

# the packaged gradient audit, a few operations at 3 instances each
results = gradcheck.run_gradcheck(instances=3, only=["softmax", "bilinear_sample", "part_attention_layer", "giou"])
print(gradcheck.format_report(results))
