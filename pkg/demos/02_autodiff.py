"""The tensor engine: gradients, finite-difference checks, and the double
backward that the gradient penalty needs.

Run: python demos/02_autodiff.py
"""
import numpy as np

from dispfuse import tensor as T
from dispfuse.energy import wgan_losses
from dispfuse.tensor import Tensor, grad, grad_check

T.set_precision("f64")
rng = np.random.default_rng(0)

x = Tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)
y = T.conv2d(x, w, 1, 1).relu().mean()
y.backward()
print("d mean(relu(conv)) / dw:", w.grad.shape)

# analytic vs central differences
err = grad_check(lambda t: T.conv2d(t, w, 2, 1).sigmoid().sum(), x.data)
print(f"conv + sigmoid relative error: {err:.2e}")

# gradient of a gradient: ||d f / d x||^2 differentiated w.r.t. the weights
def penalty(wt):
    xi = Tensor(x.data, requires_grad=True)
    out = T.conv2d(xi, wt, 1, 1).sigmoid().sum()
    (gx,) = grad(out, [xi], create_graph=True)
    return (gx * gx).sum()

print(f"double backward relative error: {grad_check(penalty, w.data):.2e}")

# WGAN-GP on a toy critic: constant critic has penalty exactly lambda
real = rng.uniform(-1, 1, size=(2, 3, 8, 8))
fake = real.copy()
fake[:, -1] = rng.uniform(-1, 1, size=(2, 8, 8))
(terms,) = wgan_losses(lambda p: [p[:, :1] * 0.0 + 0.3], real, fake, 10.0, eps=[0.25, 0.75])
print("constant critic: critic loss", terms.critic_loss.item(), "gp", terms.gp.item())
