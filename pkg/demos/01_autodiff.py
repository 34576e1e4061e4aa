"""
Reverse-mode gradients and finite-difference checks
===================================================

"""

import numpy as np

from smaformer import functional as F
from smaformer.gradcheck import grad_check
from smaformer.tensor import Tensor, backward

# leaves that require grad collect .grad after backward()
x = Tensor(np.array([[0.5, -1.0, 2.0]]), requires_grad=True)
w = Tensor(np.eye(3) * 2.0, requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)

y = F.gelu(F.linear(x, w, b)).sum()
backward(y)
print("loss", y.item())
print("dloss/dx", x.grad)

# central differences agree with the tape to ~1e-9 in float64
err = grad_check(lambda t: F.gelu(F.linear(t, w, b)).sum(), Tensor(x.data.copy()))
print("max relative error", err)

# same check through a 3x3 convolution
img = Tensor(np.random.default_rng(0).standard_normal((1, 2, 5, 5)))
k = Tensor(np.random.default_rng(1).standard_normal((4, 2, 3, 3)))
print("conv2d error", grad_check(lambda t: F.conv2d(t, k, padding=1).sum(), img))
