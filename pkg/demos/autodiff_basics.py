import numpy as np

from leukonet import functional as F
from leukonet.tensor import Tape, Tensor

# # Reverse-mode gradients on a tape
#
# Every op run inside a `Tape` context is recorded. Calling `backward` walks
# the record in reverse and fills `.grad` on the leaves.

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.1, requires_grad=True)

with Tape() as tape:
    y = F.relu(F.conv2d(x, w, padding=1))
    loss = F.mean(y)
tape.backward(loss)

print("loss:", loss.item())
print("weight grad shape:", w.grad.shape)

# ## Checking against finite differences
#
# Nudge one weight and compare the slope with the recorded gradient.

h = 1e-6
idx = (1, 2, 0, 1)
w_plus, w_minus = w.data.copy(), w.data.copy()
w_plus[idx] += h
w_minus[idx] -= h


def value(weight):
    return F.mean(F.relu(F.conv2d(Tensor(x.data), Tensor(weight), padding=1))).item()


numeric = (value(w_plus) - value(w_minus)) / (2 * h)
print("analytic:", w.grad[idx], " numeric:", numeric)

# ## Grouped convolution
#
# With `groups=2` each half of the output only sees half of the input.

xg = Tensor(rng.standard_normal((1, 4, 5, 5)))
wg = Tensor(rng.standard_normal((6, 2, 3, 3)))
both = F.conv2d(xg, wg, padding=1, groups=2).data
first = F.conv2d(Tensor(xg.data[:, :2]), Tensor(wg.data[:3]), padding=1).data
print("first group matches:", np.allclose(both[:, :3], first))
