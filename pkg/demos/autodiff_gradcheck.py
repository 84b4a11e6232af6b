"""
Reverse-mode gradients checked against finite differences
==========================================================

"""

import numpy as np

from gemgaze import tensorcore as tc
from gemgaze.tensorcore import ParamStore, grad_check

# A parameter store holds named fp64 tensors that track gradients.
ps = ParamStore()
rng = np.random.default_rng(0)
ps.add("w", rng.normal(size=(3, 2, 3, 3)))
ps.add("b", rng.normal(size=3))

x = rng.normal(size=(1, 2, 8, 8))


def loss(store):
    # (1, 0) padding keeps a stride-2 3x3 window integral on even extents
    y = tc.conv2d(tc.Tensor(x), store["w"], store["b"], stride=2, pad=(1, 0))
    return tc.sum_(tc.square(tc.relu(y)))


# backward() fills .grad on every parameter
ps.zero_grad()
value = loss(ps)
value.backward()
print("loss", value.item())
print("grad shape", ps["w"].grad.shape)

# central differences, max relative error over all entries
print("max relative error", grad_check(loss, ps, h=1e-5))

# no_grad skips graph construction entirely
with tc.no_grad():
    y = loss(ps)
print("requires_grad inside no_grad:", y.requires_grad)
