# # A numpy network, checked by finite differences
#
# The engine stores images as NCHW float32 arrays in raw 0-255 pixel units.
# Each model normalises its input itself, so gradients with respect to the
# input come out in pixel units too, which is what the attacks need.

import numpy as np

from kdtransfer import zoo
from kdtransfer.nn import cross_entropy

model = zoo.build("student-plain", seed=0, width=0.25, mean=[128] * 3, std=[64] * 3)
print(model.name, "with", model.num_params, "parameters")
print(model.descriptor)

# A forward pass on two random images gives one logit row per image.

rng = np.random.default_rng(0)
x = rng.uniform(0, 255, (2, 3, 32, 32)).astype(np.float32)
y = np.array([3, 7])
logits = model.forward(x)
print("logits shape", logits.shape, "loss", cross_entropy(logits, y)[0])

# ## Input gradient versus a central difference
#
# The float64 copy makes a step of 0.01 pixel well resolved.

grad = model.input_gradient(x, y)
ref = model.astype(np.float64)


def loss64(images):
    return cross_entropy(ref.forward(images), y, reduction="sum")[0]


for idx in [(0, 0, 5, 5), (1, 2, 20, 11), (0, 1, 31, 0)]:
    plus, minus = x.astype(np.float64), x.astype(np.float64)
    plus[idx] += 1e-2
    minus[idx] -= 1e-2
    fd = (loss64(plus) - loss64(minus)) / 2e-2
    print(idx, "analytic %.6e  numeric %.6e" % (grad[idx], fd))
