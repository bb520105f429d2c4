"""
Manual backprop against finite differences
==========================================

Models are flat float64 vectors. The gradient of the softmax
cross-entropy is computed by hand, layer by layer.
"""

import numpy as np

from fedsr.model import evaluate, local_train, loss_and_gradient, mlp

rng = np.random.default_rng(0)
model = mlp(4, [8, 8], 3)
w = model.init_params(rng)
x, y = rng.normal(size=(16, 4)), rng.integers(0, 3, size=16)
print("parameters:", model.parameter_count())

# %%
# Compare a few coordinates with a central difference.
loss, g = loss_and_gradient(model, w, x, y)
for i in rng.choice(w.size, 5, replace=False):
    e = np.zeros_like(w)
    e[i] = 1e-5
    fd = (loss_and_gradient(model, w + e, x, y)[0] - loss_and_gradient(model, w - e, x, y)[0]) / 2e-5
    print(f"coord {i:3d}: analytic {g[i]: .8f}  finite-diff {fd: .8f}")

# %%
# A few epochs of minibatch SGD with heavy-ball momentum.
w2 = local_train(model, w, x, y, epochs=50, lr=0.05, batch_size=4, rng=rng, momentum=0.5)
print("loss before %.4f, after %.4f" % (loss, evaluate(model, w2, x, y)[1]))
