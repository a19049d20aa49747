"""Build the Xception family, count parameters and spot-check gradients.

Run: python3 demos/model_and_gradients.py
"""

import numpy as np

from aedkit.model import ModelConfig, build, param_count

for repeats in (8, 0):
    net = build(ModelConfig(middle_repeats=repeats, n_classes=50))
    print(f"middle_repeats={repeats}: {param_count(net):,} parameters")

# A narrow float64 network, one parameter nudged by hand.
net = build(ModelConfig(middle_repeats=0, width_multiplier=0.125, n_classes=4), 0, dtype=np.float64)
x = np.random.default_rng(1).standard_normal((2, 1, 80, 32))
upstream = np.random.default_rng(2).standard_normal((2, 4))
state = {k: v.copy() for k, v in net.buffers.items()}


def loss():
    for k, v in state.items():
        net.buffers[k][...] = v
    return float(np.sum(net.forward(x, training=True) * upstream))


loss()
grads = net.backward(upstream)
name = "head.weight"
w = net.params[name]
h = 1e-5
w[1, 3] += h
plus = loss()
w[1, 3] -= 2 * h
minus = loss()
w[1, 3] += h
print(f"{name}[1, 3]: analytic {grads[name][1, 3]:.8f}, central difference {(plus - minus) / (2 * h):.8f}")
