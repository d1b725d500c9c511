"""
A tour of the autodiff tape
===========================

Every model in chirpscope is built from a handful of numpy primitives that
record themselves on a tape.  This script differentiates a few small
functions by hand and checks them against finite differences.
"""

import numpy as np

from chirpscope import numerics as nx

# a tape watches leaves; anything computed from them is recorded
tape = nx.Tape()
x = tape.watch(np.array([1.0, 2.0, 3.0]), "x")
y = nx.tsum(nx.mul(x, x))
grads = tape.backward(y)
print("f(x) = sum(x^2) at x = [1, 2, 3]:", y.item())
print("df/dx =", grads[x], "(expected 2x)")

# a two-layer network, checked coordinate by coordinate
rng = np.random.default_rng(0)
point = {"W1": rng.standard_normal((4, 5)), "W2": rng.standard_normal((5, 1))}
data = rng.standard_normal((8, 4))
target = rng.standard_normal((8, 1))


def loss(p):
    hidden = nx.relu(nx.matmul(data, p["W1"]))
    r = nx.sub(nx.matmul(hidden, p["W2"]), target)
    return nx.tmean(nx.mul(r, r))


report = nx.grad_check(loss, point)
print("\nTwo-layer ReLU net:")
print(report)

# central differences straddling a ReLU kink are meaningless; the checker
# notices the sign flip and shrinks the step for that coordinate
near_kink = {"x": np.array([3e-6, -0.5, 0.7])}
report = nx.grad_check(lambda p: nx.tsum(nx.relu(p["x"])), near_kink)
print("\nReLU evaluated 3e-6 from its kink:")
print(report)

print("\nRegistered primitives:", ", ".join(sorted(nx.PRIMITIVES)))
