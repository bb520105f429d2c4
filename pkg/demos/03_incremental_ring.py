"""
The incremental gradient method on a ring
=========================================

Four devices hold f_i(x) = (x - i)^2. Passing the iterate around the
ring and taking one step per device minimizes the sum, whose minimizer
is 2.5. A constant step stalls at a biased point; a vanishing step does not.
"""

from fedsr.algorithms import constant, harmonic, incremental_gradient

grads = [lambda x, i=i: 2.0 * (x - i) for i in range(1, 5)]

for passes in (10, 100, 2000):
    print(f"{passes:5d} passes  constant 0.01: {incremental_gradient(grads, 0.0, constant(0.01), passes):.5f}"
          f"   harmonic 0.1/(t+1): {incremental_gradient(grads, 0.0, harmonic(0.1), passes):.5f}")
