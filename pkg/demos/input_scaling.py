"""How the input map decides how much of the demand lands on the slack.

The relaxed QP returns u = lam * a and eps = lam with lam = r / (|a|^2 + 1),
so only a fraction |a|^2 / (|a|^2 + 1) of the requested decrease is produced
by the input. Wheel speeds of a small robot map to tiny body velocities
(R = 0.02), which makes |a|^2 small and lets eps carry almost everything.
"""

import numpy as np

from tfcbf.sim import OmniRobotParams

grad_x = np.array([0.6, -0.8, 0.0])  # unit-norm position gradient

for R in (0.02, 0.1, 0.5, 1.0):
    g = OmniRobotParams(R=R).input_matrix(0.3)
    a = grad_x @ g
    G = float(a @ a)
    print(f"R = {R:4g}: |a|^2 = {G:.3e}, input share {G / (G + 1):7.2%}, slack share {1 / (G + 1):7.2%}")

a = grad_x  # body-velocity inputs, unit gain
G = float(a @ a)
print(f"unit-gain integrator: |a|^2 = {G:.3g}, input share {G / (G + 1):.0%}")
