"""Lions derivatives of measure functionals and the chain rule along a flow.

Run with ``python3 demos/lions_derivatives.py``.
"""

import numpy as np

from mkvmaster.grid import TimeGrid
from mkvmaster.lions import MomentFunctional, chain_rule_residual, lions_derivative, lions_second_diag, simulate_flow
from mkvmaster.measure import EmpiricalMeasure

rng = np.random.default_rng(0)
mu = EmpiricalMeasure(rng.normal(1.0, 0.7, size=(256, 1)))
x = mu.atoms[:, 0]

# -- first order --------------------------------------------------------------
# Moving one atom of a 256-atom measure and scaling the change by N recovers
# the derivative of the functional at that atom.
norm = MomentFunctional(lambda v: v[:, 0] ** 2, lambda s: np.sqrt(s[..., 0]), "L2 norm")
sq_mean = MomentFunctional(lambda v: v[:, 0], lambda s: s[..., 0] ** 2, "squared mean")

est = lions_derivative(norm, mu).values[:, 0]
exact = x / np.sqrt(np.mean(x**2))
print("L2 norm:       max |estimate - v/|xi||   =", np.abs(est - exact).max())

est = lions_derivative(sq_mean, mu).values[:, 0]
print("squared mean:  max |estimate - 2 m|      =", np.abs(est - 2 * x.mean()).max())

# -- second order -------------------------------------------------------------
# The diagonal second difference also picks up the second measure derivative,
# scaled by 1/N. For the squared mean the true dv dmu is zero, so what is left
# is exactly that bias.
for n in (16, 256, 4096):
    m = EmpiricalMeasure(rng.normal(size=(n, 1)))
    bias = lions_second_diag(sq_mean, m, 1e-3).values.mean()
    print(f"squared mean, N={n:5d}: second-order estimate {bias:.3e}  (2/N = {2 / n:.3e})")

# -- chain rule ---------------------------------------------------------------
# For t -> int |v|^2 d mu_t along a Brownian flow started at 0 the expansion
# predicts slope 1; the discrepancy is Monte Carlo noise of order N^{-1/2}.
second_moment = MomentFunctional(lambda v: (v**2).sum(axis=1), lambda s: s[..., 0], "second moment")
eye = np.eye(1)
print()
print("    N    K   chain-rule residual")
for n, K in [(1024, 16), (4096, 32), (16384, 64)]:
    flow = simulate_flow(
        np.zeros((n, 1)),
        lambda t, X: np.zeros_like(X),
        lambda t, X: np.broadcast_to(eye, X.shape + (1,)),
        TimeGrid(0.0, 1.0, K),
        seed=3,
        moment_matching=True,
    )
    print(f"{n:5d} {K:4d}   {chain_rule_residual(second_moment, flow):.4f}")
