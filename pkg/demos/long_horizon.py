"""Long horizons by backward block recursion.

The small-time Picard scheme is only expected to contract on short intervals.
Over T = 3 the solver works on blocks of length 1, using each solved block's
field at its left end as the terminal condition of the previous block.

Run with ``python3 demos/long_horizon.py``.
"""

import numpy as np

from mkvmaster.errors import BlowUpError
from mkvmaster.fbsde import InitialLawSpec, SolverParams, solve_long_horizon
from mkvmaster.lq_oracle import LqSpec, oracle_field, solve_riccati
from mkvmaster.scenario import build_scenario

init = InitialLawSpec(kind="normal", mean=1.0, std=0.5)
c = build_scenario("lq_mfg", {"rho": -0.5, "T": 3.0})
params = SolverParams(n_particles=2048, n_steps=96, basis_degree=1, mean_regressor=True, block_length=1.0, seed=4)
ens, fld = solve_long_horizon(c, init, 0.0, 3.0, params)
sol = solve_riccati(LqSpec(rho=-0.5, T=3.0), "mfg", fld.grid)

print("steps per block:", fld.diagnostics["block_steps"])
print("block-start law gaps per sweep:", " ".join(f"{g:.1e}" for g in fld.diagnostics["picard_gaps"]))
print("failed block lengths before this one:", fld.diagnostics["block_history"])
print()
print("   t    eta_t   chi_t   max field error")
for k in range(0, fld.grid.K + 1, 16):
    x, mu = ens.X[:, k], ens.measure(k)
    err = np.max(np.abs(fld.value_at(k, x, mu) - oracle_field(sol, fld.grid.time(k), x, mu)))
    print(f"{fld.grid.time(k):5.2f}  {sol.eta[k, 0, 0]:.4f}  {sol.chi[k, 0, 0]:.4f}  {err:.2e}")

# A strongly anti-monotone coupling over a very long horizon cannot be
# resolved once blocks would have to shrink below delta_min.
hard = build_scenario("lq_mfg", {"rho": 0.9, "Q": 10.0, "Q_G": 10.0, "T": 50.0})
try:
    solve_long_horizon(hard, init, 0.0, 50.0, SolverParams(n_particles=256, n_steps=64, basis_degree=1,
                                                           picard_max=5, delta_min=40.0))
except BlowUpError as exc:
    print()
    print("expected failure:", exc)
