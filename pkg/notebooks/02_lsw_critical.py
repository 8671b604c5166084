# %% [markdown]
# # LSW with exponentially flat initial data
#
# Data of the form exp(-1/(1 - x)) sit exactly at the critical boundary
# (beta -> 1). kappa should drift toward kappa0 = 2, slowly. A short run is
# shown here; the scenario file lsw_critical.json goes to t = 50.

# %%
import numpy as np

from coarsenkit import charsolve, coeffs, profiles

pair = coeffs.lsw()
w0 = profiles.build({"kind": "critical_exp"})
print(profiles.classify(w0), " mean size", round(profiles.mean_size(w0), 5))

# %%
res = charsolve.run(w0, pair, 10.0, charsolve.SolverOptions(n=2000, s_floor=1e-4, cadence=1.0))
print(f"{'t':>5} {'kappa':>9} {'avg':>9} {'F(0,t)':>9} {'mass-1':>10}")
for d in res.series:
    print(f"{d.t:5.1f} {d.kappa:9.5f} {d.kappa_avg:9.5f} {d.F0:9.5f} {d.mass_direct - 1:10.1e}")

# %% [markdown]
# The convergence criterion compares w0 after a shift of lambda(y) z in the
# y variable with exp(-z). Doubling y repeatedly should shrink the residual.

# %%
y0 = profiles.YVariable(pair).y_of_sigma(0.1)
ys = y0 * 2.0 ** np.arange(5)
for y, r in zip(ys, profiles.criterion_residuals(w0, pair, ys, [1.0])[:, 0]):
    print(f"y = {y:8.1f}   residual {r:.4f}")
