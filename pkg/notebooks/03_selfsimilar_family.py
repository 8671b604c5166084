# %% [markdown]
# # Stationary profiles for LSW
#
# Above kappa0 = 2 the stationary solutions end in a power of (1 - x); at
# kappa0 they end in exp(-2 / (gamma (1 - x))).

# %%
from coarsenkit import charsolve, coeffs, selfsimilar

pair = coeffs.lsw()
print(f"{'kappa':>6} {'tail':>24} {'fitted':>9} {'beta(1-)':>9} {'mass':>14}")
for kappa in (2.0, 2.5, 3.0, 5.0):
    sol = selfsimilar.build_selfsimilar(pair, kappa)
    fitted = selfsimilar.tail_exponent_check(sol)
    print(f"{kappa:6.2f} {str(sol.tail):>24} {fitted:9.5f} {sol.beta_limit:9.5f} {sol.mass():14.12f}")

# %% [markdown]
# Fed back into the solver, a stationary profile should stay put.

# %%
sol = selfsimilar.build_selfsimilar(pair, 3.0)
res = charsolve.run(sol.as_profile(), pair, 2.0, charsolve.SolverOptions(n=2000, s_floor=1e-30, cadence=0.5))
for d in res.series:
    print(f"t = {d.t:3.1f}  kappa = {d.kappa:.7f}  beta(0.5) = {d.beta[2]:.6f}  (stationary {sol.beta_at(0.5):.6f})")
