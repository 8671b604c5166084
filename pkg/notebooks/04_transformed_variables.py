# %% [markdown]
# # Straightened coordinates near x = 1
#
# f(x) blows up like 1/(1 - x); in z = f(x) u the characteristic velocity
# g(z, u) is increasing and concave in z for LSW, with slope Gamma.

# %%
import numpy as np

from coarsenkit import coeffs, transformed

lsw = transformed.tables(coeffs.lsw())
print("alpha0 =", transformed.alpha0(coeffs.lsw()), " f(0) =", round(lsw.f0, 6))
for x in (0.01, 0.5, 0.9, 0.999):  # Gamma(0) is infinite for LSW
    print(f"x = {x:6.3f}  f = {float(lsw.f(x)):12.6f}  (1-x) f = {(1 - x) * float(lsw.f(x)):.6f}  Gamma = {float(lsw.gamma(x)):.3e}")

# %%
for z in (2.0, 10.0, 1e3, 1e6):
    print(f"z = {z:9.0f}   -g(z, 1) = {-lsw.g_zu(z, 1.0):.8f}")

# %% [markdown]
# For a quadratic pair Gamma vanishes and g is constant in z.

# %%
quad = transformed.tables(coeffs.quadratic(-0.5, -1.0, 1.0))
print([round(quad.g_zu(z, 1.0), 12) for z in (2.0, 20.0, 2e4)], float(np.max(np.abs(quad.gamma(np.linspace(0, 1, 9))))))
