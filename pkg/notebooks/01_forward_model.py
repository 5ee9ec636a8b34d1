# %% [markdown]
# # Forward model walkthrough
#
# From KLE coefficients to observations: a random log-conductivity field,
# the steady head it induces, the contaminant plume of a five-segment
# release, and the 168-entry observation vector sampled at the wells.
#
# Run with `python3 notebooks/01_forward_model.py` or open it as a notebook
# with jupytext.

# %%
import numpy as np

from aquinv.flow import boundary_imbalance, face_fluxes
from aquinv.forward import ForwardConfig, ForwardModel, make_noise
from aquinv.grid import REFERENCE_SOURCE, Grid, ParameterVector
from aquinv.kle import CovarianceSpec, build_basis

grid = Grid(21, 41)  # half resolution keeps this under a minute
basis = build_basis(grid, CovarianceSpec(), 0.95)
print(f"{basis.n_kl} KLE modes keep {basis.energy_fraction:.3f} of the variance")

# %% [markdown]
# ## A conductivity realization

# %%
xi = np.random.default_rng(0).standard_normal(basis.n_kl)
model = ForwardModel(ForwardConfig(grid=grid), basis)
out, balance = model.run(ParameterVector(xi, REFERENCE_SOURCE), with_balance=True)
print("log K range", out.log_k.min().round(3), out.log_k.max().round(3))

# %% [markdown]
# The head falls from 1 on the left edge to 0 on the right; the left and
# right boundary fluxes agree to solver precision.

# %%
K = np.exp(out.log_k)
qx, _ = face_fluxes(grid, K, out.head)
print("head range", out.head.min().round(4), out.head.max().round(4))
print("boundary imbalance", boundary_imbalance(qx))

# %% [markdown]
# ## Plume and mass balance
#
# The source releases for the first five snapshot intervals and then stops;
# the stored plus outflowed mass tracks the injected mass.

# %%
for row in balance:
    print(f"t={row.time:5.1f}  injected {row.injected:8.3f}  stored {row.stored:8.3f}  "
          f"out {row.outflow:7.3f}  rel.err {row.relative_error:.2e}")

# %%
for t, c in zip(model.config.times, out.concentrations):
    print(f"t={t:5.1f}  peak {c.max():7.3f}  plume cells (c > 0.01): {(c > 0.01).sum()}")

# %% [markdown]
# ## Observations
#
# Head plus seven concentration snapshots at 21 wells, then 5% Gaussian
# noise with a small floor so zero readings keep a finite weight.

# %%
design = model.design
d, noise = make_noise(out.observations, 0.05, 1, design.concentration_mask())
print("N_d =", design.n_data)
for label, truth, noisy in list(zip(design.labels(), out.observations, d))[::24]:
    print(f"{label:>14s}  {truth:9.4f}  {noisy:9.4f}")
