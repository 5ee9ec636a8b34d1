# %% [markdown]
# # Source identification with the ensemble smoother
#
# The conductivity field is taken as known and only the seven source
# parameters (location and five release strengths) are estimated from noisy
# well data, first with the simulator in the loop and then with a surrogate
# trained on simulator runs.

# %%
import numpy as np

from aquinv.evaluators import SimulatorEvaluator, SurrogateEvaluator, parameter_bounds, sample_sources
from aquinv.forward import ForwardConfig, ForwardModel, make_noise, simulator_calls
from aquinv.grid import REFERENCE_SOURCE, SOURCE_PARAM_NAMES, Grid, ParameterVector, unpack
from aquinv.ilues import IluesConfig, run_ilues
from aquinv.kle import CovarianceSpec, build_basis
from aquinv.nn.data import Normalizer, SimulationSet, inputs_for
from aquinv.nn.network import DESK_SPEC
from aquinv.nn.train import TrainConfig, train

N_E, N_ITER, N_TRAIN, EPOCHS = 100, 6, 64, 20

grid = Grid(21, 41)
basis = build_basis(grid, CovarianceSpec(), 0.95)
model = ForwardModel(ForwardConfig(grid=grid), basis)
xi = np.random.default_rng(11).standard_normal(basis.n_kl)

truth = model.run(ParameterVector(xi, REFERENCE_SOURCE)).observations
d, noise = make_noise(truth, 0.05, 1, model.design.concentration_mask())
prior = sample_sources(N_E, np.random.default_rng(3))
lo, hi = parameter_bounds(basis.n_kl, source_only=True)
config = IluesConfig(n_e=N_E, alpha=0.25, n_iter=N_ITER, seed=5)

# %% [markdown]
# ## Simulator in the loop

# %%
calls = simulator_calls()
sim = run_ilues(prior, SimulatorEvaluator(model, xi), d, noise.sigma, config, lo, hi)
print("simulator calls:", simulator_calls() - calls)
print("median SSWR per iteration:", [round(s.median_sswr, 1) for s in sim.stats])


def summarize(M):
    ref = [*REFERENCE_SOURCE.location, *REFERENCE_SOURCE.strengths]
    for name, m, s, r in zip(SOURCE_PARAM_NAMES, M.mean(axis=0), M.std(axis=0, ddof=1), ref):
        print(f"{name:>4s}  {m:7.3f} +- {s:6.3f}   (reference {r:.4f})")


summarize(sim.final.M)

# %% [markdown]
# ## Surrogate in the loop
#
# Training runs share the known conductivity and draw sources from the prior.
# Once trained, the inversion makes no simulator calls at all.

# %%
rows = np.hstack([np.tile(xi, (N_TRAIN, 1)), sample_sources(N_TRAIN, np.random.default_rng(13))])
params = [unpack(r, basis.n_kl) for r in rows]
outs = [model.run(p) for p in params]
images, cells, n_release = inputs_for(grid, [p.source for p in params], 7)
data = SimulationSet(np.array([o.log_k for o in outs]), images, np.array([o.head for o in outs]),
                     np.array([o.concentrations for o in outs]), cells, n_release)
surrogate = train(data, DESK_SPEC, TrainConfig(batch_size=32, epochs=EPOCHS), "ar-net-wl",
                  Normalizer.fit(data, 2.0, np.sqrt(0.5))).surrogate

calls = simulator_calls()
sur = run_ilues(prior, SurrogateEvaluator(surrogate, basis, model.design, xi), d, noise.sigma, config, lo, hi)
print("simulator calls:", simulator_calls() - calls)
print("median SSWR per iteration:", [round(s.median_sswr, 1) for s in sur.stats])
summarize(sur.final.M)

# %% [markdown]
# With this little training the surrogate recovers the source location but
# not the later release strengths. Its SSWR stalls an order of magnitude
# above the simulator run's. Those strengths only affect late, low
# concentrations, where the relative error of a small surrogate is largest.
# More training runs and epochs narrow the gap. The acceptance suite's
# 128-run, 200-epoch surrogate still ends about 3.6 times above the simulator.
