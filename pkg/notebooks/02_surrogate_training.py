# %% [markdown]
# # Training an autoregressive surrogate
#
# A small dataset on the 21 x 41 grid, the three network variants (one-shot,
# autoregressive, autoregressive with the source-weighted loss) and their
# test accuracy. The counts here are far below a production run; expect a
# few minutes per network on one core.

# %%
import numpy as np

from aquinv.evaluators import sample_prior
from aquinv.forward import ForwardConfig, ForwardModel
from aquinv.grid import Grid, unpack
from aquinv.kle import CovarianceSpec, build_basis
from aquinv.metrics import surrogate_report
from aquinv.nn.data import Normalizer, SimulationSet, inputs_for
from aquinv.nn.network import DESK_SPEC
from aquinv.nn.train import TrainConfig, train

N_TRAIN, N_TEST, EPOCHS = 48, 16, 20

grid = Grid(21, 41)
basis = build_basis(grid, CovarianceSpec(), 0.95)
model = ForwardModel(ForwardConfig(grid=grid), basis)


def simulate(rows):
    params = [unpack(r, basis.n_kl) for r in rows]
    outs = [model.run(p) for p in params]
    images, cells, n_release = inputs_for(grid, [p.source for p in params], 7)
    return SimulationSet(np.array([o.log_k for o in outs]), images, np.array([o.head for o in outs]),
                         np.array([o.concentrations for o in outs]), cells, n_release)


rows = sample_prior(N_TRAIN + N_TEST, basis.n_kl, 7)
train_set = simulate(rows[:N_TRAIN])
test_set = simulate(rows[N_TRAIN:])
print(len(train_set), "training runs,", len(test_set), "test runs")

# %% [markdown]
# ## Three variants
#
# The autoregressive variants see 7 pairs per run (one per snapshot) and
# predict snapshot j from snapshot j - 1; the one-shot network maps the
# conductivity and release images to all outputs at once.

# %%
norm = Normalizer.fit(train_set, 2.0, np.sqrt(0.5))
results = {}
for mode, batch in [("net", 8), ("ar-net", 32), ("ar-net-wl", 32)]:
    cfg = TrainConfig(batch_size=batch, epochs=EPOCHS, w_c=5.0)
    res = train(train_set, DESK_SPEC, cfg, mode, norm)
    head, conc = res.surrogate.predict_set(test_set)
    results[mode] = surrogate_report(test_set.head, test_set.conc, head, conc, test_set.n_release)
    print(f"{mode:10s} final loss {res.history[-1][1]:9.3f}")

# %%
for mode, rep in results.items():
    print(f"{mode:10s} R2 {rep.r2:7.4f}  RMSE {rep.rmse:8.3f}  |e_c|max {rep.emax_mean:6.3f} +- {rep.emax_std:.3f}")
