# %% [markdown]
# # Training a GP with either solver
#
# Synthetic data from a known Matérn-5/2 GP. Both trainers see the same probes seed;
# the test RMSE should land in the same place.

# %%
import numpy as np

from apgp import KernelSpec, StoppingCriteria, TrainConfig, predict_mean, synth_dataset, train
from apgp.gp import softplus

gen = KernelSpec("matern52", [0.6] * 5, 1.0, 0.05, noise_floor=0.0)
ds = synth_dataset(1000, 5, gen, seed=3)
init = KernelSpec("matern52", [softplus(0.0)] * 5, softplus(0.0), 1e-4 + softplus(0.0))

# %%
results = {}
for solver in ("ap", "cg"):
    cfg = TrainConfig(steps=20, solver=solver, batch_size=100, precond_rank=200, seed=3)
    spec, log = train(ds, init_spec=init, config=cfg)
    mean = predict_mean(spec, ds.X_train, ds.y_train, ds.X_test, solver, StoppingCriteria.test_time(),
                        batch_size=100, precond_rank=200)
    results[solver] = np.sqrt(np.mean((mean - ds.y_test) ** 2))
    print(solver, "noise", round(spec.noise_variance, 4), "rmse", round(results[solver], 4),
          "solver epochs", sum(r["solver_epochs_or_iters"] for r in log))

# %% [markdown]
# Noise in standardised units for reference:

# %%
gen.noise_variance / ds.label_std ** 2
