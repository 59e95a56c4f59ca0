# %% [markdown]
# # Intermediate and compromise maps
#
# Four training flights and four validation flights, each with its own
# constant bias (SD 0.5 uT per axis). Each field component gets a GP; the
# intermediate map predicts from every observation, the compromise map from
# 511 grid points.

# %%
import time

import numpy as np

from magmap.evaluation import format_validation_table, validate
from magmap.ingest import merge_observations, preprocess
from magmap.mapping import GridSpec, build_compromise, build_intermediate, generate_grid
from magmap.sim import CAMPAIGN_TRAIN, CAMPAIGN_VALIDATE, load_environment, survey_campaign

env = load_environment()
train_logs = survey_campaign(env, CAMPAIGN_TRAIN, bias_sd=0.5, seed=31, series=3)
val_logs = survey_campaign(env, CAMPAIGN_VALIDATE, bias_sd=0.5, seed=32, series=3, first=10)
train = [preprocess(log, 2.0) for log in train_logs]
val = [preprocess(log, 2.0) for log in val_logs]
obs = merge_observations(train)
print(len(obs), "training observations from", obs.sources)

# %%
t0 = time.perf_counter()
inter = build_intermediate(obs)
print(f"hyperparameter search {time.perf_counter() - t0:.0f} s")
for axis, hp in zip("xyz", inter.hyperparams):
    print(f"  {axis}: sigma_f {hp.sigma_f:.3f} uT, l {hp.length_scale:.3f} m, sigma_n {hp.sigma_n:.3f} uT")

# %% [markdown]
# The noise level soaks up the flight-to-flight biases as well as the
# sensor noise.

# %%
grid = generate_grid(GridSpec())
comp = build_compromise(inter, grid, GridSpec())
print("compromise grid:", len(comp), "points")

rows_i = [(v.sources[0], validate(inter, v)) for v in val]
rows_c = [(v.sources[0], validate(comp, v)) for v in val]
print("intermediate\n" + format_validation_table(rows_i))
print("\ncompromise\n" + format_validation_table(rows_c))

# %%
diff = [abs(a.rmse_norm - b.rmse_norm) for (_, a), (_, b) in zip(rows_i, rows_c)]
print("norm RMSE difference per flight", np.round(diff, 4), "uT")

# %% [markdown]
# Single-flight maps for comparison.

# %%
for tr in train:
    single = build_intermediate(tr, kind="single-flight")
    print(tr.sources[0], np.round([validate(single, v).rmse_norm for v in val], 3))
print("all four", np.round([r.rmse_norm for _, r in rows_i], 3))
