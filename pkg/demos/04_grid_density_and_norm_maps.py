# %% [markdown]
# # How dense must the grid be?
#
# The compromise map reuses the intermediate hyperparameters, so a grid
# spacing well below the length scale loses little. We sweep S and also
# check whether a map of |B| beats the magnitude of a vector map.

# %%
import numpy as np

from magmap.evaluation import compare_norm_maps, density_sweep, format_density_table, format_norm_table
from magmap.ingest import merge_observations, preprocess
from magmap.mapping import GridSpec, build_compromise, build_intermediate, build_norm_map, generate_grid
from magmap.sim import CAMPAIGN_TRAIN, CAMPAIGN_VALIDATE, load_environment, survey_campaign

env = load_environment()
train = [preprocess(log, 2.0) for log in survey_campaign(env, CAMPAIGN_TRAIN, bias_sd=0.5, seed=41, series=4)]
val = [preprocess(log, 2.0) for log in
       survey_campaign(env, CAMPAIGN_VALIDATE, bias_sd=0.5, seed=42, series=4, first=10)]
obs = merge_observations(train)
inter = build_intermediate(obs)

# %%
spacings = [0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.7, 1.0]
res = density_sweep(inter, spacings, val)
print(format_density_table(res))

# %% [markdown]
# S = 0.45 leaves the highest flight level without a grid layer above it,
# since 1.75 m is not a multiple of 0.45 m.

# %%
mean = res.table().mean(axis=1)
for S, n1, r in zip(res.spacings, res.n1, mean / mean[0]):
    print(f"S {S:4.2f}  n1 {n1:5d}  RMSE / RMSE(0.2) {r:5.3f}")

# %% [markdown]
# Vector map magnitude against a dedicated norm map, both on the default grid.

# %%
spec = GridSpec()
comp = build_compromise(inter, generate_grid(spec), spec)
nmap = build_norm_map(obs, generate_grid(spec), grid_spec=spec)
rows = [(v.sources[0], *compare_norm_maps(comp, nmap, v)) for v in val]
print(format_norm_table(rows))
print("largest gap", np.round(max(abs(a - b) for _, a, b in rows), 4), "uT")
