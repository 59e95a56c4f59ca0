# %% [markdown]
# # Catching a bias change mid-flight
#
# A map is only useful if new flights agree with it. We check what share of
# errors fall inside two predicted standard deviations, for the whole flight
# and in sliding windows, and look for the window where a 2 uT z bias
# appears half way through.

# %%
import numpy as np

from magmap.evaluation import consistency_check
from magmap.ingest import merge_observations, preprocess
from magmap.mapping import GridSpec, build_compromise, build_intermediate, generate_grid
from magmap.sim import (CAMPAIGN_TRAIN, CorruptionProfile, load_environment, profile_trajectory,
                        simulate_flight, survey_campaign)

env = load_environment()
train = [preprocess(log, 2.0) for log in survey_campaign(env, CAMPAIGN_TRAIN, bias_sd=0.5, seed=51, series=5)]
inter = build_intermediate(merge_observations(train))
comp = build_compromise(inter, generate_grid(GridSpec()), GridSpec())

# %%
traj = profile_trajectory("scan_gamma")
half = traj.t[-1] / 2
base = dict(gaussian_noise_sd=0.15, spurious_rate=0.02, spurious_magnitude=3.0)
twin = preprocess(simulate_flight(env, traj, CorruptionProfile(**base), 7, flight_id="t5_20"), 10.0)
shifted = preprocess(simulate_flight(env, traj, CorruptionProfile(**base, bias_switch=(half, (0, 0, 2.0))),
                                     7, flight_id="t5_21"), 10.0)

for obs in (twin, shifted):
    rep = consistency_check(comp, obs, 0.96)
    print(obs.sources[0], "capture %", np.round(100 * rep.capture, 1), "consistent", rep.consistent,
          "failing windows", len(rep.failing_segments))

# %% [markdown]
# Window-by-window z capture on the switched flight. The bias starts at the
# sample printed below.

# %%
rep = consistency_check(comp, shifted, 0.96)
print("switch at index", int(np.searchsorted(shifted.t, half)))
for s in rep.segments:
    mark = "" if s.consistent else "  <- below 96%"
    print(f"{s.start:5d}-{s.stop:<5d} z {100 * s.capture[2]:5.1f}%{mark}")

# %% [markdown]
# A well calibrated map captures about 95.4% on average, a little under the
# 96% rule, so short windows on a clean flight can dip below it too. The
# whole-flight verdict and the window list are reported side by side for
# that reason.
