# %% [markdown]
# # A simulated indoor flight lab
#
# The lab field is a uniform Earth-like background plus a handful of magnetic
# dipoles sitting just outside the flight volume (steel in walls and floor).
# Here we look at the field, fly one survey and see what the raw log holds.

# %%
import numpy as np

from magmap.sim import (WORKSPACE, CorruptionProfile, evaluate_field, load_environment,
                        profile_trajectory, simulate_flight)

env = load_environment()
print(len(env.dipoles), "dipoles; background", env.background_field, "uT")

# %% [markdown]
# Field magnitude on a horizontal slice at z = -1 m (z points down).

# %%
xs = np.linspace(WORKSPACE.lower[0], WORKSPACE.upper[0], 9)
ys = np.linspace(WORKSPACE.lower[1], WORKSPACE.upper[1], 7)
X, Y = np.meshgrid(xs, ys)
pts = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, -1.0)])
norm = np.linalg.norm(evaluate_field(env, pts), axis=1).reshape(X.shape)
np.set_printoptions(precision=2, suppress=True, linewidth=120)
print(norm)

# %% [markdown]
# A four-altitude lawnmower over the lower half of the volume, flown with
# sensor noise, the odd 3 uT spike, a constant flight bias and one pose
# dropout.

# %%
traj = profile_trajectory("lower_four")
prof = CorruptionProfile(gaussian_noise_sd=0.15, spurious_rate=0.02, spurious_magnitude=3.0,
                         flight_bias=(0.3, -0.2, 0.1), pose_dropouts=((20.0, 20.4),))
log = simulate_flight(env, traj, prof, seed=4, flight_id="t1_00")
print(f"{log.id}: {traj.t[-1]:.1f} s, {len(log.mags)} samples at 200 Hz, {len(log.poses)} poses")

speed = np.linalg.norm(np.diff(traj.position, axis=0), axis=1) * 200.0
print(f"peak speed {speed.max():.2f} m/s")

# %%
truth = traj.rotations().inv().apply(evaluate_field(env, traj.position))
err = log.mags.field_body - truth
print("body-frame error mean", err.mean(axis=0).round(3), "sd", err.std(axis=0).round(3))
print("samples with stale pose:", int(np.sum(log.mags.pose_age > 0.05)))
