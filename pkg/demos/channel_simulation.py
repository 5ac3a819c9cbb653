"""
Simulating CSI for a moving user
================================

Builds a synthetic scene, evaluates the channel matrix of a user moving
through it and compares the analytic time derivative of the channel with a
finite difference of the simulator.
"""

import numpy as np

from odernn.channel import (ArrayConfig, OfdmConfig, UserState, channel_at, csi_time_derivative,
                            paths_from_geometry, random_scene)
from odernn.numerics import seeded_rng

# 8 antennas, 16 subcarriers around 3.5 GHz; the BS sits 400 m south of the area
ofdm = OfdmConfig(n_c=16)
array = ArrayConfig(n_t=8)
scene = random_scene(seeded_rng(0), n_scatterers=7, bs=(60.0, -400.0))
user = UserState(position=(40.0, 25.0), speed=20.0, heading=0.7)

for p in paths_from_geometry(scene, user, array, ofdm):
    print(f"{p.kind:6s} d={p.length:8.2f} m  theta={np.degrees(p.theta):7.2f} deg  |alpha|={p.alpha:.2e}")

H = channel_at(scene, user, array, ofdm)
print("H shape", H.shape, "Frobenius norm", np.linalg.norm(H))

# The derivative only needs the current geometry and velocity.
dH = csi_time_derivative(scene, user, array, ofdm)
h = 1e-7
v = user.velocity
ahead = UserState(tuple(np.add(user.position, h * v)), user.speed, user.heading)
behind = UserState(tuple(np.subtract(user.position, h * v)), user.speed, user.heading)
fd = (channel_at(scene, ahead, array, ofdm) - channel_at(scene, behind, array, ofdm)) / (2 * h)
err = np.linalg.norm(dH - fd) / np.linalg.norm(fd)
print(f"relative error of analytic dH/dt: {err:.2e}")
assert err < 1e-3

# Over 1 ms at 20 m/s the channel moves by roughly |dH/dt| * 1e-3
H1 = channel_at(scene, UserState(tuple(np.add(user.position, 1e-3 * v)), user.speed, user.heading),
                array, ofdm)
print("NMSE of holding H for 1 ms:", np.sum(np.abs(H1 - H) ** 2) / np.sum(np.abs(H1) ** 2))
