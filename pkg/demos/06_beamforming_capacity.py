"""What prediction error means for a beamformer.

The transmitter steers along the dominant right singular vector of the
channel it believes in.  Capacity is then evaluated on the true channel.
A perfect prediction reaches the MRT bound; stale or noisy channels fall
short.
"""

import numpy as np

from chanpred import SimConfig, simulate
from chanpred.evaluation import mrt_capacity

rng = np.random.default_rng(3)
h = simulate(SimConfig(num_frames=400, speed_kmh=60.0), rng).data
true = h[None, 30:, :, :]
for lag in (0, 1, 5, 20):
    stale = h[None, 30 - lag:len(h) - lag, :, :]
    cap = mrt_capacity(stale, true, snr_db=10.0)
    print(f"channel {lag:2d} frames old: {cap.mean:.3f} bit/s/Hz")
