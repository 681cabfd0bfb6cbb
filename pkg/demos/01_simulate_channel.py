"""Simulate a mobile MIMO channel and check its time correlation.

A user moving at 30 km/h on a 3.5 GHz carrier sees a maximum Doppler shift
near 97 Hz.  With 23 scattering paths arriving from random directions, the
normalized autocorrelation of each channel coefficient should follow the
Bessel function J0(2 pi f_d tau Ts).  We average over a few thousand
independent path sets and print the two curves side by side.
"""

import numpy as np

from chanpred import SimConfig, autocorrelation_estimate, bessel_j0, generate_sequence, sample_path_set

cfg = SimConfig(speed_kmh=30.0, num_frames=61)
print(f"max Doppler {cfg.max_doppler:.2f} Hz, f_d*Ts = {cfg.max_doppler * cfg.Ts:.4f}")

rng = np.random.default_rng(0)
seqs = [generate_sequence(cfg, sample_path_set(cfg, rng)) for _ in range(3000)]
rho = autocorrelation_estimate(seqs, 60)

print(" lag  simulated      J0")
for tau in range(0, 61, 5):
    ref = bessel_j0(2 * np.pi * cfg.max_doppler * tau * cfg.Ts)
    print(f"{tau:4d}  {rho[tau]:9.4f}  {ref:7.4f}")
