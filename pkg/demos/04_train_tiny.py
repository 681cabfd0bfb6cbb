"""Train a small predictor on one simulated trajectory.

The model sees 30 past frames and predicts the next 5.  Half a minute of
CPU time is enough to beat holding the last frame at every horizon.  Linear
extrapolation from the last two frames still wins one step ahead, but its
error grows quickly and the model overtakes it from the second frame on.
"""

import numpy as np

from chanpred import ModelConfig, SimConfig, TrainConfig, WindowDataset, simulate, train
from chanpred.evaluation import linear_extrap_baseline, per_frame_mse, persistence_baseline, to_db

cfg = ModelConfig(N_P=30, N_L=5, d=32, N_enc=2)
span = cfg.N_P + cfg.N_L - 1
seq = simulate(SimConfig(num_frames=4000 + 2 * span, seed=1)).data
tr = WindowDataset.from_sequences([seq[:3000 + span]], cfg.N_P, cfg.N_L)
te = WindowDataset.from_sequences([seq[3000 + span:]], cfg.N_P, cfg.N_L)

res = train(cfg, tr, te, TrainConfig(epochs=30, aug_snr_range_db=None, dtype="float32"))
for h in res.history[::5]:
    print(f"epoch {h['epoch']:3d}  train {h['train_loss']:.4f}  test {h['test_loss']:.4f}")

idx = np.arange(len(te))
past, future = te.past(idx), te.future(idx)
rows = {
    "model": per_frame_mse(res.predictor.predict(past), future),
    "persistence": per_frame_mse(persistence_baseline(past, cfg.N_L), future),
    "linear": per_frame_mse(linear_extrap_baseline(past, cfg.N_L), future),
}
print("per-frame MSE (dB), frames 1..5")
for name, mse in rows.items():
    print(f"{name:>12}: " + "  ".join(f"{v:6.1f}" for v in to_db(mse)))
