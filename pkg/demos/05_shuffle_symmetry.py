"""Why shuffling the past frames costs the linear mixer nothing.

The time-mixing MLP treats positions through dense weight matrices, so any
permutation of the input frames can be undone by permuting those matrices.
We check the forward pass, then train twice (plain data from the original
init, shuffled data from the permuted init) and compare losses epoch by epoch.
"""

import numpy as np

from chanpred import ModelConfig, Predictor, SimConfig, TrainConfig, WindowDataset, init_params, permute_weights, simulate, train
from chanpred.model import predict
from chanpred.training import shuffle_ablation, standardizer

cfg = ModelConfig(N_P=12, N_L=3, d=16, N_enc=2)
rng = np.random.default_rng(5)
params = init_params(cfg, rng)
perm = rng.permutation(cfg.N_P)
x = rng.standard_normal((4, cfg.N_P, 2 * cfg.R * cfg.T))
diff = np.max(np.abs(predict(x[:, perm], permute_weights(params, perm, cfg), cfg) - predict(x, params, cfg)))
print(f"forward pass, shuffled input + permuted weights vs original: max diff {diff:.2e}")

span = cfg.N_P + cfg.N_L - 1
seq = simulate(SimConfig(num_frames=1500 + span, seed=2)).data
plain = WindowDataset.from_sequences([seq], cfg.N_P, cfg.N_L)
shuffled = shuffle_ablation(plain, seed=0, perm=perm)
mean, std = standardizer(plain.frames())
tc = TrainConfig(epochs=4, aug_snr_range_db=None)
a = train(cfg, plain, None, tc, init=Predictor(cfg, params, mean, std))
b = train(cfg, shuffled, None, tc, init=Predictor(cfg, permute_weights(params, perm, cfg), mean, std))
for ha, hb in zip(a.history, b.history):
    print(f"epoch {ha['epoch']}  plain {ha['train_loss']:.6f}  shuffled {hb['train_loss']:.6f}")
