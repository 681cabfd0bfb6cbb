"""Single-sample inference latency, linear mixer versus self-attention.

Both models share every layer except the token mixer.  Timings are paired
and run on one thread so the comparison is not swamped by scheduling noise.
"""

from chanpred import ModelConfig
from chanpred.evaluation import bench_paired

cfg = ModelConfig(N_P=64, N_L=10, d=128, N_enc=4, heads=4)
for name, stats in bench_paired(cfg, repeats=50, warmup=5).items():
    print(f"{name:>10}: median {stats.median_ms:.2f} ms  p95 {stats.p95_ms:.2f} ms")
