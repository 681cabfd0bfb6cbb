"""Count multiplications for the full-size predictor.

The closed-form count and an instrumented forward pass must agree.  The
table also shows where the work goes: the token mixer versus the
feed-forward blocks and the output head.
"""

from chanpred import ModelConfig
from chanpred.evaluation import count_table, verify_complexity

cfg = ModelConfig()
rep = verify_complexity(cfg)
print(f"closed form {rep.closed_form:,}  tally {rep.tally:,}  mismatches {rep.discrepancies}")
print(f"share of multiplications spent in the mixers: {rep.mixer_ratio:.3%}")
for row in count_table(cfg):
    print("  ", row)

attn = ModelConfig(mixer="attention")
print(f"same encoder with self-attention mixing: {verify_complexity(attn).closed_form:,}")
