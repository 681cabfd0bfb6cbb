"""Encoder-only channel predictor with a time-mixing MLP (TMLP) or attention mixer.

Data flow for one sample (batch axes may lead every shape)::

    past features [N_P, 2RT] --embed--> [N_P, d] --N_enc x (mixer, FFN)--> [N_P, d]
        --head--> [N_L, 2RT]

The TMLP mixes strictly along time: ``O = (ReLU(X^T W1 + b1) W2 + b2)^T``.
The head is the dimension-wise separable map ``(F^T W_time)^T W_channels``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    N_P: int = 90
    N_L: int = 10
    d: int = 512
    N_enc: int = 6
    R: int = 2
    T: int = 4
    mixer: str = "tmlp"
    heads: int = 8
    use_pos_enc: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("N_P", "N_L", "d", "R", "T", "heads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        # N_enc = 0 is allowed: it makes the encoder the identity
        if self.N_enc < 0:
            raise ValueError(f"ModelConfig.N_enc must be >= 0, got {self.N_enc}")
        if self.mixer not in ("tmlp", "attention"):
            raise ValueError(f"mixer must be 'tmlp' or 'attention', got {self.mixer!r}")
        if self.mixer == "attention" and self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")

    @property
    def n_features(self) -> int:
        return 2 * self.R * self.T

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ValueError(f"unknown ModelConfig key {key!r}")
            kw[key] = _parse_field(types[key], value)
        return cls(**kw)


def _parse_field(type_name, value: str):
    t = str(type_name)
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    if t == "bool":
        return value.strip().lower() in ("1", "true", "yes", "on")
    return value


Params = dict  # name -> Tensor


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> Params:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
    d, NP, NL, F = cfg.d, cfg.N_P, cfg.N_L, cfg.n_features
    shapes = {"embed.W": (F, d), "embed.b": (d,)}
    for i in range(cfg.N_enc):
        p = f"layers.{i}."
        if cfg.mixer == "tmlp":
            shapes.update({p + "tmlp.W1": (NP, NP), p + "tmlp.b1": (NP,),
                           p + "tmlp.W2": (NP, NP), p + "tmlp.b2": (NP,)})
        else:
            for w in ("q", "k", "v", "o"):
                shapes.update({p + f"attn.W{w}": (d, d), p + f"attn.b{w}": (d,)})
        shapes.update({p + "ffn.Wa": (d, d), p + "ffn.ba": (d,),
                       p + "ffn.Wb": (d, d), p + "ffn.bb": (d,),
                       p + "norm1.g": (d,), p + "norm1.b": (d,),
                       p + "norm2.g": (d,), p + "norm2.b": (d,)})
    shapes.update({"head.W_time": (NP, NL), "head.W_channels": (d, F)})

    params = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("W"):
            data = _uniform(rng, shape[0], shape, dtype)
        elif leaf == "g":
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def copy_params(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in params.items()}


def check_params(params: Params, cfg: ModelConfig):
    ref = init_params(cfg, np.random.default_rng(0))
    if set(ref) != set(params):
        missing = sorted(set(ref) - set(params))
        extra = sorted(set(params) - set(ref))
        raise ValueError(f"parameter names do not match config (missing={missing}, extra={extra})")
    for k, v in ref.items():
        if params[k].shape != v.shape:
            raise ValueError(f"parameter {k} has shape {params[k].shape}, expected {v.shape}")


def sinusoidal_encoding(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ---------------------------------------------------------------- blocks


def embed(past, params: Params, cfg: ModelConfig) -> Tensor:
    past = ad.as_tensor(past)
    if past.shape[-2:] != (cfg.N_P, cfg.n_features):
        raise ValueError(f"embed expects [..., {cfg.N_P}, {cfg.n_features}], got {past.shape}")
    with ad.scope("embed"):
        out = ad.add(ad.matmul(past, params["embed.W"]), params["embed.b"])
        if cfg.mixer == "attention" and cfg.use_pos_enc:
            pe = sinusoidal_encoding(cfg.N_P, cfg.d).astype(out.data.dtype)
            out = ad.add(out, Tensor(np.broadcast_to(pe, out.shape)))
    return out


def tmlp_forward(X: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    """Time-mixing MLP; feature columns never interact."""
    X = ad.as_tensor(X)
    N = X.shape[-2]
    if W1.shape != (N, N) or W2.shape != (N, N):
        raise ValueError(f"TMLP weights must be [{N}x{N}], got {W1.shape} and {W2.shape}")
    Xt = ad.transpose(X)  # [..., d, N]
    h = ad.relu(ad.add(ad.matmul(Xt, W1), b1))
    return ad.transpose(ad.add(ad.matmul(h, W2), b2))


def attention_forward(X: Tensor, params: Params, prefix: str, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention followed by the output map."""
    X = ad.as_tensor(X)
    d = X.shape[-1]
    if d % heads:
        raise ValueError(f"d={d} is not divisible by heads={heads}")
    dk = d // heads

    def proj(w):
        return ad.add(ad.matmul(X, params[prefix + "W" + w]), params[prefix + "b" + w])

    Q, K, V = proj("q"), proj("k"), proj("v")
    lead = X.shape[:-2]
    N = X.shape[-2]

    def split(t):
        # [..., N, d] -> [..., heads, N, dk]
        t = ad.reshape(t, lead + (N, heads, dk))
        return ad.swapaxes(t, -3, -2)

    Qh, Kh, Vh = split(Q), split(K), split(V)
    scores = ad.scale(ad.matmul(Qh, ad.transpose(Kh)), 1.0 / math.sqrt(dk))
    Oh = ad.matmul(ad.softmax_rows(scores), Vh)  # [..., heads, N, dk]
    O = ad.reshape(ad.swapaxes(Oh, -3, -2), lead + (N, d))
    return ad.add(ad.matmul(O, params[prefix + "Wo"]), params[prefix + "bo"])


def ffn_forward(X: Tensor, params: Params, prefix: str) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(X, params[prefix + "Wa"]), params[prefix + "ba"]))
    return ad.add(ad.matmul(h, params[prefix + "Wb"]), params[prefix + "bb"])


def mixer_forward(F: Tensor, params: Params, cfg: ModelConfig, i: int) -> Tensor:
    p = f"layers.{i}."
    if cfg.mixer == "tmlp":
        return tmlp_forward(F, params[p + "tmlp.W1"], params[p + "tmlp.b1"],
                            params[p + "tmlp.W2"], params[p + "tmlp.b2"])
    return attention_forward(F, params, p + "attn.", cfg.heads)


def encoder_forward(F0: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    F = ad.as_tensor(F0)
    for i in range(cfg.N_enc):
        p = f"layers.{i}."
        with ad.scope(f"layer{i}"):
            with ad.scope("mixer"):
                f1 = mixer_forward(F, params, cfg, i)
            F = ad.layer_norm(ad.add(f1, F), params[p + "norm1.g"], params[p + "norm1.b"], cfg.ln_eps)
            with ad.scope("ffn"):
                f2 = ffn_forward(F, params, p + "ffn.")
            F = ad.layer_norm(ad.add(f2, F), params[p + "norm2.g"], params[p + "norm2.b"], cfg.ln_eps)
    return F


def head_forward(F: Tensor, W_time: Tensor, W_channels: Tensor) -> Tensor:
    """``(F^T W_time)^T W_channels``; no biases."""
    F = ad.as_tensor(F)
    if F.shape[-2] != W_time.shape[0] or F.shape[-1] != W_channels.shape[0]:
        raise ValueError(f"head shapes do not match: F {F.shape}, W_time {W_time.shape}, "
                         f"W_channels {W_channels.shape}")
    with ad.scope("head"):
        return ad.matmul(ad.transpose(ad.matmul(ad.transpose(F), W_time)), W_channels)


def forward(past_features, params: Params, cfg: ModelConfig) -> Tensor:
    """Map ``[..., N_P, 2RT]`` real features to ``[..., N_L, 2RT]`` predictions."""
    F = encoder_forward(embed(past_features, params, cfg), params, cfg)
    return head_forward(F, params["head.W_time"], params["head.W_channels"])


def predict(past_features: np.ndarray, params: Params, cfg: ModelConfig) -> np.ndarray:
    """Forward pass without graph recording; returns a plain array."""
    with ad.no_grad():
        return forward(past_features, params, cfg).data


# ---------------------------------------------------------------- permutation


def permute_weights(params: Params, perm, cfg: ModelConfig) -> Params:
    """Weights that make ``forward(X[perm], new) == forward(X, params)``.

    ``perm`` is an index array: the permuted input has row ``i`` equal to
    original row ``perm[i]``.  Every TMLP layer has its input rows of ``W1``
    and its output columns of ``W2`` (plus ``b2``) permuted so the residual
    stream stays permuted consistently; the head's ``W_time`` rows absorb the
    final permutation.  Per-time-step blocks (embedding, FFN, norms) are
    untouched.
    """
    if cfg.mixer != "tmlp":
        raise ValueError("permute_weights only applies to the tmlp mixer")
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(cfg.N_P)):
        raise ValueError(f"perm must be a permutation of range({cfg.N_P})")
    out = copy_params(params)
    for i in range(cfg.N_enc):
        p = f"layers.{i}.tmlp."
        out[p + "W1"].data = params[p + "W1"].data[perm, :].copy()
        out[p + "W2"].data = params[p + "W2"].data[:, perm].copy()
        out[p + "b2"].data = params[p + "b2"].data[perm].copy()
    out["head.W_time"].data = params["head.W_time"].data[perm, :].copy()
    return out


# ---------------------------------------------------------------- accounting


def count_params(params: Params) -> int:
    return int(sum(v.data.size for v in params.values()))


def head_param_count(cfg: ModelConfig) -> int:
    return cfg.N_P * cfg.N_L + 2 * cfg.d * cfg.R * cfg.T


def mixer_mults(cfg: ModelConfig, mixer: str | None = None) -> int:
    """Multiplications of one mixer layer (per sample)."""
    N, d = cfg.N_P, cfg.d
    if (mixer or cfg.mixer) == "tmlp":
        return 2 * N * N * d
    return 4 * N * d * d + 2 * N * N * d


def count_mults(cfg: ModelConfig) -> int:
    """Closed-form multiplication count per sample, embedding excluded.

    For the TMLP mixer this is
    ``2 N_enc N_P^2 d + 2 N_enc N_P d^2 + 2 N_L R T d + N_P N_L d``.
    """
    ffn = 2 * cfg.N_P * cfg.d * cfg.d
    head = 2 * cfg.N_L * cfg.R * cfg.T * cfg.d + cfg.N_P * cfg.N_L * cfg.d
    return cfg.N_enc * (mixer_mults(cfg) + ffn) + head


def embed_mults(cfg: ModelConfig) -> int:
    return cfg.N_P * cfg.n_features * cfg.d


def tally_mults(params: Params, cfg: ModelConfig, rng: np.random.Generator | None = None):
    """Run one batch-1 forward pass and return the per-scope matmul multiplication tally."""
    rng = rng or np.random.default_rng(0)
    x = rng.standard_normal((cfg.N_P, cfg.n_features))
    with ad.no_grad(), ad.count_mults() as counter:
        forward(x, params, cfg)
    return dict(counter.by_scope)
