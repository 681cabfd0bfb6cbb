"""Sliding-window datasets, SNR augmentation, losses and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .channel import ChannelSequence, NumericalError, mmse_filter, sample_covariance
from .model import ModelConfig, Params, copy_params, forward, init_params, predict
from .seeding import substream

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- packing


def pack_complex(h: np.ndarray) -> np.ndarray:
    """``[..., F, R, T]`` complex -> ``[..., F, 2RT]`` real as [Re h11, Im h11, Re h12, ...]."""
    h = np.asarray(h)
    out = np.stack([h.real, h.imag], axis=-1)
    return out.reshape(h.shape[:-2] + (2 * h.shape[-2] * h.shape[-1],))


def unpack_complex(x: np.ndarray, R: int, T: int) -> np.ndarray:
    x = np.asarray(x)
    pairs = x.reshape(x.shape[:-1] + (R, T, 2))
    return pairs[..., 0] + 1j * pairs[..., 1]


# ---------------------------------------------------------------- datasets


@dataclass
class Sample:
    past: np.ndarray  # estimated channels [N_P, R, T]
    future: np.ndarray  # clean target [N_L, R, T]


def build_windows(seq, N_P: int, N_L: int):
    """Stride-1 (past, future) frame-index windows; ``F - (N_P + N_L) + 1`` of them."""
    F = seq.num_frames if isinstance(seq, ChannelSequence) else len(seq)
    if F < N_P + N_L:
        raise ValueError(f"sequence has {F} frames, need at least N_P + N_L = {N_P + N_L}")
    return [(range(s, s + N_P), range(s + N_P, s + N_P + N_L)) for s in range(F - N_P - N_L + 1)]


@dataclass
class WindowDataset:
    """Windows over one or more clean channel sequences.

    ``index`` rows are (sequence number, first frame).  ``perm``, when set,
    reorders the past frames of every sample with one shared permutation.
    """

    sequences: list
    index: np.ndarray
    N_P: int
    N_L: int
    perm: np.ndarray | None = None

    @classmethod
    def from_sequences(cls, sequences, N_P: int, N_L: int) -> "WindowDataset":
        seqs = [s.data if isinstance(s, ChannelSequence) else np.asarray(s) for s in sequences]
        rows = []
        for k, s in enumerate(seqs):
            n = len(build_windows(s, N_P, N_L))
            rows.append(np.column_stack([np.full(n, k), np.arange(n)]))
        return cls(seqs, np.concatenate(rows).astype(np.int64), N_P, N_L)

    def __len__(self):
        return len(self.index)

    @property
    def dims(self):
        return self.sequences[0].shape[1:]

    def _gather(self, idx, offset, length):
        idx = np.atleast_1d(np.asarray(idx))
        rows = self.index[idx]
        out = np.empty((len(idx), length) + self.dims, dtype=self.sequences[0].dtype)
        for j, (k, s) in enumerate(rows):
            out[j] = self.sequences[k][s + offset: s + offset + length]
        return out

    def past(self, idx) -> np.ndarray:
        p = self._gather(idx, 0, self.N_P)
        return p if self.perm is None else p[:, self.perm]

    def future(self, idx) -> np.ndarray:
        return self._gather(idx, self.N_P, self.N_L)

    def sample(self, i: int) -> Sample:
        return Sample(self.past(i)[0], self.future(i)[0])

    def subset(self, idx) -> "WindowDataset":
        return replace(self, index=self.index[np.asarray(idx)])

    def frames(self) -> np.ndarray:
        """All frames of all sequences stacked, ``[frames, R, T]``."""
        return np.concatenate(self.sequences)


def shuffle_ablation(dataset: WindowDataset, seed: int, perm=None) -> WindowDataset:
    """Copy of ``dataset`` whose past frames are reordered by one shared time permutation.

    The permutation is drawn from ``seed`` unless given explicitly; applying the
    same seed to train and test sets yields the same permutation.  Targets are
    untouched.
    """
    if perm is None:
        perm = substream(seed, "perm").permutation(dataset.N_P)
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(dataset.N_P)):
        raise ValueError("perm is not a permutation of the past window")
    return replace(dataset, perm=perm)


# ---------------------------------------------------------------- augmentation


def noisy_mmse_batch(past: np.ndarray, snr_db, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Add AWGN at per-sample ``snr_db`` to ``past [B, N_P, R, T]`` and MMSE-filter every frame.

    Noise power is relative to each sample's empirical mean power.
    """
    B, NP, R, T = past.shape
    snr_db = np.broadcast_to(np.asarray(snr_db, dtype=float), (B,))
    sig_pow = np.mean(np.abs(past) ** 2, axis=(1, 2, 3))
    noise_var = sig_pow / 10 ** (snr_db / 10)
    noise = rng.standard_normal(past.shape) + 1j * rng.standard_normal(past.shape)
    noisy = past + np.sqrt(noise_var / 2)[:, None, None, None] * noise
    W = mmse_filter(cov, snr_db)  # [B, RT, RT]
    vec = noisy.reshape(B, NP, R * T)
    return np.einsum("bij,bnj->bni", W, vec).reshape(past.shape)


def augment(sample: Sample, aug_range, cov: np.ndarray, rng: np.random.Generator) -> Sample:
    """Re-estimate the past at an SNR drawn uniformly from ``aug_range`` (dB); future untouched."""
    low, high = aug_range
    if low > high:
        raise ValueError(f"augmentation range low > high: {aug_range}")
    snr = rng.uniform(low, high)
    past = noisy_mmse_batch(sample.past[None], snr, cov, rng)[0]
    return Sample(past, sample.future)


# ---------------------------------------------------------------- losses


def frame_weights(N_L: int, kind: str = "wmse") -> np.ndarray:
    """Per-future-frame loss weights: ``n^-1/2`` for WMSE, ones for MSE."""
    n = np.arange(1, N_L + 1, dtype=float)
    return n ** -0.5 if kind == "wmse" else np.ones(N_L)


def _as_features(x):
    if isinstance(x, Tensor):
        return x
    x = np.asarray(x)
    return Tensor(pack_complex(x)) if np.iscomplexobj(x) else Tensor(x)


def _weighted_loss(pred, target, weights) -> Tensor:
    pred, target = _as_features(pred), _as_features(target)
    if pred.shape != target.shape:
        raise ValueError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    N_L, F = pred.shape[-2], pred.shape[-1]
    batch = int(np.prod(pred.shape[:-2], dtype=int))
    # sum over frames of w_n ||H_n - H^_n||^2, divided by RT N_L (F = 2RT), batch-averaged
    sq = ad.square(ad.sub(pred, target))
    w = Tensor(np.broadcast_to(weights.astype(pred.data.dtype)[:, None], (N_L, F)))
    return ad.scale(ad.sum_all(ad.mul(sq, w)), 2.0 / (F * N_L * batch))


def mse_loss(pred, target) -> Tensor:
    """``1/(RT N_L) sum_n ||H_n - H^_n||^2``, averaged over any batch axes.

    Accepts packed real features (Tensors or arrays, ``[..., N_L, 2RT]``) or
    complex arrays ``[..., N_L, R, T]``.
    """
    p = _as_features(pred)
    return _weighted_loss(p, target, frame_weights(p.shape[-2], "mse"))


def wmse_loss(pred, target) -> Tensor:
    """MSE with frame ``n`` (1-based) weighted by ``n^-1/2``."""
    p = _as_features(pred)
    return _weighted_loss(p, target, frame_weights(p.shape[-2], "wmse"))


LOSSES = {"mse": mse_loss, "wmse": wmse_loss}


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Params, grads: dict, state: OptimizerState, lr: float, wd: float,
               beta1=0.9, beta2=0.999, eps=1e-8) -> OptimizerState:
    """In-place decoupled-weight-decay Adam update of ``params``."""
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + eps) + wd * p.data
        p.data = p.data - lr * step
    return state


def onecycle_lr(step: int, total_steps: int, max_lr: float, pct_start: float = 0.3,
                div_factor: float = 25.0, final_div: float = 1e4) -> float:
    """Cosine warm-up from ``max_lr/25`` to ``max_lr``, then cosine anneal to ``max_lr/1e4``."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    start, floor = max_lr / div_factor, max_lr / final_div
    peak = int(pct_start * total_steps)
    last = total_steps - 1
    if total_steps == 1:
        return max_lr
    if step <= peak and peak > 0:
        frac = step / peak
        return start + (max_lr - start) * (1 - math.cos(math.pi * frac)) / 2
    if peak >= last:
        return max_lr
    frac = (step - peak) / (last - peak)
    return floor + (max_lr - floor) * (1 + math.cos(math.pi * frac)) / 2


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    max_lr: float = 4e-4
    batch_size: int = 64
    weight_decay: float = 0.01
    epochs: int = 100
    loss: str = "wmse"
    # None trains on clean inputs; (15, 15) reproduces fixed-SNR training
    aug_snr_range_db: tuple | None = (0.0, 20.0)
    test_snr_db: float | None = None
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if not self.max_lr > 0:
            raise ValueError("max_lr must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")
        if self.aug_snr_range_db is not None:
            low, high = self.aug_snr_range_db
            if low > high:
                raise ValueError(f"aug_snr_range_db low > high: {self.aug_snr_range_db}")


@dataclass
class Predictor:
    """A configured model plus the input standardization it was trained with."""

    cfg: ModelConfig
    params: Params
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def features(self, past: np.ndarray) -> np.ndarray:
        x = pack_complex(past)
        dtype = next(iter(self.params.values())).data.dtype
        return ((x - self.feat_mean) / self.feat_std).astype(dtype)

    def predict(self, past: np.ndarray) -> np.ndarray:
        """Complex ``[..., N_P, R, T]`` past -> complex ``[..., N_L, R, T]`` future."""
        out = predict(self.features(past), self.params, self.cfg)
        return unpack_complex(out, self.cfg.R, self.cfg.T)

    def with_params(self, params: Params) -> "Predictor":
        return replace(self, params=params)


def standardizer(frames: np.ndarray):
    """Per-feature mean and std of packed clean frames."""
    x = pack_complex(frames)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


@dataclass
class TrainResult:
    predictor: Predictor
    best_params: Params
    best_epoch: int
    history: list


def prepare_inputs(ds: WindowDataset, idx, snr_db, cov, rng):
    """Clean past windows, or MMSE re-estimates at the given SNR(s)."""
    past = ds.past(idx)
    if snr_db is None:
        return past
    return noisy_mmse_batch(past, snr_db, cov, rng)


def evaluate_loss(pred: Predictor, ds: WindowDataset, kind: str, past=None, batch: int = 512):
    """Mean loss of ``kind`` over ``ds`` (inputs from ``past`` if given)."""
    total = 0.0
    n = len(ds)
    for lo in range(0, n, batch):
        idx = np.arange(lo, min(lo + batch, n))
        p = ds.past(idx) if past is None else past[idx]
        out = predict(pred.features(p), pred.params, pred.cfg)
        target = pack_complex(ds.future(idx)).astype(out.dtype)
        total += float(LOSSES[kind](Tensor(out), Tensor(target)).data) * len(idx)
    return total / n


def train(model_cfg: ModelConfig, train_ds: WindowDataset, test_ds: WindowDataset | None,
          cfg: TrainConfig, init: Predictor | None = None, cov: np.ndarray | None = None) -> TrainResult:
    """Minimize ``cfg.loss`` between predictions and clean future frames.

    Deterministic under ``cfg.seed``: initialization, batch order, augmentation
    noise and the fixed test-noise realization each draw from their own named
    sub-stream.  The returned predictor holds the final parameters;
    ``best_params`` holds those with the lowest test loss.
    """
    if len(train_ds) == 0:
        raise ValueError("training dataset is empty")
    if (train_ds.N_P, train_ds.N_L) != (model_cfg.N_P, model_cfg.N_L):
        raise ValueError("dataset window lengths do not match the model config")
    if tuple(train_ds.dims) != (model_cfg.R, model_cfg.T):
        raise ValueError(f"dataset antennas {tuple(train_ds.dims)} do not match model "
                         f"({model_cfg.R}, {model_cfg.T})")
    dtype = np.dtype(cfg.dtype)
    if init is None:
        mean, std = standardizer(train_ds.frames())
        params = init_params(model_cfg, substream(cfg.seed, "init"), dtype=dtype)
        pred = Predictor(model_cfg, params, mean, std)
    else:
        pred = init.with_params(copy_params(init.params))
    for p in pred.params.values():
        p.requires_grad = True

    need_cov = cfg.aug_snr_range_db is not None or cfg.test_snr_db is not None
    if need_cov and cov is None:
        cov = sample_covariance(train_ds.sequences)

    test_past = None
    if test_ds is not None and len(test_ds) and cfg.test_snr_db is not None:
        test_past = prepare_inputs(test_ds, np.arange(len(test_ds)), cfg.test_snr_db, cov,
                                   substream(cfg.seed, "test_noise"))

    shuffle_rng = substream(cfg.seed, "shuffle")
    aug_rng = substream(cfg.seed, "augment")
    loss_fn = LOSSES[cfg.loss]
    n = len(train_ds)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    state = OptimizerState()
    history = []
    best_params, best_epoch, best_loss = copy_params(pred.params), -1, math.inf
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        running, seen = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo: lo + cfg.batch_size]
            snr = None
            if cfg.aug_snr_range_db is not None:
                low, high = cfg.aug_snr_range_db
                snr = aug_rng.uniform(low, high, size=len(idx))
            past = prepare_inputs(train_ds, idx, snr, cov, aug_rng)
            x = Tensor(pred.features(past))
            target = Tensor(pack_complex(train_ds.future(idx)).astype(dtype))
            loss = loss_fn(forward(x, pred.params, model_cfg), target)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, step {step}")
            for p in pred.params.values():
                p.grad = None
            loss.backward()
            lr = onecycle_lr(step, total, cfg.max_lr)
            adamw_step(pred.params, {k: p.grad for k, p in pred.params.items()}, state, lr,
                       cfg.weight_decay)
            step += 1
            running += value * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "train_loss": running / seen, "lr": lr}
        if test_ds is not None and len(test_ds):
            row["test_loss"] = evaluate_loss(pred, test_ds, cfg.loss, test_past)
            row["test_mse"] = (row["test_loss"] if cfg.loss == "mse"
                               else evaluate_loss(pred, test_ds, "mse", test_past))
            if row["test_loss"] < best_loss:
                best_loss, best_epoch = row["test_loss"], epoch
                best_params = copy_params(pred.params)
        log.info("epoch %d %s", epoch, {k: v for k, v in row.items() if k != "epoch"})
        history.append(row)
    if test_ds is None or not len(test_ds):
        best_params, best_epoch = copy_params(pred.params), cfg.epochs - 1
    return TrainResult(pred, best_params, best_epoch, history)


def fine_tune(pretrained: Predictor, train_ds: WindowDataset, test_ds: WindowDataset | None,
              cfg: TrainConfig, lr_scale: float = 0.1, cov=None) -> TrainResult:
    """Continue training ``pretrained`` at ``lr_scale * cfg.max_lr``, keeping its standardization."""
    mc = pretrained.cfg
    for name, ds in (("train", train_ds), ("test", test_ds)):
        if ds is None:
            continue
        if tuple(ds.dims) != (mc.R, mc.T) or (ds.N_P, ds.N_L) != (mc.N_P, mc.N_L):
            raise ValueError(f"{name} dataset dims {tuple(ds.dims)}, windows ({ds.N_P}, {ds.N_L}) "
                             f"do not match checkpoint R={mc.R}, T={mc.T}, N_P={mc.N_P}, N_L={mc.N_L}")
    cfg = replace(cfg, max_lr=cfg.max_lr * lr_scale)
    return train(mc, train_ds, test_ds, cfg, init=pretrained, cov=cov)
