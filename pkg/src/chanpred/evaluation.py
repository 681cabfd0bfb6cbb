"""Prediction metrics, reference predictors, MRT capacity, complexity checks and timing."""

from __future__ import annotations

import contextlib
import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .model import (ModelConfig, Params, count_mults, count_params, embed_mults, head_param_count,
                    init_params, mixer_mults, predict, tally_mults)


def to_db(x):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(x)


def from_db(x):
    return 10.0 ** (np.asarray(x) / 10.0)


def per_frame_mse(preds: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Complex squared error averaged over samples and antenna entries, per future frame.

    Both inputs are ``[samples, N_L, R, T]`` (or ``[N_L, R, T]`` for one sample).
    """
    preds, targets = np.asarray(preds), np.asarray(targets)
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {targets.shape}")
    if preds.size == 0:
        raise ValueError("per_frame_mse needs at least one sample")
    if preds.ndim == 3:
        preds, targets = preds[None], targets[None]
    err = np.abs(preds - targets) ** 2
    return err.mean(axis=(0, 2, 3))


def persistence_baseline(past: np.ndarray, N_L: int) -> np.ndarray:
    """Repeat the last observed frame ``N_L`` times."""
    past = np.asarray(past)
    last = past[..., -1:, :, :]
    return np.repeat(last, N_L, axis=-3)


def linear_extrap_baseline(past: np.ndarray, N_L: int) -> np.ndarray:
    """``H[n+k] = H[n] + k (H[n] - H[n-1])`` for k = 1..N_L."""
    past = np.asarray(past)
    if past.shape[-3] < 2:
        raise ValueError("linear extrapolation needs at least two past frames")
    last, prev = past[..., -1, :, :], past[..., -2, :, :]
    k = np.arange(1, N_L + 1).reshape((N_L, 1, 1))
    return last[..., None, :, :] + k * (last - prev)[..., None, :, :]


@dataclass
class CapacityResult:
    mean: float
    skipped: int
    evaluated: int


def mrt_capacity(pred_future: np.ndarray, true_future: np.ndarray, snr_db: float) -> CapacityResult:
    """Average ``log2(1 + |w H v|^2 gamma0)`` with ``v`` the MRT vector of the prediction.

    ``w`` is the uniform receive combiner ``1/sqrt(R)``.  Frames whose predicted
    effective channel is zero have no MRT direction; they are skipped and counted.
    """
    pred = np.asarray(pred_future)
    true = np.asarray(true_future)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    R, T = pred.shape[-2:]
    pred = pred.reshape(-1, R, T)
    true = true.reshape(-1, R, T)
    w = np.full(R, 1 / np.sqrt(R))
    g = np.einsum("r,nrt->nt", w, pred)  # w Ĥ, one row per frame
    norm = np.linalg.norm(g, axis=1)
    ok = norm > 0
    v = np.conj(g[ok]) / norm[ok, None]
    a = np.einsum("r,nrt,nt->n", w, true[ok], v)
    gamma0 = 10 ** (snr_db / 10)
    cap = np.log2(1 + np.abs(a) ** 2 * gamma0)
    mean = float(cap.mean()) if cap.size else float("nan")
    return CapacityResult(mean, int((~ok).sum()), int(ok.sum()))


def mrt_gain(H: np.ndarray, v: np.ndarray) -> complex:
    """Effective gain ``a = w H v`` of one frame."""
    R = H.shape[0]
    return complex(np.full(R, 1 / np.sqrt(R)) @ H @ v)


@dataclass
class MetricsReport:
    per_frame: np.ndarray
    capacity: float | None = None
    capacity_skipped: int = 0
    latency_ms: float | None = None
    mults: int | None = None
    params: int | None = None
    baselines: dict = field(default_factory=dict)

    @property
    def per_frame_db(self):
        return to_db(self.per_frame)

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.per_frame))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = sorted(self.baselines)
        w.writerow(["frame", "mse", "mse_db"] + [f"{b}_mse" for b in names])
        for i, m in enumerate(self.per_frame):
            w.writerow([i + 1, f"{m:.10g}", f"{to_db(m):.6f}"]
                       + [f"{self.baselines[b][i]:.10g}" for b in names])
        w.writerow([])
        w.writerow(["metric", "value"])
        w.writerow(["mean_mse", f"{self.mean_mse:.10g}"])
        for key in ("capacity", "capacity_skipped", "latency_ms", "mults", "params"):
            val = getattr(self, key)
            if val is not None:
                w.writerow([key, val])
        return buf.getvalue()


# ---------------------------------------------------------------- complexity


@dataclass
class ComplexityReport:
    cfg: ModelConfig
    closed_form: int
    tally: int
    embed_tally: int
    per_scope: dict
    attention_mults: int
    mixer_ratio: float
    discrepancies: list

    @property
    def ok(self) -> bool:
        return not self.discrepancies and self.tally == self.closed_form


def verify_complexity(cfg: ModelConfig, params: Params | None = None) -> ComplexityReport:
    """Compare an instrumented batch-1 forward tally with the closed-form count."""
    if params is None:
        params = init_params(cfg, np.random.default_rng(0), dtype=np.float32)
    scopes = tally_mults(params, cfg)
    tally = sum(v for k, v in scopes.items() if k != "embed")
    expected = {"head": 2 * cfg.N_L * cfg.R * cfg.T * cfg.d + cfg.N_P * cfg.N_L * cfg.d}
    for i in range(cfg.N_enc):
        expected[f"layer{i}/mixer"] = mixer_mults(cfg)
        expected[f"layer{i}/ffn"] = 2 * cfg.N_P * cfg.d * cfg.d
    discrepancies = [
        f"{k}: counted {scopes.get(k, 0)}, expected {v}"
        for k, v in expected.items() if scopes.get(k, 0) != v
    ]
    discrepancies += [f"{k}: unexpected {v} multiplications" for k, v in scopes.items()
                      if k not in expected and k != "embed"]
    att = count_mults(cfg.replace(mixer="attention", heads=1))
    ratio = mixer_mults(cfg, "tmlp") / mixer_mults(cfg, "attention")
    return ComplexityReport(cfg, count_mults(cfg), tally, scopes.get("embed", 0), scopes, att, ratio,
                            discrepancies)


def count_table(cfg: ModelConfig) -> list:
    """Rows of (quantity, value) summarizing parameter and multiplication counts."""
    params = init_params(cfg, np.random.default_rng(0), dtype=np.float32)
    rep = verify_complexity(cfg, params)
    return [
        ("params_total", count_params(params)),
        ("params_head", head_param_count(cfg)),
        ("mults_closed_form", rep.closed_form),
        ("mults_tally", rep.tally),
        ("mults_embedding", embed_mults(cfg)),
        ("mults_attention_variant", rep.attention_mults),
        ("mixer_ratio_tmlp_over_attention", rep.mixer_ratio),
        ("complexity_match", rep.ok),
    ]


# ---------------------------------------------------------------- timing


@dataclass
class LatencyStats:
    median_ms: float
    p95_ms: float
    mults_per_ms: float
    samples_ms: np.ndarray


@contextlib.contextmanager
def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


def bench_inference(params: Params, cfg: ModelConfig, repeats: int = 100, warmup: int = 10,
                    rng: np.random.Generator | None = None) -> LatencyStats:
    """Wall-clock statistics of single-threaded batch-1 forward passes."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = rng or np.random.default_rng(0)
    dtype = next(iter(params.values())).data.dtype
    x = rng.standard_normal((cfg.N_P, cfg.n_features)).astype(dtype)
    times = np.empty(repeats)
    with _single_thread():
        for _ in range(warmup):
            predict(x, params, cfg)
        for i in range(repeats):
            t0 = time.perf_counter()
            predict(x, params, cfg)
            times[i] = (time.perf_counter() - t0) * 1e3
    med = float(np.median(times))
    total = count_mults(cfg) + embed_mults(cfg)
    return LatencyStats(med, float(np.percentile(times, 95)), total / med, times)


def bench_paired(cfg: ModelConfig, repeats: int = 100, warmup: int = 10, dtype=np.float32,
                 seed: int = 0) -> dict:
    """Latency of the TMLP model and the attention baseline at identical sizes.

    Runs are interleaved in blocks so slow drift on the machine affects both alike.
    """
    cfgs = {"tmlp": cfg.replace(mixer="tmlp"), "attention": cfg.replace(mixer="attention")}
    params = {k: init_params(c, np.random.default_rng(seed), dtype=dtype) for k, c in cfgs.items()}
    samples = {k: [] for k in cfgs}
    block = max(1, repeats // 10)
    done = 0
    first = True
    while done < repeats:
        n = min(block, repeats - done)
        for k in cfgs:
            st = bench_inference(params[k], cfgs[k], repeats=n, warmup=warmup if first else 1)
            samples[k].append(st.samples_ms)
        first = False
        done += n
    out = {}
    for k, c in cfgs.items():
        t = np.concatenate(samples[k])
        med = float(np.median(t))
        out[k] = LatencyStats(med, float(np.percentile(t, 95)),
                              (count_mults(c) + embed_mults(c)) / med, t)
    return out


# ---------------------------------------------------------------- plots


def write_svg_plot(path, series: dict, xlabel: str, ylabel: str, title: str = ""):
    """Line plot of ``{label: y}`` (or ``{label: (x, y)}``) saved as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in series.items():
        if isinstance(ys, tuple):
            ax.plot(ys[0], ys[1], marker="o", label=label)
        else:
            ax.plot(np.arange(1, len(ys) + 1), ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
