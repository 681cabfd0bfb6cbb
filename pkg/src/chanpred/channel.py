"""Time-varying MIMO channel simulation and pilot-based estimation.

The channel for frame ``n`` is a sum of ``L`` plane-wave paths,

    H[n] = sum_l alpha_l * exp(-j 2 pi f_l n Ts) * a_rx(theta_l) a_tx(phi_l)^H

with Jakes-distributed Doppler shifts ``f_l = f_d cos(psi_l)``.  Averaged over
path draws the normalized autocorrelation of every entry is
``J0(2 pi f_d tau Ts)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class NumericalError(RuntimeError):
    """Raised when a linear solve or training step produces unusable numbers."""


@dataclass(frozen=True)
class SimConfig:
    R: int = 2
    T: int = 4
    L: int = 23
    Ts: float = 0.625e-3
    fc: float = 3.5e9
    speed_kmh: float = 30.0
    num_frames: int = 11_000
    seed: int = 0
    # Metadata only: a flat single-carrier channel has no delay axis.
    delay_spread_ns: float = 100.0

    def __post_init__(self):
        for name in ("R", "T", "L", "num_frames"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"SimConfig.{name} must be >= 1, got {getattr(self, name)}")
        if not self.Ts > 0:
            raise ValueError(f"SimConfig.Ts must be > 0, got {self.Ts}")
        if not self.fc > 0:
            raise ValueError(f"SimConfig.fc must be > 0, got {self.fc}")
        if not self.speed_kmh >= 0:
            raise ValueError(f"SimConfig.speed_kmh must be >= 0, got {self.speed_kmh}")

    @property
    def max_doppler(self) -> float:
        """Maximum Doppler shift ``f_d`` in Hz."""
        return doppler_hz(self.speed_kmh, self.fc)

    def to_dict(self) -> dict:
        return asdict(self)


def doppler_hz(speed_kmh: float, fc: float) -> float:
    return (speed_kmh / 3.6) * fc / SPEED_OF_LIGHT


@dataclass
class PathSet:
    """Per-path parameters: complex gain, Doppler shift (Hz), AoA and AoD (rad)."""

    alpha: np.ndarray
    doppler: np.ndarray
    aoa: np.ndarray
    aod: np.ndarray

    def __len__(self):
        return len(self.alpha)


@dataclass
class ChannelSequence:
    """Complex channel tensor of shape ``[frames, R, T]`` plus the config that made it."""

    data: np.ndarray
    meta: SimConfig | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"channel data must be [frames, R, T], got shape {self.data.shape}")
        if self.meta is not None and self.data.shape[1:] != (self.meta.R, self.meta.T):
            raise ValueError(
                f"data shape {self.data.shape} inconsistent with R={self.meta.R}, T={self.meta.T}"
            )

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    def __getitem__(self, item) -> "ChannelSequence":
        return ChannelSequence(self.data[item], self.meta)


@dataclass(frozen=True)
class EstimationConfig:
    snr_db: float = 10.0
    cov_source: str = "sample"

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.cov_source not in ("identity", "sample"):
            raise ValueError(f"cov_source must be 'identity' or 'sample', got {self.cov_source!r}")


def sample_path_set(cfg: SimConfig, rng: np.random.Generator) -> PathSet:
    L = cfg.L
    psi = rng.uniform(0.0, 2 * np.pi, L)
    doppler = cfg.max_doppler * np.cos(psi)
    aoa = rng.uniform(0.0, 2 * np.pi, L)
    aod = rng.uniform(0.0, 2 * np.pi, L)
    g = rng.standard_normal(L) + 1j * rng.standard_normal(L)
    alpha = g / np.sqrt(np.sum(np.abs(g) ** 2))
    return PathSet(alpha=alpha, doppler=doppler, aoa=aoa, aod=aod)


def steering_vector(angle: float, n_elems: int) -> np.ndarray:
    """Half-wavelength ULA response ``exp(-j pi k sin(angle))``, k = 0..n_elems-1."""
    if n_elems < 1:
        raise ValueError("n_elems must be >= 1")
    k = np.arange(n_elems)
    return np.exp(-1j * np.pi * k * np.sin(angle))


def generate_sequence(cfg: SimConfig, paths: PathSet, start_frame: int = 0) -> ChannelSequence:
    n = np.arange(start_frame, start_frame + cfg.num_frames)
    # [frames, L] phase rotation per path
    rot = np.exp(-2j * np.pi * np.outer(n, paths.doppler) * cfg.Ts) * paths.alpha
    a_rx = np.stack([steering_vector(th, cfg.R) for th in paths.aoa])  # [L, R]
    a_tx = np.stack([steering_vector(ph, cfg.T) for ph in paths.aod])  # [L, T]
    outer = a_rx[:, :, None] * a_tx.conj()[:, None, :]  # [L, R, T]
    data = np.tensordot(rot, outer, axes=(1, 0))
    return ChannelSequence(data, cfg)


def simulate(cfg: SimConfig, rng: np.random.Generator | None = None) -> ChannelSequence:
    """Draw a path set and generate ``cfg.num_frames`` frames from it."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return generate_sequence(cfg, sample_path_set(cfg, rng))


def autocorrelation_estimate(sequences, max_lag: int) -> np.ndarray:
    """Ensemble- and entry-averaged normalized autocorrelation (real part).

    Each sequence contributes every available frame pair at every lag, so
    sequences must have more than ``max_lag`` frames.
    """
    seqs = [s.data if isinstance(s, ChannelSequence) else np.asarray(s) for s in sequences]
    if not seqs:
        raise ValueError("autocorrelation_estimate needs at least one sequence")
    if any(s.shape[0] <= max_lag for s in seqs):
        raise ValueError(f"every sequence needs more than max_lag={max_lag} frames")
    num = np.zeros(max_lag + 1, dtype=complex)
    cnt = np.zeros(max_lag + 1)
    power = 0.0
    npow = 0
    # equal-length sequences are stacked so each lag is one vectorized product
    groups = {}
    for h in seqs:
        groups.setdefault(h.shape, []).append(h.reshape(h.shape[0], -1))
    for (F, *_), hs in groups.items():
        h = np.stack(hs)  # [S, F, entries]
        for tau in range(max_lag + 1):
            num[tau] += np.vdot(h[:, tau:], h[:, : F - tau])
            cnt[tau] += h[:, : F - tau].size
        power += np.sum(np.abs(h) ** 2)
        npow += h.size
    rho = (num / cnt) / (power / npow)
    return rho.real


def _bessel_j0_series(x: float) -> float:
    term = 1.0
    total = 1.0
    q = -(x * x) / 4.0
    k = 0
    while True:
        k += 1
        term *= q / (k * k)
        total += term
        if abs(term) < 1e-17 * max(1.0, abs(total)) and k > 2:
            return total


def _bessel_j0_asymptotic(x: float) -> float:
    # Hankel expansion J0 = sqrt(2/(pi x)) (P cos(x - pi/4) - Q sin(x - pi/4)),
    # summed until terms stop shrinking.
    z = 8.0 * x
    p, q = 1.0, 0.0
    term = 1.0  # a_k / x^k for mu = 4 nu^2 = 0
    prev = math.inf
    for k in range(1, 60):
        term *= -((2 * k - 1) ** 2) / (k * z)
        if abs(term) >= prev:
            break
        prev = abs(term)
        sign = -1.0 if (k // 2) % 2 else 1.0
        if k % 2:
            q += sign * term
        else:
            p += sign * term
    chi = x - math.pi / 4
    return math.sqrt(2.0 / (math.pi * x)) * (p * math.cos(chi) - q * math.sin(chi))


def bessel_j0(x):
    """Zero-order Bessel function of the first kind.

    Power series for ``|x| <= 8``; Hankel asymptotic expansion beyond.
    Accepts scalars or arrays.
    """
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("bessel_j0 needs finite input")
    flat = np.abs(arr).ravel()
    out = np.array([_bessel_j0_series(v) if v <= 8.0 else _bessel_j0_asymptotic(v) for v in flat])
    out = out.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def add_awgn(seq: ChannelSequence, snr_db: float, rng: np.random.Generator) -> ChannelSequence:
    """Add complex white Gaussian noise at ``snr_db`` relative to the empirical mean power."""
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    h = seq.data
    sig_pow = np.mean(np.abs(h) ** 2)
    noise_var = sig_pow / 10 ** (snr_db / 10)
    noise = rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)
    return ChannelSequence(h + np.sqrt(noise_var / 2) * noise, seq.meta)


def ls_estimate(noisy: ChannelSequence) -> ChannelSequence:
    """LS estimate with an identity-scaled pilot: the observation itself."""
    return ChannelSequence(noisy.data.copy(), noisy.meta)


def mmse_estimate(ls: ChannelSequence, cfg: EstimationConfig, R_HH: np.ndarray) -> ChannelSequence:
    """Per-frame MMSE filter ``R_HH (R_HH + I/gamma0)^-1`` applied to vec(H_LS)."""
    F, R, T = ls.data.shape
    R_HH = np.asarray(R_HH)
    if R_HH.shape != (R * T, R * T):
        raise ValueError(f"R_HH must be [{R * T}x{R * T}], got {R_HH.shape}")
    W = mmse_filter(R_HH, cfg.snr_db)
    vec = ls.data.reshape(F, R * T)
    return ChannelSequence((vec @ W.T).reshape(F, R, T), ls.meta)


def mmse_filter(R_HH: np.ndarray, snr_db) -> np.ndarray:
    """MMSE filter matrix (or a stack of them for an array of SNRs).

    Computed as the solution of ``(R_HH + I/gamma0) X = R_HH`` and then
    transposed, using that both R_HH and the regularized matrix are Hermitian.
    """
    n = R_HH.shape[0]
    snr = np.asarray(snr_db, dtype=float)
    inv_gamma = 10 ** (-snr / 10)
    A = R_HH + inv_gamma[..., None, None] * np.eye(n)
    try:
        # R (R + I/g)^-1 = ((R + I/g)^-1 R)^H for Hermitian R
        X = np.linalg.solve(A, np.broadcast_to(R_HH, A.shape))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"MMSE system is singular: {exc}") from exc
    if not np.all(np.isfinite(X)):
        raise NumericalError("MMSE solve produced non-finite values")
    return np.conj(np.swapaxes(X, -1, -2))


def sample_covariance(train) -> np.ndarray:
    """``mean(vec(H) vec(H)^H)`` over every frame of every training sequence."""
    if isinstance(train, ChannelSequence):
        train = [train]
    mats = [(s.data if isinstance(s, ChannelSequence) else np.asarray(s)) for s in train]
    if not mats:
        raise ValueError("sample_covariance needs at least one sequence")
    RT = mats[0].shape[1] * mats[0].shape[2]
    vecs = np.concatenate([m.reshape(m.shape[0], -1) for m in mats])
    if vecs.shape[0] < RT:
        raise ValueError(f"need at least {RT} frames for an {RT}x{RT} covariance, got {vecs.shape[0]}")
    C = vecs.T @ vecs.conj() / vecs.shape[0]
    return 0.5 * (C + C.conj().T)
