"""Channel estimation error statistics and scenario sampling.

The two hop channels are modeled as ``H = H_bar + Delta_H`` where the
estimation error has a separable (matrix-variate Gaussian) covariance,
``Delta_H = row_cov^{1/2} @ H_w @ col_cov^{1/2}`` with ``H_w`` holding
i.i.d. circularly symmetric unit-variance complex Gaussians.  With MMSE
training-based estimation the first hop has row covariance exactly I and
the second hop has column covariance exactly I; the nontrivial factors
follow from the training sequences.

All sampling takes an explicit seed or ``numpy.random.Generator``; there
is no hidden global RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import herm_sqrt

__all__ = [
    "ErrorStats",
    "HopTraining",
    "ChannelKnowledge",
    "TrueChannelDraw",
    "exp_corr",
    "error_stats_first_hop",
    "error_stats_second_hop",
    "estimation_stats",
    "exact_knowledge",
    "as_generator",
    "complex_gaussian",
    "sample_error",
    "sample_error_batch",
    "sample_scenario",
]

_PSD_ATOL = 1e-10


def as_generator(seed) -> np.random.Generator:
    """Normalize an int seed / SeedSequence / Generator to a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _check_psd(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    scale = max(float(np.linalg.norm(a)), 1e-300)
    if np.linalg.norm(a - a.conj().T) > 1e-10 * scale:
        raise ValueError(f"{name} must be Hermitian")
    a = 0.5 * (a + a.conj().T)
    wmin = float(np.linalg.eigvalsh(a)[0])
    if wmin < -_PSD_ATOL * scale:
        raise ValueError(f"{name} must be PSD (min eigenvalue {wmin:.3e})")
    return a


@dataclass(frozen=True)
class ErrorStats:
    """Separable covariance of one hop's estimation error.

    ``row_cov`` is the receive-side correlation (size = channel rows),
    ``col_cov`` the transmit-side correlation (size = channel columns).
    """

    row_cov: np.ndarray
    col_cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_cov", _check_psd(self.row_cov, "row_cov"))
        object.__setattr__(self, "col_cov", _check_psd(self.col_cov, "col_cov"))

    @property
    def rows(self) -> int:
        return self.row_cov.shape[0]

    @property
    def cols(self) -> int:
        return self.col_cov.shape[0]

    def scaled(self, factor: float) -> "ErrorStats":
        """Stats with the error energy scaled by ``factor`` (>= 0)."""
        if factor < 0:
            raise ValueError("factor must be nonnegative")
        return ErrorStats(self.row_cov * factor, self.col_cov)


@dataclass(frozen=True)
class HopTraining:
    """Training sequence and variances of one estimation stage.

    ``training`` has one row per transmit antenna of that stage and one
    column per training symbol.
    """

    training: np.ndarray
    channel_var: float
    noise_var: float

    def __post_init__(self):
        t = np.asarray(self.training, dtype=np.complex128)
        if t.ndim != 2:
            raise ValueError("training must be a 2-D matrix")
        if not np.isfinite(t).all():
            raise ValueError("training contains non-finite entries")
        if self.channel_var <= 0 or self.noise_var <= 0:
            raise ValueError("channel_var and noise_var must be positive")
        object.__setattr__(self, "training", t)


@dataclass(frozen=True)
class ChannelKnowledge:
    """Estimated channels of both hops plus their error statistics."""

    est_sr: np.ndarray
    est_rd: np.ndarray
    stats_sr: ErrorStats
    stats_rd: ErrorStats

    def __post_init__(self):
        sr = np.asarray(self.est_sr, dtype=np.complex128)
        rd = np.asarray(self.est_rd, dtype=np.complex128)
        for name, a in (("est_sr", sr), ("est_rd", rd)):
            if a.ndim != 2 or not np.isfinite(a).all():
                raise ValueError(f"{name} must be a finite 2-D matrix")
        if sr.shape != (self.stats_sr.rows, self.stats_sr.cols):
            raise ValueError(
                f"stats_sr shape {(self.stats_sr.rows, self.stats_sr.cols)} "
                f"does not match est_sr shape {sr.shape}"
            )
        if rd.shape != (self.stats_rd.rows, self.stats_rd.cols):
            raise ValueError(
                f"stats_rd shape {(self.stats_rd.rows, self.stats_rd.cols)} "
                f"does not match est_rd shape {rd.shape}"
            )
        object.__setattr__(self, "est_sr", sr)
        object.__setattr__(self, "est_rd", rd)


@dataclass(frozen=True)
class TrueChannelDraw:
    """One realization of true channels and the sampled errors."""

    h_sr: np.ndarray
    h_rd: np.ndarray
    delta_sr: np.ndarray
    delta_rd: np.ndarray


def exp_corr(alpha: float, n: int) -> np.ndarray:
    """Exponential correlation matrix, entry (i, j) = alpha^|i-j|."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.arange(n)
    return alpha ** np.abs(idx[:, None] - idx[None, :]) + 0j


def error_stats_first_hop(t: HopTraining, n_s: int, m_r: int) -> ErrorStats:
    """MMSE error covariances of the source->relay channel estimate.

    Row covariance is exactly I_{m_r}; the column covariance is
    ``((1/channel_var) I + (1/noise_var) D1 D1^H)^{-1}`` with the
    training D1 transmitted from the source (n_s rows).
    """
    if t.training.shape[0] != n_s:
        raise ValueError(
            f"first-hop training must have n_s={n_s} rows, "
            f"got {t.training.shape[0]}"
        )
    d = t.training
    info = np.eye(n_s) / t.channel_var + (d @ d.conj().T) / t.noise_var
    col = np.linalg.inv(info)
    return ErrorStats(row_cov=np.eye(m_r, dtype=np.complex128), col_cov=col)


def error_stats_second_hop(t: HopTraining, n_r: int, m_d: int) -> ErrorStats:
    """MMSE error covariances of the relay->destination channel estimate.

    Training for this hop travels in the reverse direction (m_d rows),
    so the roles flip: column covariance is exactly I_{n_r} and
    ``row_cov = ((1/channel_var) I + (1/noise_var) D2 D2^H)^{-1}``.
    """
    if t.training.shape[0] != m_d:
        raise ValueError(
            f"second-hop training must have m_d={m_d} rows, "
            f"got {t.training.shape[0]}"
        )
    d = t.training
    info = np.eye(m_d) / t.channel_var + (d @ d.conj().T) / t.noise_var
    row = np.linalg.inv(info)
    return ErrorStats(row_cov=row, col_cov=np.eye(n_r, dtype=np.complex128))


def estimation_stats(
    snr_est: float, alpha: float, n_s: int, m_r: int, n_r: int, m_d: int
) -> tuple[ErrorStats, ErrorStats]:
    """Error statistics for exponentially correlated training.

    Training correlation D D^H proportional to exp_corr(alpha) at
    estimation SNR ``snr_est`` (linear) gives
    ``col_cov_sr = (I + snr_est * R_alpha)^{-1}`` on the first hop and
    the mirrored ``row_cov_rd`` on the second.
    """
    if snr_est < 0:
        raise ValueError("snr_est must be nonnegative")
    psi_sr = np.linalg.inv(np.eye(n_s) + snr_est * exp_corr(alpha, n_s))
    sigma_rd = np.linalg.inv(np.eye(m_d) + snr_est * exp_corr(alpha, m_d))
    stats_sr = ErrorStats(row_cov=np.eye(m_r, dtype=np.complex128), col_cov=psi_sr)
    stats_rd = ErrorStats(row_cov=sigma_rd, col_cov=np.eye(n_r, dtype=np.complex128))
    return stats_sr, stats_rd


def exact_knowledge(h_sr, h_rd) -> ChannelKnowledge:
    """Knowledge object that treats the given channels as error-free."""
    h_sr = np.asarray(h_sr, dtype=np.complex128)
    h_rd = np.asarray(h_rd, dtype=np.complex128)
    zero_sr = ErrorStats(
        np.zeros((h_sr.shape[0],) * 2), np.zeros((h_sr.shape[1],) * 2)
    )
    zero_rd = ErrorStats(
        np.zeros((h_rd.shape[0],) * 2), np.zeros((h_rd.shape[1],) * 2)
    )
    return ChannelKnowledge(h_sr, h_rd, zero_sr, zero_rd)


def complex_gaussian(rng, *shape) -> np.ndarray:
    """i.i.d. circularly symmetric CN(0, 1) entries (variance 1/2 per part)."""
    rng = as_generator(rng)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) / np.sqrt(2.0)


def sample_error_batch(stats: ErrorStats, n: int, rng) -> np.ndarray:
    """n draws of row_cov^{1/2} @ H_w @ col_cov^{1/2}, shape (n, rows, cols)."""
    rng = as_generator(rng)
    hw = complex_gaussian(rng, n, stats.rows, stats.cols)
    left = herm_sqrt(stats.row_cov)
    right = herm_sqrt(stats.col_cov)
    return left[None] @ hw @ right[None]


def sample_error(stats: ErrorStats, rng) -> np.ndarray:
    """One estimation-error realization with the given covariances."""
    return sample_error_batch(stats, 1, rng)[0]


def _estimate_stats(stats: ErrorStats) -> ErrorStats:
    """Covariance of the channel *estimate* under unit total variance.

    MMSE orthogonality with i.i.d. unit-variance true entries leaves the
    estimate with covariance I - (error covariance); this factors per hop
    because one side of the error covariance is a scaled identity.
    """
    row, col = stats.row_cov, stats.col_cov
    row_scale = float(np.real(np.trace(row))) / stats.rows
    col_scale = float(np.real(np.trace(col))) / stats.cols
    eye_row = np.eye(stats.rows)
    eye_col = np.eye(stats.cols)
    if np.linalg.norm(row - row_scale * eye_row) <= 1e-10 * max(row_scale, 1e-300):
        return ErrorStats(eye_row, eye_col - row_scale * col)
    if np.linalg.norm(col - col_scale * eye_col) <= 1e-10 * max(col_scale, 1e-300):
        return ErrorStats(eye_row - col_scale * row, eye_col)
    raise ValueError(
        "estimate sampling requires one side of the error covariance to be "
        "a scaled identity (the training-based model guarantees this)"
    )


def _sample_scenario_batch(cfg, snr_est: float, alpha: float, n: int, rng):
    """n scenario draws; returns (stats_sr, stats_rd, est_sr, delta_sr,
    est_rd, delta_rd) with batched (n, rows, cols) channel arrays."""
    rng = as_generator(rng)
    stats_sr, stats_rd = estimation_stats(
        snr_est, alpha, cfg.n_s, cfg.m_r, cfg.n_r, cfg.m_d
    )
    est_sr = sample_error_batch(_estimate_stats(stats_sr), n, rng)
    delta_sr = sample_error_batch(stats_sr, n, rng)
    est_rd = sample_error_batch(_estimate_stats(stats_rd), n, rng)
    delta_rd = sample_error_batch(stats_rd, n, rng)
    return stats_sr, stats_rd, est_sr, delta_sr, est_rd, delta_rd


def sample_scenario(cfg, snr_est: float, alpha: float, rng):
    """Draw estimated channels, errors and true channels for one trial.

    Channel entries have unit total variance: the estimate carries
    1 - (error variance) per entry and true = estimate + error.  Returns
    ``(ChannelKnowledge, TrueChannelDraw)``.
    """
    stats_sr, stats_rd, est_sr, delta_sr, est_rd, delta_rd = _sample_scenario_batch(
        cfg, snr_est, alpha, 1, rng
    )
    know = ChannelKnowledge(est_sr[0], est_rd[0], stats_sr, stats_rd)
    truth = TrueChannelDraw(
        h_sr=est_sr[0] + delta_sr[0],
        h_rd=est_rd[0] + delta_rd[0],
        delta_sr=delta_sr[0],
        delta_rd=delta_rd[0],
    )
    return know, truth
