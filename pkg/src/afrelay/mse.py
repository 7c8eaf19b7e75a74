"""Exact weighted-MSE evaluation for a dual-hop AF MIMO relay link.

Given estimated channels with Gaussian error statistics, the detection
MSE matrix for data s, precoder P, relay forward matrix F and equalizer
G is available in closed form (expectation over data, both hops' errors
and both noises):

    E = G (Hrd F Rx F^H Hrd^H + K2) G^H + I - L - L^H,
    L = G Hrd F Hsr P,
    Rx = Hsr P P^H Hsr^H + K1,
    K1 = tr(P P^H col_sr) row_sr + sigma1^2 I,
    K2 = tr(F Rx F^H col_rd) row_rd + sigma2^2 I,

with Hsr/Hrd the channel estimates.  This module evaluates these
quantities, the LMMSE equalizer, the residual weighted MSE after the
optimal G has been substituted in, and the whitening change of variables
F -> F_tilde that makes the relay power constraint independent of P.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .channel import ChannelKnowledge
from .linalg import herm_inv_sqrt, herm_sqrt

__all__ = [
    "SystemConfig",
    "Transceiver",
    "SecondOrderStats",
    "TildeMaps",
    "second_order_stats",
    "mse_matrix",
    "weighted_mse",
    "optimal_equalizer",
    "tilde_maps",
    "residual_weighted_mse",
]

# Backward-error bound for linear solves; LU/Cholesky is ~eps, so this
# only fires on genuinely broken systems.
_SOLVE_BACKWARD_RTOL = 1e-12


@dataclass(frozen=True)
class SystemConfig:
    """Antenna counts, stream count, powers, noise variances, weighting.

    ``weight`` is the N x N Hermitian PSD matrix of the weighted-MSE
    objective tr(W E).
    """

    n_s: int
    m_r: int
    n_r: int
    m_d: int
    n_streams: int
    p_s: float
    p_r: float
    sigma1_sq: float
    sigma2_sq: float
    weight: np.ndarray

    def __post_init__(self):
        dims = (self.n_s, self.m_r, self.n_r, self.m_d)
        if any(d < 1 for d in dims) or self.n_streams < 1:
            raise ValueError("antenna and stream counts must be >= 1")
        if self.n_streams > min(dims):
            raise ValueError(
                f"n_streams={self.n_streams} exceeds min antenna count {min(dims)}"
            )
        for name in ("p_s", "p_r", "sigma1_sq", "sigma2_sq"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        w = np.asarray(self.weight, dtype=np.complex128)
        if w.shape != (self.n_streams, self.n_streams):
            raise ValueError(
                f"weight must be {self.n_streams}x{self.n_streams}, got {w.shape}"
            )
        if not np.isfinite(w).all():
            raise ValueError("weight contains non-finite entries")
        if np.linalg.norm(w - w.conj().T) > 1e-10 * max(np.linalg.norm(w), 1e-300):
            raise ValueError("weight must be Hermitian")
        w = 0.5 * (w + w.conj().T)
        if float(np.linalg.eigvalsh(w)[0]) < -1e-10 * max(np.linalg.norm(w), 1e-300):
            raise ValueError("weight must be PSD")
        object.__setattr__(self, "weight", w)


@dataclass(frozen=True)
class Transceiver:
    """Precoder (n_s x N), relay forward matrix (n_r x m_r), equalizer (N x m_d)."""

    precoder: np.ndarray
    forward: np.ndarray
    equalizer: np.ndarray


@dataclass(frozen=True)
class SecondOrderStats:
    """Relay receive covariance r_x and effective noise covariances k1, k2."""

    r_x: np.ndarray
    k1: np.ndarray
    k2: np.ndarray


def _herm(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.conj().T)


def _solve_hermitian(c: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve c @ x = b for Hermitian PD c, with a backward-error check."""
    c = _herm(c)
    try:
        factor = scipy.linalg.cho_factor(c, check_finite=False)
        x = scipy.linalg.cho_solve(factor, b, check_finite=False)
    except scipy.linalg.LinAlgError:
        x = np.linalg.solve(c, b)
    resid = np.linalg.norm(c @ x - b)
    bound = _SOLVE_BACKWARD_RTOL * (
        np.linalg.norm(c) * np.linalg.norm(x) + np.linalg.norm(b)
    )
    if resid > max(bound, 1e-300):
        raise np.linalg.LinAlgError(
            f"hermitian solve residual {resid:.3e} exceeds backward-error bound"
        )
    return x


def _check_tx_dims(cfg: SystemConfig, know: ChannelKnowledge, p, f, g=None):
    if know.est_sr.shape != (cfg.m_r, cfg.n_s):
        raise ValueError(
            f"est_sr shape {know.est_sr.shape} does not match config "
            f"({cfg.m_r}, {cfg.n_s})"
        )
    if know.est_rd.shape != (cfg.m_d, cfg.n_r):
        raise ValueError(
            f"est_rd shape {know.est_rd.shape} does not match config "
            f"({cfg.m_d}, {cfg.n_r})"
        )
    if p.shape != (cfg.n_s, cfg.n_streams):
        raise ValueError(f"precoder must be ({cfg.n_s}, {cfg.n_streams}), got {p.shape}")
    if f is not None and f.shape != (cfg.n_r, cfg.m_r):
        raise ValueError(f"forward must be ({cfg.n_r}, {cfg.m_r}), got {f.shape}")
    if g is not None and g.shape != (cfg.n_streams, cfg.m_d):
        raise ValueError(f"equalizer must be ({cfg.n_streams}, {cfg.m_d}), got {g.shape}")


def second_order_stats(cfg: SystemConfig, know: ChannelKnowledge, precoder, forward) -> SecondOrderStats:
    """r_x, k1, k2 for a given precoder and relay forward matrix."""
    p = np.asarray(precoder, dtype=np.complex128)
    f = np.asarray(forward, dtype=np.complex128)
    _check_tx_dims(cfg, know, p, f)
    gram_p = p @ p.conj().T
    k1 = (
        float(np.real(np.trace(gram_p @ know.stats_sr.col_cov)))
        * know.stats_sr.row_cov
        + cfg.sigma1_sq * np.eye(cfg.m_r)
    )
    r_x = _herm(know.est_sr @ gram_p @ know.est_sr.conj().T + k1)
    frf = f @ r_x @ f.conj().T
    k2 = (
        float(np.real(np.trace(frf @ know.stats_rd.col_cov)))
        * know.stats_rd.row_cov
        + cfg.sigma2_sq * np.eye(cfg.m_d)
    )
    return SecondOrderStats(r_x=r_x, k1=_herm(k1), k2=_herm(k2))


def mse_matrix(cfg: SystemConfig, know: ChannelKnowledge, tx: Transceiver) -> np.ndarray:
    """N x N detection MSE matrix (expectation over data, errors, noises)."""
    p = np.asarray(tx.precoder, dtype=np.complex128)
    f = np.asarray(tx.forward, dtype=np.complex128)
    g = np.asarray(tx.equalizer, dtype=np.complex128)
    _check_tx_dims(cfg, know, p, f, g)
    so = second_order_stats(cfg, know, p, f)
    hf = know.est_rd @ f
    cov_y = hf @ so.r_x @ hf.conj().T + so.k2
    lin = g @ hf @ know.est_sr @ p
    e = g @ cov_y @ g.conj().T + np.eye(cfg.n_streams) - lin - lin.conj().T
    return _herm(e)


def weighted_mse(cfg: SystemConfig, know: ChannelKnowledge, tx: Transceiver) -> float:
    """tr(W E) for the MSE matrix E of the given transceiver."""
    return float(np.real(np.trace(cfg.weight @ mse_matrix(cfg, know, tx))))


def optimal_equalizer(cfg: SystemConfig, know: ChannelKnowledge, precoder, forward) -> np.ndarray:
    """LMMSE equalizer (Hrd F Hsr P)^H (Hrd F Rx F^H Hrd^H + K2)^{-1}."""
    p = np.asarray(precoder, dtype=np.complex128)
    f = np.asarray(forward, dtype=np.complex128)
    _check_tx_dims(cfg, know, p, f)
    so = second_order_stats(cfg, know, p, f)
    hf = know.est_rd @ f
    cov_y = hf @ so.r_x @ hf.conj().T + so.k2
    num = hf @ know.est_sr @ p
    return _solve_hermitian(cov_y, num).conj().T


@dataclass(frozen=True)
class TildeMaps:
    """Whitening change of variables F <-> F_tilde for a fixed precoder.

    ``F_tilde = F @ k1^{1/2} @ pi_p^{1/2}`` with
    ``pi_p = k1^{-1/2} Hsr P P^H Hsr^H k1^{-1/2} + I``, which makes
    tr(F Rx F^H) = tr(F_tilde F_tilde^H) exactly.
    """

    pi_p: np.ndarray
    k1: np.ndarray
    _k1_half: np.ndarray = field(repr=False)
    _k1_inv_half: np.ndarray = field(repr=False)
    _pi_half: np.ndarray = field(repr=False)
    _pi_inv_half: np.ndarray = field(repr=False)

    def to_tilde(self, forward) -> np.ndarray:
        f = np.asarray(forward, dtype=np.complex128)
        return f @ self._k1_half @ self._pi_half

    def from_tilde(self, tilde_forward) -> np.ndarray:
        ft = np.asarray(tilde_forward, dtype=np.complex128)
        return ft @ self._pi_inv_half @ self._k1_inv_half

    @property
    def whitened_source(self) -> np.ndarray:
        """pi_p^{-1/2} k1^{-1/2}, the factor in front of Hsr P in the MSE."""
        return self._pi_inv_half @ self._k1_inv_half


def tilde_maps(cfg: SystemConfig, know: ChannelKnowledge, precoder) -> TildeMaps:
    """Build the F <-> F_tilde maps for the given precoder."""
    p = np.asarray(precoder, dtype=np.complex128)
    _check_tx_dims(cfg, know, p, None)
    gram_p = p @ p.conj().T
    k1 = _herm(
        float(np.real(np.trace(gram_p @ know.stats_sr.col_cov)))
        * know.stats_sr.row_cov
        + cfg.sigma1_sq * np.eye(cfg.m_r)
    )
    k1_half = herm_sqrt(k1)
    k1_inv_half = herm_inv_sqrt(k1)
    x = k1_inv_half @ know.est_sr @ p
    # pi_p = I + x x^H is always PD with min eigenvalue 1, so its roots are
    # taken on the PSD part directly; herm_inv_sqrt's conditioning guard
    # would reject extreme but perfectly valid SNRs here.
    w, q = np.linalg.eigh(_herm(x @ x.conj().T))
    w = np.clip(w, 0.0, None)
    pi_p = _herm((q * (1.0 + w)) @ q.conj().T)
    pi_half = _herm((q * np.sqrt(1.0 + w)) @ q.conj().T)
    pi_inv_half = _herm((q / np.sqrt(1.0 + w)) @ q.conj().T)
    return TildeMaps(
        pi_p=pi_p,
        k1=k1,
        _k1_half=k1_half,
        _k1_inv_half=k1_inv_half,
        _pi_half=pi_half,
        _pi_inv_half=pi_inv_half,
    )


def residual_weighted_mse(cfg: SystemConfig, know: ChannelKnowledge, precoder, tilde_forward) -> float:
    """Weighted MSE with the optimal equalizer already substituted in.

    tr(W) - tr[B^H (Hrd Ft Ft^H Hrd^H + K2)^{-1} B] with
    B = Hrd Ft pi_p^{-1/2} k1^{-1/2} Hsr P W^{1/2}.  Matches
    ``weighted_mse`` at the LMMSE equalizer to solver precision.
    """
    p = np.asarray(precoder, dtype=np.complex128)
    ft = np.asarray(tilde_forward, dtype=np.complex128)
    if ft.shape != (cfg.n_r, cfg.m_r):
        raise ValueError(
            f"tilde_forward must be ({cfg.n_r}, {cfg.m_r}), got {ft.shape}"
        )
    maps = tilde_maps(cfg, know, p)
    f = maps.from_tilde(ft)
    so = second_order_stats(cfg, know, p, f)
    w_half = herm_sqrt(cfg.weight)
    b = know.est_rd @ ft @ maps.whitened_source @ know.est_sr @ p @ w_half
    hft = know.est_rd @ ft
    cov = hft @ hft.conj().T + so.k2
    quad = float(np.real(np.trace(b.conj().T @ _solve_hermitian(cov, b))))
    return float(np.real(np.trace(cfg.weight))) - quad
