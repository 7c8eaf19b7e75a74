"""Independent verification machinery for the closed-form pipeline.

Monte-Carlo estimators replay the actual signal chain (true channels =
estimate + sampled error) and estimate the detection MSE empirically; a
multi-start numeric minimizer searches the residual weighted MSE over
(P, F_tilde) directly on the power spheres.  Neither path reuses the
closed-form design structure, so agreement is evidence, not tautology.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .channel import ChannelKnowledge, as_generator, complex_gaussian, sample_error_batch
from .design import scalar_gradient, scalar_objective
from .mse import SystemConfig, residual_weighted_mse

__all__ = [
    "McEstimate",
    "BruteForceResult",
    "empirical_weighted_mse",
    "empirical_mse_matrix",
    "brute_force_design",
    "gradient_check_scalar_objective",
    "projected_gradient_norm",
]

_CHUNK = 20_000


@dataclass(frozen=True)
class McEstimate:
    """Monte-Carlo mean with its standard error.

    For matrix-valued estimates ``std_error`` combines the real and
    imaginary standard errors per entry, sqrt(se_re^2 + se_im^2).
    """

    mean: np.ndarray | float
    std_error: np.ndarray | float
    n_samples: int
    seed: int


@dataclass(frozen=True)
class BruteForceResult:
    """Best (P, F_tilde) found by the multi-start numeric search."""

    best_precoder: np.ndarray
    best_tilde_forward: np.ndarray
    best_objective: float
    restarts: int
    iterations_per_restart: int


def _error_samples(cfg, know, tx, n_samples, seed):
    """Stream (error, noise, data) samples of e = G y - s in chunks."""
    rng = as_generator(seed)
    p = np.asarray(tx.precoder, dtype=np.complex128)
    f = np.asarray(tx.forward, dtype=np.complex128)
    g = np.asarray(tx.equalizer, dtype=np.complex128)
    done = 0
    while done < n_samples:
        m = min(_CHUNK, n_samples - done)
        h_sr = know.est_sr[None] + sample_error_batch(know.stats_sr, m, rng)
        h_rd = know.est_rd[None] + sample_error_batch(know.stats_rd, m, rng)
        s = complex_gaussian(rng, m, cfg.n_streams)
        n1 = np.sqrt(cfg.sigma1_sq) * complex_gaussian(rng, m, cfg.m_r)
        n2 = np.sqrt(cfg.sigma2_sq) * complex_gaussian(rng, m, cfg.m_d)
        x = np.einsum("nij,nj->ni", h_sr, s @ p.T) + n1
        y = np.einsum("nij,nj->ni", h_rd, x @ f.T) + n2
        e = y @ g.T - s
        yield e
        done += m


def empirical_weighted_mse(cfg, know, tx, n_samples: int, seed) -> McEstimate:
    """Sample mean of (Gy - s)^H W (Gy - s) over fresh draws of data,
    both hops' estimation errors and both noises.

    Data symbols are unit-power circularly symmetric Gaussian; the
    analytic MSE depends on the data only through its second moment, so
    the constellation choice is free.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    w = cfg.weight
    total = 0.0
    total_sq = 0.0
    for e in _error_samples(cfg, know, tx, n_samples, seed):
        vals = np.real(np.einsum("ni,ij,nj->n", e.conj(), w, e))
        total += float(vals.sum())
        total_sq += float((vals**2).sum())
    mean = total / n_samples
    var = max(total_sq / n_samples - mean**2, 0.0)
    return McEstimate(
        mean=mean,
        std_error=float(np.sqrt(var / n_samples)),
        n_samples=n_samples,
        seed=int(seed) if np.isscalar(seed) else -1,
    )


def empirical_mse_matrix(cfg, know, tx, n_samples: int, seed) -> McEstimate:
    """Entrywise sample mean of (Gy - s)(Gy - s)^H with standard errors."""
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    n = cfg.n_streams
    mean_acc = np.zeros((n, n), dtype=np.complex128)
    re_sq = np.zeros((n, n))
    im_sq = np.zeros((n, n))
    for e in _error_samples(cfg, know, tx, n_samples, seed):
        outer = e[:, :, None] * e[:, None, :].conj()
        mean_acc += outer.sum(axis=0)
        re_sq += (outer.real**2).sum(axis=0)
        im_sq += (outer.imag**2).sum(axis=0)
    mean = mean_acc / n_samples
    var_re = np.clip(re_sq / n_samples - mean.real**2, 0.0, None)
    var_im = np.clip(im_sq / n_samples - mean.imag**2, 0.0, None)
    se = np.sqrt((var_re + var_im) / n_samples)
    return McEstimate(
        mean=mean,
        std_error=se,
        n_samples=n_samples,
        seed=int(seed) if np.isscalar(seed) else -1,
    )


def _unpack(x, cfg):
    np_elems = cfg.n_s * cfg.n_streams
    nf_elems = cfg.n_r * cfg.m_r
    p_raw = x[:np_elems] + 1j * x[np_elems : 2 * np_elems]
    f_raw = x[2 * np_elems : 2 * np_elems + nf_elems] + 1j * x[2 * np_elems + nf_elems :]
    p = p_raw.reshape(cfg.n_s, cfg.n_streams)
    ft = f_raw.reshape(cfg.n_r, cfg.m_r)
    p = p * np.sqrt(cfg.p_s) / max(np.linalg.norm(p), 1e-300)
    ft = ft * np.sqrt(cfg.p_r) / max(np.linalg.norm(ft), 1e-300)
    return p, ft


def brute_force_design(
    cfg: SystemConfig,
    know: ChannelKnowledge,
    restarts: int = 5,
    seed=0,
    max_iters: int = 300,
) -> BruteForceResult:
    """Numeric minimization of the residual weighted MSE over (P, F_tilde).

    Parameterizes both matrices by their real/imaginary parts, rescales
    onto the power spheres inside the objective (the optimum is known to
    sit on the boundary) and runs finite-difference L-BFGS from several
    random starts.  Meant for small problems (n_streams <= 2, a handful
    of antennas): a best-effort lower-bound probe, not a solver.
    """
    rng = as_generator(seed)
    dim = 2 * cfg.n_s * cfg.n_streams + 2 * cfg.n_r * cfg.m_r

    def objective(x):
        p, ft = _unpack(x, cfg)
        return residual_weighted_mse(cfg, know, p, ft)

    best_val = np.inf
    best_x = None
    for _ in range(max(1, restarts)):
        x0 = rng.standard_normal(dim)
        res = scipy.optimize.minimize(
            objective,
            x0,
            method="L-BFGS-B",
            options={"maxiter": max_iters, "ftol": 1e-14, "gtol": 1e-10},
        )
        if res.fun < best_val:
            best_val = float(res.fun)
            best_x = res.x
    p, ft = _unpack(best_x, cfg)
    return BruteForceResult(
        best_precoder=p,
        best_tilde_forward=ft,
        best_objective=best_val,
        restarts=max(1, restarts),
        iterations_per_restart=max_iters,
    )


def gradient_check_scalar_objective(
    p_alloc, f_alloc, gains_sr, gains_rd, weights, h: float = 1e-6
) -> float:
    """Max relative error of the analytic scalarized gradient vs central
    finite differences at an interior point (all p_i, f_i > 0)."""
    if not 1e-7 <= h <= 1e-4:
        raise ValueError("h must be in [1e-7, 1e-4]")
    p = np.asarray(p_alloc, dtype=float)
    f = np.asarray(f_alloc, dtype=float)
    if np.any(p <= 0) or np.any(f <= 0):
        raise ValueError("gradient check needs a strictly interior point")
    grad_p, grad_f = scalar_gradient(p, f, gains_sr, gains_rd, weights)
    worst = 0.0
    for vec, grad, which in ((p, grad_p, "p"), (f, grad_f, "f")):
        for i in range(vec.shape[0]):
            step = np.zeros_like(vec)
            step[i] = h
            if which == "p":
                hi = scalar_objective(vec + step, f, gains_sr, gains_rd, weights)
                lo = scalar_objective(vec - step, f, gains_sr, gains_rd, weights)
            else:
                hi = scalar_objective(p, vec + step, gains_sr, gains_rd, weights)
                lo = scalar_objective(p, vec - step, gains_sr, gains_rd, weights)
            fd = (hi - lo) / (2 * h)
            denom = max(abs(fd), abs(grad[i]), 1e-12)
            worst = max(worst, abs(fd - grad[i]) / denom)
    return worst


def projected_gradient_norm(p_alloc, f_alloc, gains_sr, gains_rd, weights) -> float:
    """Norm of the scalarized gradient projected onto the power spheres.

    At a KKT point of the two-sphere problem the gradient restricted to
    the active coordinates is parallel to the allocation vector in each
    block, so this norm vanishes.
    """
    p = np.asarray(p_alloc, dtype=float)
    f = np.asarray(f_alloc, dtype=float)
    grad_p, grad_f = scalar_gradient(p, f, gains_sr, gains_rd, weights)
    total = 0.0
    for vec, grad in ((p, grad_p), (f, grad_f)):
        act = vec > 0
        if not act.any():
            continue
        v = vec[act]
        g = grad[act]
        coef = float(v @ g) / float(v @ v)
        total += float(np.sum((g - coef * v) ** 2))
    return float(np.sqrt(total))
