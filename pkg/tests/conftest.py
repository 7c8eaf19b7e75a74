import numpy as np

from afrelay import SystemConfig, sample_scenario

DEFAULT_WEIGHT = np.diag([0.3, 0.3, 0.2, 0.2])


def rand_complex(rng, rows, cols):
    return (rng.standard_normal((rows, cols)) + 1j * rng.standard_normal((rows, cols))) / np.sqrt(2.0)


def rand_psd(rng, n, scale=1.0):
    a = rand_complex(rng, n, n)
    return scale * (a @ a.conj().T) / n


def make_config(
    dims=(4, 4, 4, 4),
    n_streams=4,
    weight=None,
    snr1_db=20.0,
    snr2_db=20.0,
    p_s=1.0,
    p_r=1.0,
):
    n_s, m_r, n_r, m_d = dims
    if weight is None:
        weight = DEFAULT_WEIGHT[:n_streams, :n_streams]
    return SystemConfig(
        n_s=n_s,
        m_r=m_r,
        n_r=n_r,
        m_d=m_d,
        n_streams=n_streams,
        p_s=p_s,
        p_r=p_r,
        sigma1_sq=p_s / 10.0 ** (snr1_db / 10.0),
        sigma2_sq=p_r / 10.0 ** (snr2_db / 10.0),
        weight=weight,
    )


def make_instance(
    seed,
    dims=(4, 4, 4, 4),
    n_streams=4,
    weight=None,
    snr1_db=20.0,
    snr2_db=20.0,
    est_snr_db=10.0,
    alpha=0.3,
    p_s=1.0,
    p_r=1.0,
):
    """Random config + model-consistent channel knowledge + a truth draw."""
    cfg = make_config(dims, n_streams, weight, snr1_db, snr2_db, p_s, p_r)
    rng = np.random.default_rng(seed)
    know, truth = sample_scenario(cfg, 10.0 ** (est_snr_db / 10.0), alpha, rng)
    return cfg, know, truth
