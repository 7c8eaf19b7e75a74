"""Monte-Carlo experiment harness for the transceiver comparison.

Sweeps the channel-estimation SNR, and for every channel draw designs up
to three transceivers -- the robust joint design, the robust design
without source precoding (scaled-identity precoder), and the naive
design that trusts the channel estimate -- then pushes QPSK symbols
through the true channels and records analytic and empirical weighted
MSE plus BER.  Identical spec + seed reproduces identical results byte
for byte; draws use independent RNG streams keyed by (seed, sweep point,
draw index) so a worker pool changes nothing.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channel import exact_knowledge, sample_scenario
from .design import ConvergenceError, DesignOptions, design
from .mse import SystemConfig, weighted_mse

__all__ = [
    "ConfigError",
    "ExperimentSpec",
    "ExperimentRecord",
    "system_config",
    "run_experiment",
    "emit_csv",
    "run_selftest",
]

ALGORITHMS = ("naive", "robust_full", "robust_nopre")

CSV_HEADER = "est_snr_db,algorithm,wmse_analytic,wmse_empirical,ber,n_draws,n_failed,seed"


class ConfigError(ValueError):
    """Experiment specification failed validation; message names the field."""


@dataclass(frozen=True)
class ExperimentSpec:
    """One sweep: dimensions, SNRs, weighting, draw counts, algorithms.

    ``data_snr_db`` is (first hop, second hop); transmit powers default
    to 1 so the noise variances follow directly from the SNRs.
    """

    dims: tuple[int, int, int, int]
    n_streams: int
    alpha: float
    data_snr_db: tuple[float, float]
    est_snr_db: tuple[float, ...]
    weights: np.ndarray
    n_channel_draws: int = 1000
    n_symbols: int = 1000
    seed: int = 0
    algorithms: tuple[str, ...] = ALGORITHMS
    p_s: float = 1.0
    p_r: float = 1.0
    workers: int = 1

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentSpec":
        known = {
            "dims",
            "n_streams",
            "alpha",
            "data_snr_db",
            "est_snr_db",
            "weights",
            "n_channel_draws",
            "n_symbols",
            "seed",
            "algorithms",
            "p_s",
            "p_r",
            "workers",
        }
        for key in raw:
            if key not in known:
                raise ConfigError(f"unknown config field {key!r}")
        try:
            dims = tuple(int(d) for d in raw["dims"])
        except (KeyError, TypeError, ValueError):
            raise ConfigError("dims must be a list of four antenna counts") from None
        if len(dims) != 4 or any(d < 1 for d in dims):
            raise ConfigError("dims must be four positive antenna counts")
        if "n_streams" not in raw:
            raise ConfigError("n_streams is required")
        n = int(raw["n_streams"])
        if not 1 <= n <= min(dims):
            raise ConfigError("n_streams must be in [1, min(dims)]")
        alpha = float(raw.get("alpha", 0.0))
        if not 0.0 <= alpha < 1.0:
            raise ConfigError("alpha must be in [0, 1)")
        snr = raw.get("data_snr_db", 30.0)
        if np.isscalar(snr):
            data_snr = (float(snr), float(snr))
        else:
            data_snr = tuple(float(v) for v in snr)
            if len(data_snr) != 2:
                raise ConfigError("data_snr_db must be a scalar or a pair")
        est = raw.get("est_snr_db")
        if not est:
            raise ConfigError("est_snr_db must be a nonempty list")
        est_snr = tuple(float(v) for v in est)
        w_raw = raw.get("weights")
        if w_raw is None:
            raise ConfigError("weights is required")
        w = np.asarray(w_raw, dtype=float)
        if w.ndim == 1:
            if w.shape[0] != n:
                raise ConfigError(f"weights must have length n_streams={n}")
            w = np.diag(w)
        elif w.shape != (n, n):
            raise ConfigError(f"weights must be length-{n} diagonal or {n}x{n}")
        draws = int(raw.get("n_channel_draws", 1000))
        symbols = int(raw.get("n_symbols", 1000))
        if draws < 1 or symbols < 1:
            raise ConfigError("n_channel_draws and n_symbols must be >= 1")
        algorithms = tuple(raw.get("algorithms", list(ALGORITHMS)))
        if not algorithms:
            raise ConfigError("algorithms must be nonempty")
        for alg in algorithms:
            if alg not in ALGORITHMS:
                raise ConfigError(
                    f"algorithms entry {alg!r} not in {sorted(ALGORITHMS)}"
                )
        p_s = float(raw.get("p_s", 1.0))
        p_r = float(raw.get("p_r", 1.0))
        if p_s <= 0 or p_r <= 0:
            raise ConfigError("p_s and p_r must be positive")
        workers = int(raw.get("workers", 1))
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        return cls(
            dims=dims,
            n_streams=n,
            alpha=alpha,
            data_snr_db=data_snr,
            est_snr_db=est_snr,
            weights=w,
            n_channel_draws=draws,
            n_symbols=symbols,
            seed=int(raw.get("seed", 0)),
            algorithms=algorithms,
            p_s=p_s,
            p_r=p_r,
            workers=workers,
        )

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError(f"config is not valid JSON: {err}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        """Fully resolved spec (defaults included) for provenance output."""
        return {
            "dims": list(self.dims),
            "n_streams": self.n_streams,
            "alpha": self.alpha,
            "data_snr_db": list(self.data_snr_db),
            "est_snr_db": list(self.est_snr_db),
            "weights": np.asarray(self.weights).tolist(),
            "n_channel_draws": self.n_channel_draws,
            "n_symbols": self.n_symbols,
            "seed": self.seed,
            "algorithms": list(self.algorithms),
            "p_s": self.p_s,
            "p_r": self.p_r,
            "workers": self.workers,
        }


@dataclass(frozen=True)
class ExperimentRecord:
    """Averages for one (sweep point, algorithm) cell.

    ``n_draws`` counts the draws included in the averages; failed design
    attempts are excluded and counted in ``n_failed``.  ``wmse_diff_se``
    is the standard error of the mean paired difference empirical -
    analytic (not part of the CSV contract, used by self-consistency
    checks).
    """

    est_snr_db: float
    algorithm: str
    wmse_analytic: float
    wmse_empirical: float
    ber: float
    n_draws: int
    n_failed: int
    seed: int
    wmse_diff_se: float = field(default=float("nan"), compare=False)


def system_config(spec: ExperimentSpec) -> SystemConfig:
    n_s, m_r, n_r, m_d = spec.dims
    return SystemConfig(
        n_s=n_s,
        m_r=m_r,
        n_r=n_r,
        m_d=m_d,
        n_streams=spec.n_streams,
        p_s=spec.p_s,
        p_r=spec.p_r,
        sigma1_sq=spec.p_s / 10.0 ** (spec.data_snr_db[0] / 10.0),
        sigma2_sq=spec.p_r / 10.0 ** (spec.data_snr_db[1] / 10.0),
        weight=spec.weights,
    )


def _draw_rng(seed: int, point: int, draw: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((seed & 0xFFFFFFFFFFFFFFFF, point, draw, stream))
    )


def _design_algorithm(algorithm: str, cfg: SystemConfig, know):
    if algorithm == "robust_full":
        return design(cfg, know).tx
    if algorithm == "robust_nopre":
        return design(cfg, know, DesignOptions(mode="relay_only")).tx
    if algorithm == "naive":
        return design(cfg, exact_knowledge(know.est_sr, know.est_rd)).tx
    raise ValueError(f"unknown algorithm {algorithm!r}")


def _qpsk_block(rng, n_streams: int, n_symbols: int):
    """Gray-coded unit-energy QPSK: independent sign bits on I and Q."""
    bits = rng.integers(0, 2, size=(2, n_streams, n_symbols))
    symbols = ((1 - 2 * bits[0]) + 1j * (1 - 2 * bits[1])) / np.sqrt(2.0)
    return bits, symbols


def _transmit(tx, truth, symbols, bits, noise1, noise2, weight):
    """Push one QPSK block through the true channels; per-draw averages."""
    x = truth.h_sr @ (tx.precoder @ symbols) + noise1
    y = truth.h_rd @ (tx.forward @ x) + noise2
    s_hat = tx.equalizer @ y
    err = s_hat - symbols
    wmse = float(
        np.mean(np.real(np.einsum("in,ij,jn->n", err.conj(), weight, err)))
    )
    detected = np.stack([s_hat.real < 0, s_hat.imag < 0])
    ber = float(np.mean(detected != bits))
    return wmse, ber


def _run_draw(spec: ExperimentSpec, cfg: SystemConfig, point: int, draw: int) -> dict:
    """Design every algorithm on one channel draw and simulate.

    All algorithms share the channel realization and the QPSK block, so
    comparisons are paired.  Returns algorithm -> (analytic, empirical,
    ber) or None on a design failure.
    """
    snr_est = 10.0 ** (spec.est_snr_db[point] / 10.0)
    know, truth = sample_scenario(
        cfg, snr_est, spec.alpha, _draw_rng(spec.seed, point, draw, 0)
    )
    rng_sym = _draw_rng(spec.seed, point, draw, 1)
    bits, symbols = _qpsk_block(rng_sym, cfg.n_streams, spec.n_symbols)
    noise1 = np.sqrt(cfg.sigma1_sq / 2.0) * (
        rng_sym.standard_normal((cfg.m_r, spec.n_symbols))
        + 1j * rng_sym.standard_normal((cfg.m_r, spec.n_symbols))
    )
    noise2 = np.sqrt(cfg.sigma2_sq / 2.0) * (
        rng_sym.standard_normal((cfg.m_d, spec.n_symbols))
        + 1j * rng_sym.standard_normal((cfg.m_d, spec.n_symbols))
    )
    out = {}
    for alg in spec.algorithms:
        try:
            tx = _design_algorithm(alg, cfg, know)
        except ConvergenceError:
            out[alg] = None
            continue
        analytic = weighted_mse(cfg, know, tx)
        empirical, ber = _transmit(
            tx, truth, symbols, bits, noise1, noise2, cfg.weight
        )
        out[alg] = (analytic, empirical, ber)
    return out


def _point_worker(args):
    spec, point, draw = args
    return _run_draw(spec, system_config(spec), point, draw)


def run_experiment(spec: ExperimentSpec) -> list[ExperimentRecord]:
    """Run the full sweep; one record per (sweep point, algorithm)."""
    cfg = system_config(spec)
    records = []
    for point in range(len(spec.est_snr_db)):
        if spec.workers > 1:
            jobs = [(spec, point, d) for d in range(spec.n_channel_draws)]
            with ProcessPoolExecutor(max_workers=spec.workers) as pool:
                draws = list(pool.map(_point_worker, jobs, chunksize=16))
        else:
            draws = [
                _run_draw(spec, cfg, point, d) for d in range(spec.n_channel_draws)
            ]
        for alg in spec.algorithms:
            rows = [d[alg] for d in draws if d[alg] is not None]
            n_failed = spec.n_channel_draws - len(rows)
            if rows:
                arr = np.asarray(rows)
                diff = arr[:, 1] - arr[:, 0]
                diff_se = (
                    float(np.std(diff, ddof=1) / np.sqrt(len(rows)))
                    if len(rows) > 1
                    else float("nan")
                )
                rec = ExperimentRecord(
                    est_snr_db=spec.est_snr_db[point],
                    algorithm=alg,
                    wmse_analytic=float(arr[:, 0].mean()),
                    wmse_empirical=float(arr[:, 1].mean()),
                    ber=float(arr[:, 2].mean()),
                    n_draws=len(rows),
                    n_failed=n_failed,
                    seed=spec.seed,
                    wmse_diff_se=diff_se,
                )
            else:
                rec = ExperimentRecord(
                    est_snr_db=spec.est_snr_db[point],
                    algorithm=alg,
                    wmse_analytic=float("nan"),
                    wmse_empirical=float("nan"),
                    ber=float("nan"),
                    n_draws=0,
                    n_failed=n_failed,
                    seed=spec.seed,
                )
            records.append(rec)
    return records


def _fmt(value: float) -> str:
    return format(float(value), ".12g")


def emit_csv(records, path, metadata: dict | None = None) -> None:
    """Write records as UTF-8 CSV sorted by (est_snr_db, algorithm).

    Floats carry 12 significant digits.  When ``metadata`` is given it is
    prepended as a single '#'-prefixed canonical-JSON comment line.
    """
    if not records:
        raise ValueError("records must be nonempty")
    lines = []
    if metadata is not None:
        lines.append(
            "# " + json.dumps(metadata, sort_keys=True, separators=(",", ":"))
        )
    lines.append(CSV_HEADER)
    for rec in sorted(records, key=lambda r: (r.est_snr_db, r.algorithm)):
        lines.append(
            ",".join(
                [
                    _fmt(rec.est_snr_db),
                    rec.algorithm,
                    _fmt(rec.wmse_analytic),
                    _fmt(rec.wmse_empirical),
                    _fmt(rec.ber),
                    str(rec.n_draws),
                    str(rec.n_failed),
                    str(rec.seed),
                ]
            )
        )
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as err:
        raise OSError(f"could not write CSV to {path}: {err}") from err


def _selftest_spec() -> ExperimentSpec:
    return ExperimentSpec(
        dims=(3, 3, 3, 3),
        n_streams=2,
        alpha=0.3,
        data_snr_db=(20.0, 20.0),
        est_snr_db=(10.0,),
        weights=np.diag([0.6, 0.4]),
        n_channel_draws=8,
        n_symbols=500,
        seed=7,
    )


def run_selftest() -> list[tuple[str, bool, str]]:
    """Small oracle-agreement suite; returns (name, passed, detail) rows."""
    from . import validate
    from .channel import sample_scenario as _scenario
    from .design import waterfill_kkt_residual, waterfill_relay
    from .mse import Transceiver

    results = []
    spec = _selftest_spec()
    cfg = system_config(spec)
    rng = np.random.default_rng(2024)
    know, _ = _scenario(cfg, 10.0, 0.3, rng)

    sol = design(cfg, know)
    analytic = sol.achieved_wmse
    est = validate.empirical_weighted_mse(cfg, know, sol.tx, 20000, 99)
    gap = abs(est.mean - analytic)
    results.append(
        (
            "analytic weighted MSE matches Monte-Carlo (3 std)",
            gap <= 3 * est.std_error,
            f"|{est.mean:.6g} - {analytic:.6g}| vs 3*{est.std_error:.2g}",
        )
    )

    direct = weighted_mse(cfg, know, sol.tx)
    rel = abs(analytic - direct) / max(abs(direct), 1e-300)
    results.append(
        (
            "residual form equals direct weighted MSE at the LMMSE equalizer",
            rel <= 1e-10,
            f"relative gap {rel:.3e}",
        )
    )

    worse = 0
    pert_rng = np.random.default_rng(5)
    for _ in range(20):
        delta = 1e-2 * (
            pert_rng.standard_normal(sol.tx.equalizer.shape)
            + 1j * pert_rng.standard_normal(sol.tx.equalizer.shape)
        )
        tx_pert = Transceiver(sol.tx.precoder, sol.tx.forward, sol.tx.equalizer + delta)
        if weighted_mse(cfg, know, tx_pert) < direct:
            worse += 1
    results.append(
        (
            "LMMSE equalizer beats random perturbations",
            worse == 0,
            f"{worse} of 20 perturbations improved the objective",
        )
    )

    power_p = float(np.real(np.trace(sol.tx.precoder @ sol.tx.precoder.conj().T)))
    results.append(
        (
            "designed source power sits on the budget",
            abs(power_p - cfg.p_s) <= 1e-9 * cfg.p_s,
            f"tr(P P^H) = {power_p:.12g}",
        )
    )

    f_alloc, mu_f = waterfill_relay(
        sol.alloc.p_alloc, sol.spectral.gains_sr, sol.spectral.gains_rd,
        np.diag(cfg.weight).real, cfg.p_r,
    )
    a = (sol.alloc.p_alloc * sol.spectral.gains_sr) ** 2
    coeffs = np.diag(cfg.weight).real * a / (1 + a)
    kkt = waterfill_kkt_residual(f_alloc**2, mu_f, coeffs, sol.spectral.gains_rd)
    results.append(
        ("water-filling KKT residual below 1e-8", kkt <= 1e-8, f"residual {kkt:.3e}")
    )

    sol2 = design(cfg, know)
    results.append(
        (
            "design is deterministic",
            np.array_equal(sol.tx.precoder, sol2.tx.precoder)
            and np.array_equal(sol.tx.forward, sol2.tx.forward),
            "re-ran the pipeline on identical inputs",
        )
    )

    records = run_experiment(spec)
    ok_records = all(r.n_draws > 0 and np.isfinite(r.wmse_analytic) for r in records)
    results.append(
        (
            "experiment harness produces finite records",
            ok_records,
            f"{len(records)} records",
        )
    )
    return results
