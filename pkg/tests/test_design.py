import numpy as np
import pytest
import scipy.linalg

from afrelay.channel import ChannelKnowledge, ErrorStats, estimation_stats
from afrelay.design import (
    AllocationState,
    ConvergenceError,
    DesignOptions,
    InfeasibleAllocationError,
    _enforce_product_ordering,
    assemble,
    design,
    iterate_allocations,
    solve_eta_p,
    spectral_decompose,
    waterfill_kkt_residual,
    waterfill_relay,
    waterfill_source,
    weight_eigensystem,
)
from afrelay.linalg import NotPSDError, svd_ordered
from afrelay.mse import tilde_maps, weighted_mse
from conftest import make_config, make_instance, rand_complex


def saturated_multiplier_oracle(weights, budget, iters=200):
    """Solve sum_i (sqrt(w_i) t - 1)^+ = budget for t = 1/sqrt(mu) by
    bisection, assuming every stream stays active."""
    w = np.asarray(weights, float)
    lo, hi = 0.0, 1e9
    for _ in range(iters):
        t = 0.5 * (lo + hi)
        if np.sum(np.sqrt(w) * t - 1.0) > budget:
            hi = t
        else:
            lo = t
    return 0.5 * (lo + hi)


class TestWeightEigensystem:
    def test_paper_weight_matrix(self):
        e = weight_eigensystem(np.diag([0.3, 0.3, 0.2, 0.2]))
        assert np.allclose(e.values, [0.3, 0.3, 0.2, 0.2])
        assert np.array_equal(e.vectors, np.eye(4))

    def test_identity(self):
        e = weight_eigensystem(np.eye(3))
        assert np.array_equal(e.values, np.ones(3))
        assert np.array_equal(e.vectors, np.eye(3))

    def test_random_psd_reconstruction(self):
        rng = np.random.default_rng(0)
        a = rand_complex(rng, 4, 4)
        w = a @ a.conj().T
        e = weight_eigensystem(w)
        assert np.linalg.norm(e.reconstruct() - w) <= 1e-9 * np.linalg.norm(w)

    def test_rejects_indefinite(self):
        with pytest.raises(NotPSDError):
            weight_eigensystem(np.diag([1.0, -0.3]))


class TestSpectralDecompose:
    def test_perfect_csi_reduces_to_scaling(self):
        cfg, _, _ = make_instance(1)
        rng = np.random.default_rng(2)
        h_sr = rand_complex(rng, cfg.m_r, cfg.n_s)
        h_rd = rand_complex(rng, cfg.m_d, cfg.n_r)
        from afrelay.channel import exact_knowledge

        know = exact_knowledge(h_sr, h_rd)
        sp = spectral_decompose(cfg, know)
        expected_sr = np.linalg.svd(h_sr, compute_uv=False) / np.sqrt(cfg.sigma1_sq)
        expected_rd = np.linalg.svd(h_rd, compute_uv=False) / np.sqrt(cfg.sigma2_sq)
        assert np.allclose(sp.gains_sr, expected_sr[: cfg.n_streams])
        assert np.allclose(sp.gains_rd, expected_rd[: cfg.n_streams])

    def test_scalar_column_covariance_scales_gains(self):
        cfg = make_config()
        rng = np.random.default_rng(3)
        h_sr = rand_complex(rng, 4, 4)
        h_rd = rand_complex(rng, 4, 4)
        psi = 0.2
        know = ChannelKnowledge(
            h_sr,
            h_rd,
            ErrorStats(np.eye(4), psi * np.eye(4)),
            ErrorStats(np.zeros((4, 4)), np.zeros((4, 4))),
        )
        sp = spectral_decompose(cfg, know)
        expected = np.linalg.svd(h_sr, compute_uv=False) / np.sqrt(
            cfg.p_s * psi + cfg.sigma1_sq
        )
        assert np.allclose(sp.gains_sr, expected)

    def test_gains_are_nonincreasing_with_stream_count(self):
        cfg, know, _ = make_instance(4)
        sp = spectral_decompose(cfg, know)
        assert sp.gains_sr.shape == (cfg.n_streams,)
        assert sp.gains_rd.shape == (cfg.n_streams,)
        assert np.all(np.diff(sp.gains_sr) <= 0)
        assert np.all(np.diff(sp.gains_rd) <= 0)

    def test_rejects_general_row_covariance(self):
        cfg = make_config()
        rng = np.random.default_rng(5)
        corr = np.diag([1.0, 0.5, 1.0, 1.0])
        know = ChannelKnowledge(
            rand_complex(rng, 4, 4),
            rand_complex(rng, 4, 4),
            ErrorStats(corr, 0.1 * np.eye(4)),
            ErrorStats(0.1 * np.eye(4), np.eye(4)),
        )
        with pytest.raises(ValueError):
            spectral_decompose(cfg, know)


class TestWaterfill:
    def test_single_stream_takes_full_budget(self):
        f, _ = waterfill_relay(
            np.array([1.0]), np.array([2.0]), np.array([1.5]), np.array([1.0]), 3.0
        )
        assert np.isclose(f[0] ** 2, 3.0)

    def test_symmetric_split_is_uniform(self):
        n = 4
        f, _ = waterfill_relay(
            np.full(n, 1.0), np.full(n, 2.0), np.full(n, 2.0), np.full(n, 0.5), 2.0
        )
        assert np.allclose(f**2, 0.5)

    def test_two_stream_case_matches_bisection_oracle(self):
        # saturated source factor, unit second-hop gains, w = [2, 1]:
        # the multiplier equation reduces to (sqrt(2) + 1) t = budget + 2
        weights = np.array([2.0, 1.0])
        t = saturated_multiplier_oracle(weights, 2.0)
        expected = np.sqrt(weights) * t - 1.0
        assert np.allclose(expected, [1.3431, 0.6569], atol=1e-4)
        f, mu = waterfill_relay(
            np.array([1e12, 1e12]),
            np.array([1.0, 1.0]),
            np.array([1.0, 1.0]),
            weights,
            2.0,
        )
        assert np.allclose(f**2, expected, rtol=1e-4)
        assert np.isclose(1.0 / np.sqrt(mu), t, rtol=1e-4)

    def test_budget_met_exactly(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n = int(rng.integers(1, 6))
            p = rng.uniform(0.1, 2.0, n)
            gsr = np.sort(rng.uniform(0.1, 20.0, n))[::-1]
            grd = np.sort(rng.uniform(0.1, 20.0, n))[::-1]
            w = np.sort(rng.uniform(0.05, 1.0, n))[::-1]
            budget = float(rng.uniform(0.5, 4.0))
            f, mu = waterfill_relay(p, gsr, grd, w, budget)
            assert abs(np.sum(f**2) - budget) <= 1e-9 * budget
            a = (p * gsr) ** 2
            res = waterfill_kkt_residual(f**2, mu, w * a / (1 + a), grd)
            assert res <= 1e-8

    def test_weak_stream_gets_clamped(self):
        f, _ = waterfill_relay(
            np.array([1.0, 1.0]),
            np.array([5.0, 5.0]),
            np.array([10.0, 0.01]),
            np.array([1.0, 1.0]),
            0.1,
        )
        assert f[1] == 0.0
        assert np.isclose(f[0] ** 2, 0.1)

    def test_all_zero_gains_is_infeasible(self):
        with pytest.raises(InfeasibleAllocationError):
            waterfill_relay(
                np.array([1.0, 1.0]),
                np.array([1.0, 1.0]),
                np.array([0.0, 0.0]),
                np.array([1.0, 1.0]),
                1.0,
            )

    def test_source_side_mirrors_relay_side(self):
        weights = np.array([2.0, 1.0])
        t = saturated_multiplier_oracle(weights, 2.0)
        p, _ = waterfill_source(
            np.array([1e12, 1e12]),
            np.array([1.0, 1.0]),
            np.array([1.0, 1.0]),
            weights,
            2.0,
        )
        assert np.allclose(p**2, np.sqrt(weights) * t - 1.0, rtol=1e-4)


class TestIterateAllocations:
    def test_single_stream_hits_both_budgets(self):
        st = iterate_allocations(
            np.array([3.0]), np.array([2.0]), np.array([1.0]), 1.5, 2.5
        )
        assert np.isclose(st.p_alloc[0] ** 2, 1.5)
        assert np.isclose(st.f_alloc[0] ** 2, 2.5)
        assert st.converged

    def test_symmetric_problem_stays_uniform(self):
        n = 4
        st = iterate_allocations(
            np.full(n, 3.0), np.full(n, 3.0), np.full(n, 0.25), 1.0, 1.0
        )
        assert np.allclose(st.p_alloc**2, 0.25)
        assert np.allclose(st.f_alloc**2, 0.25)

    def test_objective_trace_monotone_and_kkt(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n = int(rng.integers(2, 5))
            gsr = np.sort(rng.uniform(0.2, 30.0, n))[::-1]
            grd = np.sort(rng.uniform(0.2, 30.0, n))[::-1]
            w = np.sort(rng.uniform(0.05, 1.0, n))[::-1]
            st = iterate_allocations(gsr, grd, w, 1.0, 1.0)
            tr = st.objective_trace
            assert not np.any(np.diff(tr) > 1e-12 * np.abs(tr[:-1]) + 1e-300)
            assert tr[-1] <= tr[0]
            a = (st.p_alloc * gsr) ** 2
            b = (st.f_alloc * grd) ** 2
            assert waterfill_kkt_residual(st.f_alloc**2, st.mu_f, w * a / (1 + a), grd) <= 1e-8
            assert waterfill_kkt_residual(st.p_alloc**2, st.mu_p, w * b / (1 + b), gsr) <= 1e-8

    def test_non_convergence_raises_with_trace(self):
        with pytest.raises(ConvergenceError) as err:
            iterate_allocations(
                np.array([5.0, 1.0]),
                np.array([4.0, 2.0]),
                np.array([1.0, 0.5]),
                1.0,
                1.0,
                tol=0.0,
                max_iters=1,
            )
        assert err.value.objective_trace.shape == (2,)

    def test_ordering_guard_resorts_tied_blocks(self):
        gains = np.array([2.0, 2.0])
        weights = np.array([1.0, 1.0])
        bad = AllocationState(
            p_alloc=np.array([0.4, 0.9]),
            f_alloc=np.array([0.3, 0.8]),
            mu_p=1.0,
            mu_f=1.0,
            eta_p=float("nan"),
            objective_trace=np.asarray([1.0]),
            n_iters=1,
            converged=True,
        )
        fixed = _enforce_product_ordering(bad, gains, gains, weights, 1.0, 1.0)
        a = (fixed.p_alloc * gains) ** 2
        b = (fixed.f_alloc * gains) ** 2
        assert np.all(np.diff(a) <= 1e-12)
        assert np.all(np.diff(b) <= 1e-12)
        assert np.isclose(np.sum(fixed.p_alloc**2), 1.0)
        assert np.isclose(np.sum(fixed.f_alloc**2), 1.0)


class TestSolveEtaP:
    def test_zero_error_covariance_gives_noise_variance(self):
        cfg, _, _ = make_instance(8)
        from afrelay.channel import exact_knowledge

        rng = np.random.default_rng(9)
        know = exact_knowledge(rand_complex(rng, 4, 4), rand_complex(rng, 4, 4))
        sp = spectral_decompose(cfg, know)
        eta = solve_eta_p(
            np.full(4, 0.5), sp, np.zeros((4, 4)), cfg.p_s, cfg.sigma1_sq
        )
        assert np.isclose(eta, cfg.sigma1_sq)

    def test_scalar_covariance_collapses_in_closed_form(self):
        cfg = make_config()
        psi = 0.07
        rng = np.random.default_rng(10)
        know = ChannelKnowledge(
            rand_complex(rng, 4, 4),
            rand_complex(rng, 4, 4),
            ErrorStats(np.eye(4), psi * np.eye(4)),
            ErrorStats(np.zeros((4, 4)), np.zeros((4, 4))),
        )
        sp = spectral_decompose(cfg, know)
        p_alloc = np.sqrt(cfg.p_s) * np.array([0.6, 0.5, 0.5, np.sqrt(1 - 0.86)])
        assert np.isclose(np.sum(p_alloc**2), cfg.p_s)
        eta = solve_eta_p(p_alloc, sp, psi * np.eye(4), cfg.p_s, cfg.sigma1_sq)
        assert np.isclose(eta, cfg.p_s * psi + cfg.sigma1_sq)

    def test_fixed_point_residual_after_assembly(self):
        for seed in (11, 12, 13):
            cfg, know, _ = make_instance(seed, est_snr_db=6.0)
            sol = design(cfg, know)
            p = sol.tx.precoder
            psi_eff = sol.spectral.psi_eff
            direct = float(
                np.real(np.trace(p @ p.conj().T @ psi_eff))
            ) + cfg.sigma1_sq
            assert abs(sol.alloc.eta_p - direct) <= 1e-9 * sol.alloc.eta_p


class TestAssemble:
    def test_single_active_stream_gives_rank_one(self):
        cfg, know, _ = make_instance(14)
        sp = spectral_decompose(cfg, know)
        p_alloc = np.array([np.sqrt(cfg.p_s), 0.0, 0.0, 0.0])
        f_alloc = np.array([np.sqrt(cfg.p_r), 0.0, 0.0, 0.0])
        eta = solve_eta_p(p_alloc, sp, sp.psi_eff, cfg.p_s, cfg.sigma1_sq)
        alloc = AllocationState(
            p_alloc=p_alloc,
            f_alloc=f_alloc,
            mu_p=float("nan"),
            mu_f=float("nan"),
            eta_p=eta,
            objective_trace=np.asarray([1.0]),
            n_iters=1,
            converged=True,
        )
        sol = assemble(cfg, know, sp, alloc)
        assert np.linalg.matrix_rank(sol.tx.precoder, tol=1e-9) == 1
        assert np.linalg.matrix_rank(sol.tx.forward, tol=1e-9) == 1

    def test_power_constraints_hold_with_equality(self):
        from afrelay.mse import second_order_stats

        for seed in (15, 16):
            cfg, know, _ = make_instance(seed)
            sol = design(cfg, know)
            p = sol.tx.precoder
            assert abs(np.real(np.trace(p @ p.conj().T)) - cfg.p_s) <= 1e-9 * cfg.p_s
            so = second_order_stats(cfg, know, p, sol.tx.forward)
            relay_power = np.real(
                np.trace(sol.tx.forward @ so.r_x @ sol.tx.forward.conj().T)
            )
            assert abs(relay_power - cfg.p_r) <= 1e-9 * cfg.p_r

    def test_residual_matches_direct_evaluation(self):
        cfg, know, _ = make_instance(17)
        sol = design(cfg, know)
        direct = weighted_mse(cfg, know, sol.tx)
        assert abs(sol.achieved_wmse - direct) <= 1e-9 * direct


class TestDesign:
    def test_deterministic(self):
        cfg, know, _ = make_instance(18)
        a = design(cfg, know)
        b = design(cfg, know)
        assert a.tx.precoder.tobytes() == b.tx.precoder.tobytes()
        assert a.tx.forward.tobytes() == b.tx.forward.tobytes()
        assert a.tx.equalizer.tobytes() == b.tx.equalizer.tobytes()

    def test_final_scalar_objective_equals_achieved_wmse(self):
        cfg, know, _ = make_instance(19)
        sol = design(cfg, know)
        assert np.isclose(sol.alloc.objective_trace[-1], sol.achieved_wmse, rtol=1e-8)

    def test_m_matrix_eigen_structure(self):
        cfg, know, _ = make_instance(20)
        sol = design(cfg, know)
        sp = sol.spectral
        ft = sol.tilde_forward
        hft = know.est_rd @ ft
        m_direct = (
            hft.conj().T
            @ np.linalg.inv(hft @ hft.conj().T + sp.k2_const)
            @ hft
        )
        u_sr_n = sp.first_hop.left[:, : cfg.n_streams]
        prod = (sol.alloc.f_alloc * sp.gains_rd) ** 2
        lam_m = 1.0 - 1.0 / (1.0 + prod)
        m_struct = (u_sr_n * lam_m) @ u_sr_n.conj().T
        assert np.linalg.norm(m_direct - m_struct) <= 1e-8 * max(
            np.linalg.norm(m_direct), 1e-300
        )

    def test_right_singular_vectors_align_with_weight_basis(self):
        from afrelay.linalg import herm_sqrt

        for seed in (21, 22, 23):
            cfg, know, _ = make_instance(seed)
            sol = design(cfg, know)
            maps = tilde_maps(cfg, know, sol.tx.precoder)
            a_mat = (
                maps.whitened_source
                @ know.est_sr
                @ sol.tx.precoder
                @ herm_sqrt(cfg.weight)
            )
            a_svd = svd_ordered(a_mat)
            u_w = weight_eigensystem(cfg.weight).vectors
            values = a_svd.values
            scale = max(values[0], 1e-300)
            start = 0
            while start < len(values):
                stop = start + 1
                while stop < len(values) and values[start] - values[stop] <= 1e-6 * scale:
                    stop += 1
                angles = scipy.linalg.subspace_angles(
                    a_svd.right[:, start:stop], u_w[:, start:stop]
                )
                assert np.max(angles) <= 1e-6
                start = stop

    def test_relay_only_perfect_csi_diagonalizes_both_hops(self):
        from afrelay.channel import exact_knowledge

        cfg = make_config(weight=np.eye(4))
        rng = np.random.default_rng(24)
        know = exact_knowledge(rand_complex(rng, 4, 4), rand_complex(rng, 4, 4))
        sol = design(cfg, know, DesignOptions(mode="relay_only"))
        sp = sol.spectral
        n = cfg.n_streams
        cascade = know.est_rd @ sol.tx.forward @ know.est_sr @ sol.tx.precoder
        core = (
            sp.second_hop.left[:, :n].conj().T
            @ sp.whiten_rd
            @ cascade
            @ sp.first_hop.right[:, :n]
        )
        offdiag = core - np.diag(np.diag(core))
        assert np.linalg.norm(offdiag) <= 1e-8 * np.linalg.norm(core)
        # the forward matrix itself receives along Usr and transmits along Vrd
        f_core = sp.second_hop.right[:, :n].conj().T @ sol.tx.forward @ sp.first_hop.left[:, :n]
        f_off = f_core - np.diag(np.diag(f_core))
        assert np.linalg.norm(f_off) <= 1e-8 * np.linalg.norm(f_core)

    def test_noiseless_identity_second_hop_reduces_to_source_waterfilling(self):
        cfg = make_config(dims=(4, 4, 4, 4), snr2_db=120.0)
        rng = np.random.default_rng(25)
        stats_sr, _ = estimation_stats(10.0, 0.3, 4, 4, 4, 4)
        know = ChannelKnowledge(
            rand_complex(rng, 4, 4),
            np.eye(4),
            stats_sr,
            ErrorStats(np.zeros((4, 4)), np.zeros((4, 4))),
        )
        sol = design(cfg, know)
        sp = sol.spectral
        w = weight_eigensystem(cfg.weight).values
        # relay factor saturates, so the source allocation alone decides p
        p_direct, _ = waterfill_source(
            np.full(4, 1e9), sp.gains_sr, sp.gains_rd, w, cfg.p_s
        )
        assert np.allclose(sol.alloc.p_alloc, p_direct, rtol=1e-5, atol=1e-8)

    def test_continuity_to_naive_design(self):
        from afrelay.channel import exact_knowledge

        cfg, know, _ = make_instance(26)
        eps = 1e-4
        scaled = ChannelKnowledge(
            know.est_sr,
            know.est_rd,
            know.stats_sr.scaled(eps),
            know.stats_rd.scaled(eps),
        )
        sol_eps = design(cfg, scaled)
        sol_zero = design(cfg, exact_knowledge(know.est_sr, know.est_rd))
        assert abs(sol_eps.achieved_wmse - sol_zero.achieved_wmse) < 1e-3

    def test_robust_beats_naive_under_true_statistics(self):
        from afrelay.channel import exact_knowledge

        for seed in (27, 28, 29, 30):
            cfg, know, _ = make_instance(seed, est_snr_db=8.0)
            robust = design(cfg, know)
            naive = design(cfg, exact_knowledge(know.est_sr, know.est_rd))
            naive_actual = weighted_mse(cfg, know, naive.tx)
            assert robust.achieved_wmse <= naive_actual + 1e-12

    def test_joint_beats_relay_only(self):
        for seed in (31, 32):
            cfg, know, _ = make_instance(seed)
            joint = design(cfg, know)
            nopre = design(cfg, know, DesignOptions(mode="relay_only"))
            assert joint.achieved_wmse <= nopre.achieved_wmse + 1e-12

    def test_relay_only_meets_power_budgets(self):
        from afrelay.mse import second_order_stats

        cfg, know, _ = make_instance(33)
        sol = design(cfg, know, DesignOptions(mode="relay_only"))
        p = sol.tx.precoder
        assert np.allclose(p, np.sqrt(cfg.p_s / 4) * np.eye(4))
        so = second_order_stats(cfg, know, p, sol.tx.forward)
        relay_power = np.real(np.trace(sol.tx.forward @ so.r_x @ sol.tx.forward.conj().T))
        assert abs(relay_power - cfg.p_r) <= 1e-8 * cfg.p_r
        direct = weighted_mse(cfg, know, sol.tx)
        assert abs(sol.achieved_wmse - direct) <= 1e-9 * direct

    def test_rectangular_antenna_configuration(self):
        from afrelay.mse import second_order_stats

        cfg, know, _ = make_instance(
            36, dims=(5, 4, 3, 4), n_streams=2, weight=np.diag([0.6, 0.4])
        )
        for mode in ("joint", "relay_only"):
            sol = design(cfg, know, DesignOptions(mode=mode))
            assert sol.tx.precoder.shape == (5, 2)
            assert sol.tx.forward.shape == (3, 4)
            assert sol.tx.equalizer.shape == (2, 4)
            p = sol.tx.precoder
            assert abs(np.real(np.trace(p @ p.conj().T)) - cfg.p_s) <= 1e-8 * cfg.p_s
            so = second_order_stats(cfg, know, p, sol.tx.forward)
            relay = np.real(np.trace(sol.tx.forward @ so.r_x @ sol.tx.forward.conj().T))
            assert abs(relay - cfg.p_r) <= 1e-8 * cfg.p_r
            assert abs(sol.achieved_wmse - weighted_mse(cfg, know, sol.tx)) <= 1e-9

    def test_mismatched_knowledge_shapes_rejected(self):
        cfg, _, _ = make_instance(37)
        _, wrong_know, _ = make_instance(38, dims=(3, 3, 3, 3), n_streams=3,
                                         weight=np.eye(3))
        with pytest.raises(ValueError):
            design(cfg, wrong_know)

    def test_restarts_never_worsen_the_objective(self):
        cfg, know, _ = make_instance(34)
        base = design(cfg, know)
        multi = design(cfg, know, DesignOptions(restarts=8, restart_seed=1))
        assert multi.achieved_wmse <= base.achieved_wmse + 1e-12

    def test_unknown_mode_rejected(self):
        cfg, know, _ = make_instance(35)
        with pytest.raises(ValueError):
            design(cfg, know, DesignOptions(mode="hybrid"))
