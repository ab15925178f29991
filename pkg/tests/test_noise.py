import numpy as np
import pytest
import scipy.sparse as sp
from scipy.special import ndtr

from mvn import MvnProblem, mvncdf
from noise import (SnmConstraintSystem, assemble_blocks, build_constraints, build_snm_system, constraint_frame,
                   eliminate_noncritical, pnmv, pnmv_mc, triplet_frame, violation_agreement)
from variation import ProcessingParams, TechnologyParams, derive_region_model

REDUNDANT_K = sp.csr_matrix(np.array([
    [1.0, -2.0, 0.0],
    [1.0, -3.0, 0.0],
    [2.0, -1.0, 0.0],
    [1.0, -2.0, 0.0],
    [0.0, 1.0, -5.0],
]))


def test_elimination_drops_duplicates_and_dominated_rows():
    kept, report = eliminate_noncritical(REDUNDANT_K)
    assert kept.tolist() == [2, 4]
    assert report.total == 5
    assert report.duplicates == 1
    assert report.dominated == 2
    assert report.support_groups == 2
    assert report.fraction_removed == pytest.approx(0.6)


def test_elimination_keeps_feasible_set_on_nonnegative_counts(tech):
    kept, _ = eliminate_noncritical(REDUNDANT_K)
    mismatches = violation_agreement(REDUNDANT_K, REDUNDANT_K[kept], ProcessingParams(), tech, trials=2000, seed=3)
    assert mismatches == 0


def test_chain_constraints(chain, tech):
    h, tags = build_constraints(chain, tech.snm_r, tech.v_dd)
    assert h.shape == (6, 6)
    assert [t.kind for t in tags] == ["SNMH", "SNML"] * 3
    assert sum(t.ideal_driver for t in tags) == 2
    first = h.toarray()[0]
    p1 = chain.transistor_index[(0, "P1")]
    n1 = chain.transistor_index[(0, "N1")]
    assert first[p1] == 1.0
    # primary inputs drive at the rails
    assert first[n1] == pytest.approx(-(10 ** 1.6))
    inner = next(i for i, t in enumerate(tags) if t.kind == "SNMH" and not t.ideal_driver)
    assert h.toarray()[inner].min() == pytest.approx(-15.849, abs=1e-3)


def test_chain_system_blocks(chain, tech):
    system = build_snm_system(chain, tech)
    assert system.report.kept == 6
    assert system.ideal_driver_constraints == 2
    assert len(system.blocks) == 3
    assert all(len(b.members) == 2 for b in system.blocks)
    np.testing.assert_allclose(system.b, -np.asarray(system.k_tilde.sum(axis=1)).ravel())
    full_cov = (system.k_tilde @ system.k_tilde.T).toarray()
    for a in system.blocks:
        for b in system.blocks:
            if a is not b:
                assert not full_cov[np.ix_(a.members, b.members)].any()


def test_unsplit_blocks_follow_placement_rows(mixed, tech):
    system = build_snm_system(mixed, tech, split_independent=False)
    assert sorted(b.row for b in system.blocks) == [0, 1]
    assert sum(len(b.members) for b in system.blocks) == system.report.kept


def test_flop_feedback_constraints(flop, tech):
    _, tags = build_constraints(flop, tech.snm_r, tech.v_dd)
    assert len(tags) == 16
    assert sum(t.feedback for t in tags) == 4


def _single_row_system(row=(1.0, 1.0, -3.0, -3.0)) -> SnmConstraintSystem:
    k = sp.csr_matrix(np.array([row]))
    kept, report = eliminate_noncritical(k)
    blocks = assemble_blocks(k[kept], np.zeros(1, dtype=np.int64))
    return SnmConstraintSystem(h=k, k=k, kept=kept, tags=[], blocks=blocks, report=report,
                               incidence=sp.identity(len(row), format="csr"))


def test_pnmv_two_region_inverter_constraint():
    system = _single_row_system((1.0, -15.849))
    (block,) = system.blocks
    assert block.bound[0] == pytest.approx(14.849)
    assert block.cov[0, 0] == pytest.approx(252.17, abs=0.01)
    assert pnmv(system, 4.752, 1.5792).value == pytest.approx(2.45e-3, rel=0.01)


def test_pnmv_four_region_constraint(tech):
    system = _single_row_system()
    region = derive_region_model(ProcessingParams(), tech)
    expected = 1.0 - ndtr(region.mu_r / region.sigma_r * 4.0 / np.sqrt(20.0))
    result = pnmv(system, region.mu_r, region.sigma_r)
    assert result.value == pytest.approx(expected, rel=1e-12)
    assert result.value == pytest.approx(3.56e-3, rel=0.01)


def test_pnmv_without_variation(chain, tech):
    system = build_snm_system(chain, tech)
    assert pnmv(system, tech.lambda_w, 0.0).value == 0.0
    empty = SnmConstraintSystem(h=sp.csr_matrix((0, 6)), k=sp.csr_matrix((0, 12)), kept=np.zeros(0, dtype=np.int64),
                                tags=[], blocks=[], report=system.report, incidence=chain.incidence())
    assert pnmv(empty, 4.0, 1.0).value == 0.0


def test_pnmv_grows_with_dispersion(chain):
    tech = TechnologyParams(snm_r=0.1)
    system = build_snm_system(chain, tech)
    values = []
    for idc in (0.1, 0.5, 1.0):
        region = derive_region_model(ProcessingParams(idc=idc), tech)
        values.append(pnmv(system, region.mu_r, region.sigma_r, seed=1).value)
    assert values[0] < values[1] < values[2]


@pytest.mark.parametrize("split", [False, True])
def test_block_pnmv_matches_full_covariance(mixed, split):
    tech = TechnologyParams(snm_r=0.1)
    system = build_snm_system(mixed, tech, split_independent=split)
    region = derive_region_model(ProcessingParams(idc=1.0), tech)
    blocked = pnmv(system, region.mu_r, region.sigma_r, seed=2, target_abs_error=1e-6)
    k = system.k_tilde
    problem = MvnProblem(cov=(k @ k.T).toarray(), upper=(region.mu_r / region.sigma_r) * system.b)
    full = mvncdf(problem, target_abs_error=1e-6, seed=2)
    assert len(system.blocks) > 1
    assert blocked.value > 0
    assert 1.0 - full.prob == pytest.approx(blocked.value, abs=max(1e-5, 3 * (full.error + blocked.error)))


def test_mc_agrees_with_analytic_pnmv(tech):
    system = _single_row_system()
    params = ProcessingParams()
    region = derive_region_model(params, tech)
    analytic = pnmv(system, region.mu_r, region.sigma_r).value
    trials = 100_000
    mc = pnmv_mc(system.k_tilde, params, tech, trials, seed=5)
    assert mc.trials == trials
    assert mc.low <= mc.estimate <= mc.high
    assert abs(mc.estimate - analytic) < 5 * np.sqrt(analytic * (1 - analytic) / trials)


def test_mc_excludes_count_failures(chain, tech):
    system = build_snm_system(chain, tech)
    params = ProcessingParams(idc=1.0, p_m=0.05, p_rs=0.6)
    mc = pnmv_mc(system.k_tilde, params, tech, 5000, seed=2, incidence=chain.incidence())
    assert mc.excluded > 0
    assert mc.trials + mc.excluded == 5000


def test_mc_is_worker_independent(chain, tech):
    system = build_snm_system(chain, TechnologyParams(snm_r=0.1))
    params = ProcessingParams(idc=0.8)
    a = pnmv_mc(system.k_tilde, params, tech, 3000, seed=7, discrete=True, workers=1)
    b = pnmv_mc(system.k_tilde, params, tech, 3000, seed=7, discrete=True, workers=3)
    assert a == b


def test_frames(chain, tech):
    system = build_snm_system(chain, tech)
    triplets = triplet_frame(system.k_tilde)
    assert list(triplets.columns) == ["row", "col", "value"]
    assert len(triplets) == system.k_tilde.nnz
    frame = constraint_frame(system, chain)
    assert len(frame) == 6
    assert frame["critical"].all()
    assert frame.loc[0, "driver"] is None
    assert frame.loc[2, "loader"] == "g1/s0"
