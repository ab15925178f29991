"""Nominal nonlinear STA, linearization, and factored Monte-Carlo delay/energy evaluation.

Arc i is logic stage i of a PlacedCircuit (stages are stored in topological
order). Per trial j, with region counts N[:, j]:

    C_Tot = A_CLoad N + b_CLoad        I_Drive = A_IDrive N + b_IDrive
    d     = V_DD C_Tot / I_Drive + d_Fix

Writing N = μ_R 1 + σ_R X, every product without μ_R or σ_R is computed once
(FactoredDelayModel) and new processing parameters only cost elementwise work.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

from errors import InsufficientTrialsError, NumericalError
from variation import count_failure_margin, gaussian_count_failures, trial_blocks

if TYPE_CHECKING:
    from circuit import PlacedCircuit

logger = logging.getLogger(__name__)

MIN_SURVIVING_TRIALS = 100
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class StageCoefficients:
    """Affine pieces of the nonlinear stage model; i1 carries the slew-dependent current."""

    a_cload: sp.csr_matrix
    b_cload: np.ndarray
    a_i1: sp.csr_matrix
    b_i1: np.ndarray
    a_i2: sp.csr_matrix
    b_i2: np.ndarray
    d_fix: np.ndarray

    @property
    def m(self) -> int:
        return self.a_cload.shape[0]

    def evaluate(self, n: np.ndarray, v_dd: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        q = v_dd * (self.a_cload @ n + _col(self.b_cload, n))
        i1 = self.a_i1 @ n + _col(self.b_i1, n)
        i2 = self.a_i2 @ n + _col(self.b_i2, n)
        return np.asarray(q), np.asarray(i1), np.asarray(i2)


def _col(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    return v[:, None] if like.ndim == 2 else v


def stage_coefficients(circuit: "PlacedCircuit") -> StageCoefficients:
    m, t = len(circuit.stages), len(circuit.transistors)
    group_rows, group_cols, group_vals = [], [], []
    all_rows, all_cols, all_vals = [], [], []
    c_par, i1, i2 = np.zeros(m), np.zeros(m), np.zeros(m)
    b_cload, b_i1, b_i2, d_fix = np.zeros(m), np.zeros(m), np.zeros(m), np.zeros(m)
    for site in circuit.stages:
        i = site.index
        inp, case = circuit.timing_case(i)
        arc = site.stage.arc_for(inp)
        # drive is the mean of the pull-up and pull-down group counts
        for name in case.p_group + case.n_group:
            group_rows.append(i)
            group_cols.append(circuit.transistor_index[(i, name)])
            group_vals.append(0.5)
        for idx in circuit.stage_transistors[i]:
            all_rows.append(i)
            all_cols.append(idx)
            all_vals.append(1.0)
        c_par[i], i1[i], i2[i] = arc.c_par_per_cnt, arc.i1_per_cnt, arc.i2_per_cnt
        b_cload[i] = arc.c_par_fixed + circuit.load_capacitance(i)
        b_i1[i], b_i2[i] = arc.i1_fixed, arc.i2_fixed
        d_fix[i] = circuit.fixed_delay(i)

    b_matrix = circuit.incidence()
    groups = sp.csr_matrix((group_vals, (group_rows, group_cols)), shape=(m, t)) @ b_matrix
    members = sp.csr_matrix((all_vals, (all_rows, all_cols)), shape=(m, t)) @ b_matrix
    return StageCoefficients(
        a_cload=sp.csr_matrix(sp.diags(c_par) @ members),
        b_cload=b_cload,
        a_i1=sp.csr_matrix(sp.diags(i1) @ groups),
        b_i1=b_i1,
        a_i2=sp.csr_matrix(sp.diags(i2) @ groups),
        b_i2=b_i2,
        d_fix=d_fix,
    )


def solve_stage_delay(q, i1, i2, t_in):
    """Solve d = Q / (i1 min(2d/t_in, 1) + i2) in closed form.

    The fast branch d = Q/(i1 + i2) holds when 2d/t_in >= 1; otherwise d is the
    positive root of (2 i1/t_in) d² + i2 d - Q = 0, which always lies below t_in/2.
    """
    q, i1, i2, t_in = (np.asarray(v, dtype=float) for v in np.broadcast_arrays(q, i1, i2, t_in))
    with np.errstate(divide="ignore", invalid="ignore"):
        fast = q / (i1 + i2)
        a = np.where(t_in > 0, 2.0 * i1 / np.where(t_in > 0, t_in, 1.0), 0.0)
        root = 2.0 * q / (i2 + np.sqrt(i2 * i2 + 4.0 * a * q))
    use_fast = (t_in <= 0) | (2.0 * fast >= t_in)
    return np.where(use_fast, fast, root)


def frozen_slew_factor(d: np.ndarray, t_in: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(t_in > 0, np.minimum(2.0 * d / np.where(t_in > 0, t_in, 1.0), 1.0), 1.0)


def longest_paths(preds: Sequence[np.ndarray], d: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Topological longest path over every column of D.

    Returns per-trial circuit delay, the end arc, and the arg-max predecessor of
    every arc (-1 at sources); ties go to the lowest arc index.
    """
    squeeze = d.ndim == 1
    d = d[:, None] if squeeze else d
    m, n = d.shape
    arrival = np.empty((m, n))
    argpred = np.full((m, n), -1, dtype=np.int64)
    cols = np.arange(n)
    for i in range(m):
        p = preds[i]
        if len(p):
            incoming = arrival[p]
            k = incoming.argmax(axis=0)
            argpred[i] = p[k]
            arrival[i] = incoming[k, cols] + d[i]
        else:
            arrival[i] = d[i]
    end = arrival.argmax(axis=0)
    total = arrival[end, cols]
    if squeeze:
        return total[0], end[0], argpred[:, 0]
    return total, end, argpred


def critical_path_matrix(end: np.ndarray, argpred: np.ndarray) -> sp.csr_matrix:
    """Sparse m × n indicator of one recorded critical path per trial."""
    m, n = argpred.shape
    rows, cols = [], []
    cur = end.copy()
    active = np.arange(n)
    while active.size:
        rows.append(cur)
        cols.append(active)
        nxt = argpred[cur, active]
        keep = nxt >= 0
        cur, active = nxt[keep], active[keep]
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    return sp.csr_matrix((np.ones(rows.size, dtype=bool), (rows, cols)), shape=(m, n))


@dataclass(frozen=True)
class NominalTiming:
    delays: np.ndarray
    slews: np.ndarray
    t_nom: float
    counts_per_region: float


def nominal_sta_nonlinear(circuit: "PlacedCircuit", coeffs: StageCoefficients, v_dd: float,
                          counts_per_region: float | None = None) -> NominalTiming:
    counts = circuit.nominal_count if counts_per_region is None else counts_per_region
    n = np.full(circuit.n_regions, counts, dtype=float)
    q, i1, i2 = coeffs.evaluate(n, v_dd)
    if ((i1 + i2) <= 0).any():
        bad = [circuit.stages[i].label for i in np.flatnonzero((i1 + i2) <= 0)[:5]]
        raise NumericalError(f"nonpositive nominal drive current at {bad}")

    delays, slews = np.zeros(coeffs.m), np.zeros(coeffs.m)
    for i, p in enumerate(circuit.arc_preds):
        t_in = 2.0 * delays[p].max() if len(p) else 0.0
        if circuit.reads_primary_input(i):
            t_in = max(t_in, circuit.netlist.input_slew)
        slews[i] = t_in
        delays[i] = solve_stage_delay(q[i], i1[i], i2[i], t_in)
    if not np.isfinite(delays).all():
        raise NumericalError("nonlinear delay model has no self-consistent branch")
    t_nom, _, _ = longest_paths(circuit.arc_preds, delays + coeffs.d_fix)
    return NominalTiming(delays=delays, slews=slews, t_nom=float(t_nom), counts_per_region=counts)


def nonlinear_path_delays(circuit: "PlacedCircuit", coeffs: StageCoefficients, n: np.ndarray,
                          v_dd: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-trial nonlinear STA with slews propagated per trial; returns (delays, count-failed)."""
    q, i1, i2 = coeffs.evaluate(n, v_dd)
    failed = ((i1 + i2) <= 0).any(axis=0) | (q < 0).any(axis=0)
    failed |= (np.asarray(circuit.incidence() @ n) <= 0).any(axis=0)
    trials = n.shape[1]
    d = np.zeros((coeffs.m, trials))
    for i, p in enumerate(circuit.arc_preds):
        t_in = 2.0 * d[p].max(axis=0) if len(p) else np.zeros(trials)
        if circuit.reads_primary_input(i):
            t_in = np.maximum(t_in, circuit.netlist.input_slew)
        d[i] = solve_stage_delay(q[i], i1[i], i2[i], t_in)
    d[:, failed] = 0.0
    total, _, _ = longest_paths(circuit.arc_preds, d + coeffs.d_fix[:, None])
    return total, failed


@dataclass(frozen=True)
class AffineCircuitModel:
    a_cload: sp.csr_matrix
    b_cload: np.ndarray
    a_idrive: sp.csr_matrix
    b_idrive: np.ndarray
    d_fix: np.ndarray

    @property
    def m(self) -> int:
        return self.a_cload.shape[0]


def linearize(coeffs: StageCoefficients, nominal: NominalTiming) -> AffineCircuitModel:
    f = frozen_slew_factor(nominal.delays, nominal.slews)
    model = AffineCircuitModel(
        a_cload=coeffs.a_cload,
        b_cload=coeffs.b_cload,
        a_idrive=sp.csr_matrix(sp.diags(f) @ coeffs.a_i1 + coeffs.a_i2),
        b_idrive=f * coeffs.b_i1 + coeffs.b_i2,
        d_fix=coeffs.d_fix,
    )
    current = nominal.counts_per_region * np.asarray(model.a_idrive.sum(axis=1)).ravel() + model.b_idrive
    if (current <= 0).any():
        raise NumericalError("linearized nominal drive current must be strictly positive")
    return model


@dataclass(frozen=True)
class FactoredDelayModel:
    q_mc: np.ndarray
    q_exp: np.ndarray
    q_fix: np.ndarray
    i_mc: np.ndarray
    i_exp: np.ndarray
    i_fix: np.ndarray
    d_fix: np.ndarray
    x: np.ndarray
    q_mc_mean: np.ndarray
    count_margin: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.x.shape[1]


def precompute_factored(model: AffineCircuitModel, x: np.ndarray, v_dd: float,
                        incidence: sp.spmatrix | None = None, workers: int = 1) -> FactoredDelayModel:
    def block(b, start, stop):
        xb = x[:, start:stop]
        return v_dd * np.asarray(model.a_cload @ xb), np.asarray(model.a_idrive @ xb)

    blocks = trial_blocks(x.shape[1])
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(lambda blk: block(*blk), blocks))
    else:
        parts = [block(*blk) for blk in blocks]
    q_mc = np.hstack([p[0] for p in parts])
    i_mc = np.hstack([p[1] for p in parts])
    ones = np.ones(x.shape[0])
    return FactoredDelayModel(
        q_mc=q_mc,
        q_exp=v_dd * np.asarray(model.a_cload @ ones),
        q_fix=v_dd * model.b_cload,
        i_mc=i_mc,
        i_exp=np.asarray(model.a_idrive @ ones),
        i_fix=model.b_idrive,
        d_fix=model.d_fix,
        x=x,
        q_mc_mean=q_mc.mean(axis=1),
        count_margin=None if incidence is None else count_failure_margin(incidence, x),
    )


@dataclass(frozen=True)
class DelayEvaluation:
    d: np.ndarray
    failed: np.ndarray


def evaluate_delays(fdm: FactoredDelayModel, mu_r: float, sigma_r: float) -> DelayEvaluation:
    num = sigma_r * fdm.q_mc + (mu_r * fdm.q_exp + fdm.q_fix)[:, None]
    den = sigma_r * fdm.i_mc + (mu_r * fdm.i_exp + fdm.i_fix)[:, None]
    failed = (den <= 0).any(axis=0)
    if fdm.count_margin is not None:
        failed |= gaussian_count_failures(fdm.count_margin, mu_r, sigma_r)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = num / den + fdm.d_fix[:, None]
    return DelayEvaluation(d=d, failed=failed)


def direct_delays(model: AffineCircuitModel, n: np.ndarray, v_dd: float) -> np.ndarray:
    """Unfactored per-trial assembly of C_Tot and I_Drive."""
    c_tot = np.asarray(model.a_cload @ n) + model.b_cload[:, None]
    i_drive = np.asarray(model.a_idrive @ n) + model.b_idrive[:, None]
    return v_dd * c_tot / i_drive + model.d_fix[:, None]


def t95(delays: np.ndarray) -> float:
    """⌈0.95 n⌉-th order statistic, no interpolation."""
    n = delays.size
    rank = -(-95 * n // 100)
    return float(np.partition(delays, rank - 1)[rank - 1])


@dataclass(frozen=True)
class SstaResult:
    path_delays: np.ndarray
    failed: np.ndarray
    critical: sp.csr_matrix
    t95: float
    delay_penalty: float | None

    @property
    def surviving(self) -> int:
        return int((~self.failed).sum())


def mc_ssta(preds: Sequence[np.ndarray], evaluation: DelayEvaluation, t_ref: float | None = None,
            exclude_failures: bool = True, workers: int = 1) -> SstaResult:
    d = evaluation.d.copy()
    failed = evaluation.failed if exclude_failures else np.zeros_like(evaluation.failed)
    d[:, failed] = 0.0
    n = d.shape[1]

    def block(b, start, stop):
        return longest_paths(preds, d[:, start:stop])

    blocks = trial_blocks(n)
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(lambda blk: block(*blk), blocks))
    else:
        parts = [block(*blk) for blk in blocks]
    total = np.concatenate([p[0] for p in parts])
    end = np.concatenate([p[1] for p in parts])
    argpred = np.hstack([p[2] for p in parts])

    surviving = total[~failed]
    if surviving.size < MIN_SURVIVING_TRIALS:
        raise InsufficientTrialsError(int(surviving.size), MIN_SURVIVING_TRIALS)
    value = t95(surviving)
    return SstaResult(
        path_delays=total,
        failed=failed,
        critical=critical_path_matrix(end, argpred),
        t95=value,
        delay_penalty=None if t_ref is None else value / t_ref - 1.0,
    )


def critical_path_t95(fdm: FactoredDelayModel, ssta: SstaResult, mu_r: float, sigma_r: float) -> float:
    """T95 with delays recomputed only along each trial's recorded critical path."""
    coo = ssta.critical.tocoo()
    rows, cols = coo.row, coo.col
    num = sigma_r * fdm.q_mc[rows, cols] + mu_r * fdm.q_exp[rows] + fdm.q_fix[rows]
    den = sigma_r * fdm.i_mc[rows, cols] + mu_r * fdm.i_exp[rows] + fdm.i_fix[rows]
    d = num / den + fdm.d_fix[rows]
    per_trial = np.bincount(cols, weights=d, minlength=ssta.path_delays.size)
    return t95(per_trial[~ssta.failed])


def total_energy(fdm: FactoredDelayModel, mu_r: float, sigma_r: float, v_dd: float) -> float:
    """E_Tot = ½ V_DD 1ᵀ((1/n) σ_R Q_MC 1 + μ_R q_Exp + q_Fix)."""
    return 0.5 * v_dd * float(sigma_r * fdm.q_mc_mean.sum() + mu_r * fdm.q_exp.sum() + fdm.q_fix.sum())


def expected_energy(model: AffineCircuitModel, mu_r: float, v_dd: float) -> float:
    """The σ-free mean term of E_Tot, straight from the affine model."""
    q_exp = v_dd * np.asarray(model.a_cload.sum(axis=1)).ravel()
    return 0.5 * v_dd * float(mu_r * q_exp.sum() + v_dd * model.b_cload.sum())


def delta_e(energy: float, e_ref: float) -> float:
    return energy / e_ref - 1.0


def delay_cdf_frame(ssta: SstaResult) -> pd.DataFrame:
    df = pd.DataFrame({
        "trial": np.arange(ssta.path_delays.size),
        "delay_s": ssta.path_delays,
        "failed": ssta.failed.astype(bool),
    })
    df.loc[df["failed"], "delay_s"] = np.nan
    return df


def ssta_summary(ssta: SstaResult, t_nom: float | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "trials": int(ssta.path_delays.size),
        "surviving_trials": ssta.surviving,
        "t95_s": ssta.t95,
        "t_nom_s": t_nom,
        "delay_penalty": ssta.delay_penalty,
    }
