"""Cross-checks of the fast models against their slower references.

- linearized vs nonlinear timing over a grid of processing sets and sizing steps
- Gaussian vs discrete region counts, compared on the delay CDF
- analytic PNMV vs Monte-Carlo PNMV over a coefficient-of-variation sweep
"""

import logging
import math
import time

import numpy as np
import pandas as pd
from scipy.stats import norm
from tqdm import tqdm

from circuit import PlacedCircuit
from errors import InsufficientTrialsError
from noise import build_snm_system, pnmv, pnmv_mc
from optimizer import DesignAnalyzer
from timing import (MIN_SURVIVING_TRIALS, direct_delays, evaluate_delays, linearize, longest_paths, mc_ssta,
                    nominal_sta_nonlinear, nonlinear_path_delays, stage_coefficients, t95, total_energy)
from variation import (ProcessingParams, TechnologyParams, derive_region_model, sample_regions_discrete,
                       sample_standard_normal)

logger = logging.getLogger(__name__)

DEVIATION = 0.25
ALPHA = 0.05


def linear_vs_nonlinear(analyzer: DesignAnalyzer, processing_sets: list[ProcessingParams],
                        k_values: list[int]) -> tuple[pd.DataFrame, dict]:
    """EDP95 under both timing models on every grid point, and the sub-optimality of the linearized pick.

    Sub-optimality is EDP95_nl(point picked by the linearized model) over the
    smallest EDP95_nl on the grid, minus one.
    """
    rows = []
    lin_time = nl_time = 0.0
    grid = [(i, p, k) for i, p in enumerate(processing_sets) for k in k_values if k <= analyzer.k_max]
    for i, params, k in tqdm(grid, desc="Linear vs nonlinear", leave=False):
        state = analyzer.state(k)
        region = derive_region_model(params, analyzer.tech)
        energy = total_energy(state.fdm, region.mu_r, region.sigma_r, analyzer.tech.v_dd)

        start = time.perf_counter()
        try:
            lin_t95 = mc_ssta(state.circuit.arc_preds, evaluate_delays(state.fdm, region.mu_r, region.sigma_r)).t95
        except InsufficientTrialsError:
            lin_t95 = math.nan
        lin_time += time.perf_counter() - start

        start = time.perf_counter()
        n = region.mu_r + region.sigma_r * state.fdm.x
        delays, failed = nonlinear_path_delays(state.circuit, state.coeffs, n, analyzer.tech.v_dd)
        nl_t95 = t95(delays[~failed]) if (~failed).sum() >= MIN_SURVIVING_TRIALS else math.nan
        nl_time += time.perf_counter() - start

        rows.append({
            "processing_set": i, "idc": params.idc, "p_m": params.p_m, "p_rs": params.p_rs, "k_sel_upsize": k,
            "energy_j": energy, "t95_linear_s": lin_t95, "t95_nonlinear_s": nl_t95,
            "edp95_linear": energy * lin_t95, "edp95_nonlinear": energy * nl_t95,
        })
    frame = pd.DataFrame(rows)
    valid = frame.dropna(subset=["edp95_linear", "edp95_nonlinear"])
    if valid.empty:
        logger.warning("no grid point kept enough surviving trials under both models")
        return frame, {"edp95_suboptimality": None, "speedup": None, "points": 0}
    lin_pick = valid.loc[valid["edp95_linear"].idxmin()]
    nl_best = valid["edp95_nonlinear"].min()
    summary = {
        "edp95_suboptimality": float(lin_pick["edp95_nonlinear"] / nl_best - 1.0),
        "linear_pick": {"processing_set": int(lin_pick["processing_set"]), "k_sel_upsize": int(lin_pick["k_sel_upsize"])},
        "speedup": nl_time / lin_time if lin_time > 0 else None,
        "linear_time_s": lin_time,
        "nonlinear_time_s": nl_time,
        "points": int(len(valid)),
    }
    logger.info("EDP95 sub-optimality %.3f%%, speedup %.1fx", 100 * summary["edp95_suboptimality"],
                summary["speedup"] or float("nan"))
    return frame, summary


def _path_delays(circuit: PlacedCircuit, model, n: np.ndarray, v_dd: float) -> np.ndarray:
    failed = (np.asarray(circuit.incidence() @ n) <= 0).any(axis=0)
    d = direct_delays(model, n[:, ~failed], v_dd)
    total, _, _ = longest_paths(circuit.arc_preds, d)
    return total


def gaussian_vs_discrete(circuit: PlacedCircuit, params: ProcessingParams, tech: TechnologyParams,
                         trials: int, seed: int, workers: int = 1) -> dict:
    """Relative error of the median and of the 5-95% spread of the circuit delay CDF."""
    coeffs = stage_coefficients(circuit)
    model = linearize(coeffs, nominal_sta_nonlinear(circuit, coeffs, tech.v_dd))
    region = derive_region_model(params, tech)
    x = sample_standard_normal(circuit.n_regions, trials, seed, workers=workers)
    gaussian = _path_delays(circuit, model, region.mu_r + region.sigma_r * x, tech.v_dd)
    discrete = _path_delays(circuit, model, sample_regions_discrete(params, tech, circuit.n_regions, trials, seed,
                                                                    workers=workers).astype(float), tech.v_dd)
    g5, g50, g95 = np.percentile(gaussian, [5, 50, 95])
    d5, d50, d95 = np.percentile(discrete, [5, 50, 95])
    return {
        "mu_r": region.mu_r,
        "sigma_r": region.sigma_r,
        "median_error": abs(g50 - d50) / d50,
        "spread_error": abs((g95 - g5) - (d95 - d5)) / (d95 - d5) if d95 > d5 else 0.0,
        "gaussian_trials": int(gaussian.size),
        "discrete_trials": int(discrete.size),
    }


def detection_power(p: float, trials: int, deviation: float = DEVIATION, alpha: float = ALPHA) -> float:
    """Power of a two-sided z-test at level alpha to see a relative `deviation` from p."""
    if p <= 0 or p >= 1 or trials <= 0:
        return 0.0
    p1 = min(p * (1.0 + deviation), 1.0)
    se0 = math.sqrt(p * (1 - p) / trials)
    se1 = math.sqrt(p1 * (1 - p1) / trials)
    if se1 == 0:
        return 1.0
    z = norm.ppf(1 - alpha / 2)
    return float(norm.cdf((abs(p1 - p) - z * se0) / se1))


def pnmv_vs_mc(circuit: PlacedCircuit, base: ProcessingParams, tech: TechnologyParams, idc_sweep: list[float],
               trials: int, seed: int, mvn_seed: int = 0, power_min: float = 0.9,
               workers: int = 1) -> tuple[pd.DataFrame, dict]:
    """Analytic PNMV against Gaussian MC over an IDC sweep; axes are σ_R/μ_R vs PNMV."""
    system = build_snm_system(circuit, tech)
    incidence = circuit.incidence()
    rows = []
    for idc in tqdm(idc_sweep, desc="PNMV vs MC", leave=False):
        params = ProcessingParams(idc=idc, p_m=base.p_m, p_rs=base.p_rs, p_rm=base.p_rm)
        region = derive_region_model(params, tech)
        analytic = pnmv(system, region.mu_r, region.sigma_r, seed=mvn_seed, workers=workers)
        mc = pnmv_mc(system.k_tilde, params, tech, trials, seed, incidence=incidence, workers=workers)
        power = detection_power(analytic.value, mc.trials)
        rows.append({
            "idc": idc, "cv": region.cv, "pnmv": analytic.value, "pnmv_error": analytic.error,
            "mc_estimate": mc.estimate, "mc_low": mc.low, "mc_high": mc.high, "mc_trials": mc.trials,
            "power": power,
            "pct_error": (mc.estimate - analytic.value) / analytic.value if analytic.value > 0 else math.nan,
            "powered": power >= power_min,
        })
    frame = pd.DataFrame(rows)
    powered = frame[frame["powered"]]
    rms = float(np.sqrt((powered["pct_error"] ** 2).mean())) if not powered.empty else None
    return frame, {"rms_pct_error": rms, "powered_points": int(len(powered)), "points": int(len(frame))}
