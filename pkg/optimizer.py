"""Single-design-point analysis, finite-difference gradients and the alternating descent search.

A design point is a set of processing parameters together with a sizing
state (selective-upsizing step k and minimum width w_min). Everything that
depends only on the sizing state is built once by DesignAnalyzer; moving the
processing parameters then costs elementwise work only.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm import tqdm

from cell_library import CellLibrary
from circuit import Netlist, PlacedCircuit, apply_upsizes, min_width_upsize, upsize_sequence
from errors import InfeasibleError
from noise import PnmvResult, SnmConstraintSystem, build_snm_system, pnmv
from timing import (AffineCircuitModel, FactoredDelayModel, NominalTiming, SstaResult, StageCoefficients,
                    critical_path_t95, evaluate_delays, expected_energy, linearize, mc_ssta,
                    nominal_sta_nonlinear, nonlinear_path_delays, precompute_factored, stage_coefficients,
                    t95, total_energy)
from variation import (IDEAL_VALUES, OPTIMIZED_PARAMS, ProcessingParams, TechnologyParams, YieldEstimate,
                       count_limited_yield, derive_region_model, sample_standard_normal)

logger = logging.getLogger(__name__)

GRADIENT_DELTA = 1e-6


class SearchConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    delay_penalty_max: float = Field(0.05, ge=0.0)
    pnmv_max: float = Field(1e-3, ge=0.0, le=1.0)
    delta_e_max: float = Field(0.05)
    step_total: float = Field(0.10, gt=0.0, le=1.0, description="total relative reduction per descent step")
    hard_limits: dict[str, float] = Field(default_factory=dict, description="values a parameter never goes below")
    weights: dict[str, float] = Field(default_factory=dict)
    frozen_params: tuple[str, ...] = ()
    max_steps: int = Field(200, ge=0)
    delta_e_band: tuple[float, float] = (0.01, 0.02)
    k_max: int = Field(32, ge=0, description="largest selective-upsizing step considered")
    selection: Literal["min_edp95", "most_relaxed"] = "min_edp95"
    yield_target: float = Field(0.99, ge=0.0, le=1.0)
    w_min_max: int = Field(8, ge=1)
    gradient_delta: float = Field(GRADIENT_DELTA, gt=0.0)

    @field_validator("hard_limits", "weights")
    @classmethod
    def _known_params(cls, v):
        unknown = set(v) - set(OPTIMIZED_PARAMS)
        if unknown:
            raise ValueError(f"unknown processing parameters {sorted(unknown)}")
        return v

    @field_validator("frozen_params")
    @classmethod
    def _known_frozen(cls, v):
        unknown = set(v) - set(OPTIMIZED_PARAMS)
        if unknown:
            raise ValueError(f"unknown processing parameters {sorted(unknown)}")
        return v

    @field_validator("delta_e_band")
    @classmethod
    def _band(cls, v):
        lo, hi = v
        if not 0 < lo <= hi:
            raise ValueError(f"delta_e_band must satisfy 0 < low <= high, got {v}")
        return v

    def weight_vector(self) -> np.ndarray:
        return np.array([self.weights.get(p, 1.0) for p in OPTIMIZED_PARAMS])

    def limit_vector(self) -> np.ndarray:
        return np.array([self.hard_limits.get(p, IDEAL_VALUES[p]) for p in OPTIMIZED_PARAMS])


@dataclass
class DesignPoint:
    params: ProcessingParams
    k_sel_upsize: int
    w_min: int
    t95: float
    delay_penalty: float
    energy: float
    delta_e: float
    pnmv: float
    pnmv_error: float = 0.0
    surviving_trials: int = 0
    grad_energy: np.ndarray = field(default_factory=lambda: np.zeros(3))
    grad_t95: np.ndarray = field(default_factory=lambda: np.zeros(3))
    grad_pnmv: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def edp95(self) -> float:
        return self.energy * self.t95

    @property
    def enp(self) -> float:
        return self.energy * self.pnmv

    @property
    def grad_edp95(self) -> np.ndarray:
        return self.energy * self.grad_t95 + self.t95 * self.grad_energy

    @property
    def grad_enp(self) -> np.ndarray:
        return self.energy * self.grad_pnmv + self.pnmv * self.grad_energy

    def meets_delay(self, config: SearchConfig) -> bool:
        return self.delay_penalty <= config.delay_penalty_max

    def meets_noise(self, config: SearchConfig) -> bool:
        return self.pnmv <= config.pnmv_max

    def acceptable(self, config: SearchConfig) -> bool:
        return self.meets_delay(config) and self.meets_noise(config) and self.delta_e <= config.delta_e_max

    def as_dict(self) -> dict:
        grads = {
            "energy": self.grad_energy, "t95": self.grad_t95, "pnmv": self.grad_pnmv,
            "edp95": self.grad_edp95, "enp": self.grad_enp,
        }
        return {
            "processing": self.params.model_dump(),
            "k_sel_upsize": self.k_sel_upsize,
            "w_min": self.w_min,
            "t95_s": self.t95,
            "delay_penalty": self.delay_penalty,
            "energy_j": self.energy,
            "delta_e": self.delta_e,
            "pnmv": self.pnmv,
            "pnmv_error": self.pnmv_error,
            "edp95": self.edp95,
            "enp": self.enp,
            "surviving_trials": self.surviving_trials,
            "gradients": {name: dict(zip(OPTIMIZED_PARAMS, map(float, g))) for name, g in grads.items()},
        }


@dataclass
class SizingState:
    """Everything that depends on the sizing state only."""

    k: int
    w_min: int
    circuit: PlacedCircuit
    coeffs: StageCoefficients
    nominal: NominalTiming
    model: AffineCircuitModel
    fdm: FactoredDelayModel
    snm: SnmConstraintSystem


class DesignAnalyzer:
    """Sizing-state cache around one netlist.

    The nominal reference (T_NomOpt, E_NomOpt) is the EDP-optimal nominal
    design over k in [0, k_max] at the netlist's own w_min.
    """

    def __init__(self, netlist: Netlist, library: CellLibrary, tech: TechnologyParams, ssta_trials: int = 2000,
                 sample_seed: int = 0, mvn_seed: int = 0, k_max: int = 32, workers: int = 1,
                 validation_seed: int | None = None):
        self.netlist = netlist
        self.library = library
        self.tech = tech
        self.ssta_trials = ssta_trials
        self.sample_seed = sample_seed
        self.validation_seed = sample_seed + 1 if validation_seed is None else validation_seed
        if self.validation_seed == sample_seed:
            raise ValueError("the validation seed must differ from the search sample seed")
        self.mvn_seed = mvn_seed
        self.workers = workers
        self.sequence = upsize_sequence(netlist, library, k_max)
        self._states: dict[tuple[int, int], SizingState] = {}
        self._nominal: dict[tuple[int, int], tuple[float, AffineCircuitModel]] = {}
        self._lock = threading.RLock()
        self.k_opt, self.t_ref, self.e_ref = self._nominal_optimum()

    @property
    def k_max(self) -> int:
        return len(self.sequence)

    def sized_netlist(self, k: int, w_min: int | None = None) -> Netlist:
        if not 0 <= k <= self.k_max:
            raise ValueError(f"k must lie in [0, {self.k_max}], got {k}")
        sized = apply_upsizes(self.netlist, self.library, self.sequence[:k])
        return sized if w_min is None else min_width_upsize(sized, w_min)

    def place(self, k: int, w_min: int) -> PlacedCircuit:
        return PlacedCircuit(self.sized_netlist(k, w_min), self.library, nominal_count=self.tech.lambda_w)

    def _nominal_model(self, k: int, w_min: int) -> tuple[float, AffineCircuitModel]:
        key = (k, w_min)
        with self._lock:
            if key not in self._nominal:
                circuit = self.place(k, w_min)
                coeffs = stage_coefficients(circuit)
                nom = nominal_sta_nonlinear(circuit, coeffs, self.tech.v_dd)
                self._nominal[key] = (nom.t_nom, linearize(coeffs, nom))
            return self._nominal[key]

    def nominal(self, k: int, w_min: int | None = None) -> tuple[float, float]:
        """(T_Nom, E_Nom) at nominal counts for sizing (k, w_min)."""
        w_min = self.netlist.w_min if w_min is None else w_min
        t_nom, model = self._nominal_model(k, w_min)
        return t_nom, expected_energy(model, self.tech.lambda_w, self.tech.v_dd)

    def _nominal_optimum(self) -> tuple[int, float, float]:
        best = None
        for k in range(self.k_max + 1):
            t_nom, e_nom = self.nominal(k)
            if best is None or e_nom * t_nom < best[1] * best[2]:
                best = (k, e_nom, t_nom)
        k, e_nom, t_nom = best
        logger.info("EDP-optimal nominal design at k=%d: T_Nom=%.4e s, E_Nom=%.4e J", k, t_nom, e_nom)
        return k, t_nom, e_nom

    def state(self, k: int, w_min: int | None = None) -> SizingState:
        w_min = self.netlist.w_min if w_min is None else w_min
        key = (k, w_min)
        with self._lock:
            if key in self._states:
                return self._states[key]
            circuit = self.place(k, w_min)
            coeffs = stage_coefficients(circuit)
            nom = nominal_sta_nonlinear(circuit, coeffs, self.tech.v_dd)
            model = linearize(coeffs, nom)
            incidence = circuit.incidence()
            x = sample_standard_normal(circuit.n_regions, self.ssta_trials, self.sample_seed, workers=self.workers)
            fdm = precompute_factored(model, x, self.tech.v_dd, incidence=incidence, workers=self.workers)
            snm = build_snm_system(circuit, self.tech)
            state = SizingState(k=k, w_min=w_min, circuit=circuit, coeffs=coeffs, nominal=nom, model=model,
                                fdm=fdm, snm=snm)
            self._states[key] = state
            logger.debug("built sizing state k=%d w_min=%d (%d regions)", k, w_min, circuit.n_regions)
            return state

    def validation_sample(self, k: int, w_min: int | None = None) -> np.ndarray:
        """Standard normals for re-timing a chosen point, independent of the search sample."""
        circuit = self.state(k, w_min).circuit
        return sample_standard_normal(circuit.n_regions, self.ssta_trials, self.validation_seed, workers=self.workers)

    def expected_delta_e(self, k: int, params: ProcessingParams, w_min: int | None = None) -> float:
        """ΔE of the σ-free mean energy at the parameters' μ_R; used for band targeting."""
        w_min = self.netlist.w_min if w_min is None else w_min
        _, model = self._nominal_model(k, w_min)
        mu_r = derive_region_model(params, self.tech).mu_r
        return expected_energy(model, mu_r, self.tech.v_dd) / self.e_ref - 1.0


def _metrics(analyzer: DesignAnalyzer, state: SizingState, params: ProcessingParams,
             points: list[int] | None = None) -> tuple[SstaResult, float, PnmvResult]:
    region = derive_region_model(params, analyzer.tech)
    evaluation = evaluate_delays(state.fdm, region.mu_r, region.sigma_r)
    ssta = mc_ssta(state.circuit.arc_preds, evaluation, t_ref=analyzer.t_ref, workers=analyzer.workers)
    energy = total_energy(state.fdm, region.mu_r, region.sigma_r, analyzer.tech.v_dd)
    noise = pnmv(state.snm, region.mu_r, region.sigma_r, seed=analyzer.mvn_seed, workers=analyzer.workers,
                 points=points)
    return ssta, energy, noise


def grad_metrics(analyzer: DesignAnalyzer, state: SizingState, params: ProcessingParams, ssta: SstaResult,
                 energy: float, noise: PnmvResult,
                 delta: float = GRADIENT_DELTA) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided differences (f(x) - f(x - δ)) / δ for E_Tot, T95 and PNMV.

    T95 is re-extracted from delays recomputed along each trial's recorded
    critical path over the base survivor set. PNMV reuses the base point
    counts and seed. A parameter at its ideal value gets a zero component.
    """
    base = params.optimized()
    t_base = ssta.t95
    g_e, g_t, g_p = np.zeros(3), np.zeros(3), np.zeros(3)
    for j, name in enumerate(OPTIMIZED_PARAMS):
        step = min(delta, base[j] - IDEAL_VALUES[name])
        if step <= 0:
            continue
        shifted = base.copy()
        shifted[j] -= step
        region = derive_region_model(params.with_optimized(shifted), analyzer.tech)
        t_shift = critical_path_t95(state.fdm, ssta, region.mu_r, region.sigma_r)
        e_shift = total_energy(state.fdm, region.mu_r, region.sigma_r, analyzer.tech.v_dd)
        p_shift = pnmv(state.snm, region.mu_r, region.sigma_r, seed=analyzer.mvn_seed,
                       workers=analyzer.workers, points=noise.points or None).value
        g_t[j] = (t_base - t_shift) / step
        g_e[j] = (energy - e_shift) / step
        g_p[j] = (noise.value - p_shift) / step
    return g_e, g_t, g_p


def analyze_point(analyzer: DesignAnalyzer, params: ProcessingParams, k: int | None = None,
                  w_min: int | None = None, gradients: bool = True,
                  delta: float = GRADIENT_DELTA) -> tuple[DesignPoint, SstaResult]:
    k = analyzer.k_opt if k is None else k
    state = analyzer.state(k, w_min)
    ssta, energy, noise = _metrics(analyzer, state, params)
    point = DesignPoint(
        params=params,
        k_sel_upsize=k,
        w_min=state.w_min,
        t95=ssta.t95,
        delay_penalty=ssta.delay_penalty,
        energy=energy,
        delta_e=energy / analyzer.e_ref - 1.0,
        pnmv=noise.value,
        pnmv_error=noise.error,
        surviving_trials=ssta.surviving,
    )
    if gradients:
        point.grad_energy, point.grad_t95, point.grad_pnmv = grad_metrics(
            analyzer, state, params, ssta, energy, noise, delta=delta)
    return point, ssta


def sdpa(analyzer: DesignAnalyzer, params: ProcessingParams, k: int | None = None, w_min: int | None = None,
         gradients: bool = True, delta: float = GRADIENT_DELTA) -> DesignPoint:
    """Delay penalty, energy, PNMV and their gradients at one design point."""
    return analyze_point(analyzer, params, k, w_min, gradients=gradients, delta=delta)[0]


def descent_step(params: ProcessingParams, gradient: np.ndarray, config: SearchConfig) -> ProcessingParams:
    """Move every optimized parameter toward its ideal value by its ℓ1-normalized gradient share."""
    g = np.asarray(gradient, dtype=float) * config.weight_vector()
    current = params.optimized()
    for j, name in enumerate(OPTIMIZED_PARAMS):
        if name in config.frozen_params or current[j] <= IDEAL_VALUES[name]:
            g[j] = 0.0
    g[~np.isfinite(g) | (g < 0)] = 0.0
    total = g.sum()
    if total <= 0:
        return params
    proposed = current * (1.0 - config.step_total * g / total)
    floor = np.minimum(config.limit_vector(), current)
    return params.with_optimized(np.maximum(proposed, floor))


def build_initial_curve(analyzer: DesignAnalyzer, params: ProcessingParams, config: SearchConfig,
                        w_min: int | None = None) -> list[DesignPoint]:
    """Design points from the EDP-optimal nominal sizing upward in ΔE-band increments of k."""
    w_min = analyzer.netlist.w_min if w_min is None else w_min
    lo, hi = config.delta_e_band
    cache: dict[int, float] = {}

    def de(k):
        if k not in cache:
            cache[k] = analyzer.expected_delta_e(k, params, w_min)
        return cache[k]

    ks = [analyzer.k_opt]
    while True:
        prev = ks[-1]
        if prev >= analyzer.k_max or de(prev + 1) > config.delta_e_max:
            break
        if de(analyzer.k_max) - de(prev) < lo:
            break
        left, right = prev + 1, analyzer.k_max
        while left < right:
            mid = (left + right) // 2
            if de(mid) - de(prev) >= lo:
                right = mid
            else:
                left = mid + 1
        if de(left) > config.delta_e_max:
            break
        if de(left) - de(prev) > hi:
            logger.debug("k=%d overshoots the ΔE band (%.3f > %.3f)", left, de(left) - de(prev), hi)
        ks.append(left)

    curve = []
    for k in tqdm(ks, desc="Initial curve", leave=False):
        curve.append(sdpa(analyzer, params, k, w_min, delta=config.gradient_delta))
    logger.info("initial curve: %d points at k=%s", len(curve), ks)
    return curve


@dataclass
class Branch:
    branch_id: int
    points: list[DesignPoint]
    status: str

    @property
    def final(self) -> DesignPoint:
        return self.points[-1]

    @property
    def acceptable(self) -> DesignPoint | None:
        return self.final if self.status == "acceptable" else None


def run_branch(analyzer: DesignAnalyzer, start: DesignPoint, config: SearchConfig, branch_id: int = 0) -> Branch:
    """Alternate ∇EDP95 steps (while the delay penalty is violated) and ∇ENP steps (while PNMV is)."""
    point = start
    points = [point]
    for _ in range(config.max_steps):
        if point.acceptable(config):
            return Branch(branch_id, points, "acceptable")
        if point.delta_e > config.delta_e_max:
            return Branch(branch_id, points, "delta_e_exceeded")
        gradient = point.grad_edp95 if not point.meets_delay(config) else point.grad_enp
        new_params = descent_step(point.params, gradient, config)
        if new_params == point.params:
            return Branch(branch_id, points, "limits_reached")
        point = sdpa(analyzer, new_params, point.k_sel_upsize, point.w_min, delta=config.gradient_delta)
        points.append(point)
        logger.debug("branch %d step %d: penalty=%.4f pnmv=%.3e dE=%.4f", branch_id, len(points) - 1,
                     point.delay_penalty, point.pnmv, point.delta_e)
    if point.acceptable(config):
        return Branch(branch_id, points, "acceptable")
    logger.warning("branch %d did not converge within %d steps", branch_id, config.max_steps)
    return Branch(branch_id, points, "max_steps")


def pareto_front(points: list[DesignPoint]) -> list[DesignPoint]:
    """Points not dominated in (delay penalty, PNMV, ΔE)."""
    values = np.array([[p.delay_penalty, p.pnmv, p.delta_e] for p in points])
    front = []
    for i, v in enumerate(values):
        dominated = ((values <= v).all(axis=1) & (values < v).any(axis=1)).any()
        if not dominated:
            front.append(points[i])
    return front


def select_point(points: list[DesignPoint], selection: str) -> DesignPoint:
    if selection == "min_edp95":
        return min(points, key=lambda p: p.edp95)
    # most relaxed processing; ties broken by IDC, then p_m, then p_Rs, all descending
    return max(points, key=lambda p: tuple(p.params.optimized()))


@dataclass(frozen=True)
class NonlinearCheck:
    t95: float
    delay_penalty: float
    pnmv: float
    delta_e: float
    passed: bool

    def as_dict(self) -> dict:
        return {"t95_s": self.t95, "delay_penalty": self.delay_penalty, "pnmv": self.pnmv,
                "delta_e": self.delta_e, "passed": self.passed}


def nonlinear_check(analyzer: DesignAnalyzer, point: DesignPoint, config: SearchConfig) -> NonlinearCheck:
    """Re-time the point with the nonlinear per-trial model on a fresh region sample."""
    state = analyzer.state(point.k_sel_upsize, point.w_min)
    region = derive_region_model(point.params, analyzer.tech)
    n = region.mu_r + region.sigma_r * analyzer.validation_sample(point.k_sel_upsize, point.w_min)
    delays, failed = nonlinear_path_delays(state.circuit, state.coeffs, n, analyzer.tech.v_dd)
    value = t95(delays[~failed]) if (~failed).any() else float("inf")
    penalty = value / analyzer.t_ref - 1.0
    passed = (penalty <= config.delay_penalty_max and point.pnmv <= config.pnmv_max
              and point.delta_e <= config.delta_e_max)
    return NonlinearCheck(t95=value, delay_penalty=penalty, pnmv=point.pnmv, delta_e=point.delta_e, passed=passed)


@dataclass
class SearchResult:
    selected: DesignPoint
    acceptable: list[DesignPoint]
    branches: list[Branch]
    validation: NonlinearCheck
    yield_estimate: YieldEstimate
    w_min: int
    t_ref: float
    e_ref: float

    def trajectory(self) -> pd.DataFrame:
        return trajectory_frame(self.branches)

    def report(self) -> dict:
        return {
            "selected": self.selected.as_dict(),
            "acceptable": [p.as_dict() for p in self.acceptable],
            "branches": [{"branch": b.branch_id, "status": b.status, "steps": len(b.points) - 1}
                         for b in self.branches],
            "validation": self.validation.as_dict(),
            "count_limited_yield": {
                "yield": self.yield_estimate.yield_,
                "half_width": self.yield_estimate.half_width,
                "failed_trials": self.yield_estimate.failed_trials,
                "trials": self.yield_estimate.trials,
            },
            "w_min": self.w_min,
            "t_nom_opt_s": self.t_ref,
            "e_nom_opt_j": self.e_ref,
        }


def trajectory_frame(branches: list[Branch]) -> pd.DataFrame:
    rows = []
    for branch in branches:
        for step, p in enumerate(branch.points):
            rows.append({
                "point_id": len(rows),
                "branch_id": branch.branch_id,
                "step": step,
                "k_sel_upsize": p.k_sel_upsize,
                "w_min": p.w_min,
                "idc": p.params.idc,
                "p_m": p.params.p_m,
                "p_rs": p.params.p_rs,
                "delta_e": p.delta_e,
                "delay_penalty": p.delay_penalty,
                "pnmv": p.pnmv,
                "edp95": p.edp95,
            })
    return pd.DataFrame(rows)


def _run_branches(analyzer: DesignAnalyzer, curve: list[DesignPoint], config: SearchConfig,
                  workers: int) -> list[Branch]:
    branches: list[Branch | None] = [None] * len(curve)
    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(curve)))) as executor:
        futures = {executor.submit(run_branch, analyzer, p, config, i): i for i, p in enumerate(curve)}
        for fut in tqdm(as_completed(futures), total=len(futures), desc="Descent branches"):
            branches[futures[fut]] = fut.result()
    return branches


def _refine(analyzer: DesignAnalyzer, point: DesignPoint, config: SearchConfig,
            branch: Branch) -> tuple[DesignPoint, NonlinearCheck]:
    check = nonlinear_check(analyzer, point, config)
    steps = 0
    while not check.passed and steps < config.max_steps:
        gradient = point.grad_edp95 if check.delay_penalty > config.delay_penalty_max else point.grad_enp
        new_params = descent_step(point.params, gradient, config)
        if new_params == point.params:
            break
        point = sdpa(analyzer, new_params, point.k_sel_upsize, point.w_min, delta=config.gradient_delta)
        branch.points.append(point)
        check = nonlinear_check(analyzer, point, config)
        steps += 1
    if steps:
        logger.info("nonlinear validation took %d extra descent steps (passed=%s)", steps, check.passed)
    return point, check


def ap_descent(analyzer: DesignAnalyzer, params: ProcessingParams, config: SearchConfig,
               yield_trials: int = 10_000, yield_seed: int = 0, workers: int = 1) -> SearchResult:
    """Search for acceptable design points; raises InfeasibleError with a Pareto report when none is found."""
    w_min = analyzer.netlist.w_min
    all_points: list[DesignPoint] = []
    while True:
        curve = build_initial_curve(analyzer, params, config, w_min)
        branches = _run_branches(analyzer, curve, config, workers)
        for b in branches:
            all_points.extend(b.points)
        candidates = [b for b in branches if b.acceptable is not None]
        logger.info("w_min=%d: %d of %d branches reached an acceptable point", w_min, len(candidates), len(branches))

        validated = []
        for branch in candidates:
            point, check = _refine(analyzer, branch.acceptable, config, branch)
            if check.passed:
                validated.append((point, check, branch))
        if not validated:
            front = pareto_front(all_points)
            raise InfeasibleError(
                "no acceptable design point found",
                report={
                    "branches": [{"branch": b.branch_id, "status": b.status, "steps": len(b.points) - 1}
                                 for b in branches],
                    "pareto": [p.as_dict() for p in front],
                },
            )

        selected = select_point([v[0] for v in validated], config.selection)
        check = next(v[1] for v in validated if v[0] is selected)
        circuit = analyzer.state(selected.k_sel_upsize, w_min).circuit
        estimate = count_limited_yield(circuit, selected.params, analyzer.tech, trials=yield_trials,
                                       seed=yield_seed, workers=workers)
        if estimate.yield_ >= config.yield_target:
            return SearchResult(
                selected=selected,
                acceptable=[v[0] for v in validated],
                branches=branches,
                validation=check,
                yield_estimate=estimate,
                w_min=w_min,
                t_ref=analyzer.t_ref,
                e_ref=analyzer.e_ref,
            )
        if w_min >= config.w_min_max:
            raise InfeasibleError(
                f"count-limited yield {estimate.yield_:.5f} below target {config.yield_target} at w_min={w_min}",
                report={"selected": selected.as_dict(), "pareto": [p.as_dict() for p in pareto_front(all_points)]},
            )
        w_min += 1
        logger.info("count-limited yield %.5f below target %.5f, restarting with w_min=%d",
                    estimate.yield_, config.yield_target, w_min)


@dataclass(frozen=True)
class ProcessingRoute:
    params: ProcessingParams
    improvement: dict[str, float]
    total_improvement: float
    relative: dict[str, float] | None

    def as_dict(self) -> dict:
        return {
            "processing": self.params.model_dump(),
            "improvement": self.improvement,
            "total_improvement": self.total_improvement,
            "relative_improvement": self.relative if self.relative is not None else "no improvement",
        }


def route_extraction(selected: list[ProcessingParams], initial: ProcessingParams) -> ProcessingRoute:
    """Merge per-module selections to the most constrained value of every parameter."""
    if not selected:
        raise ValueError("route extraction needs at least one selected point")
    final = ProcessingParams(
        idc=min(p.idc for p in selected),
        p_m=min(p.p_m for p in selected),
        p_rs=min(p.p_rs for p in selected),
        p_rm=max(p.p_rm for p in selected),
    )
    improvement = {}
    for name in OPTIMIZED_PARAMS:
        start = getattr(initial, name)
        improvement[name] = 1.0 - getattr(final, name) / start if start > 0 else 0.0
    total = sum(improvement.values())
    relative = {k: v / total for k, v in improvement.items()} if total > 0 else None
    if relative is None:
        logger.info("processing route shows no improvement over the initial parameters")
    return ProcessingRoute(params=final, improvement=improvement, total_improvement=total, relative=relative)


def revalidate_route(route: ProcessingRoute, analyzers: list[DesignAnalyzer], points: list[DesignPoint],
                     config: SearchConfig) -> list[dict]:
    """Re-analyze every module at the merged route with its selected sizing."""
    rows = []
    for i, (analyzer, point) in enumerate(zip(analyzers, points)):
        check = sdpa(analyzer, route.params, point.k_sel_upsize, point.w_min, gradients=False)
        rows.append({
            "module": analyzer.netlist.name,
            "index": i,
            "delay_penalty": check.delay_penalty,
            "pnmv": check.pnmv,
            "delta_e": check.delta_e,
            "acceptable": check.acceptable(config),
        })
    return rows


def route_frame(route: ProcessingRoute, node_label: str, v_dd: float) -> pd.DataFrame:
    p = route.params
    return pd.DataFrame([{"node_label": node_label, "v_dd": v_dd, "idc": p.idc, "p_m": p.p_m,
                          "p_rs": p.p_rs, "p_rm": p.p_rm}])
