"""Statistical model of per-region semiconducting-CNT counts.

A sampling region is a strip of the layout one region-width wide. CNTs grow
along the strip, so every transistor overlapping the strip sees the same
nanotubes; transistor counts are sums of the region counts they overlap.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import binomtest
from tqdm import tqdm

if TYPE_CHECKING:
    from circuit import PlacedCircuit

logger = logging.getLogger(__name__)

OPTIMIZED_PARAMS = ("idc", "p_m", "p_rs")
IDEAL_VALUES = {"idc": 0.0, "p_m": 0.0, "p_rs": 0.0, "p_rm": 1.0}

TRIAL_BLOCK = 256
BURN_IN_SPACINGS = 10

STREAM_GAUSSIAN = 1
STREAM_DISCRETE = 2


class ProcessingParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    idc: float = Field(0.50, ge=0.0, description="index of dispersion of CNT-CNT spacing")
    p_m: float = Field(0.01, ge=0.0, le=1.0, description="probability a CNT is metallic")
    p_rs: float = Field(0.04, ge=0.0, le=1.0, description="probability an s-CNT is removed")
    p_rm: float = Field(0.9999, ge=0.0, le=1.0, description="probability an m-CNT is removed")

    @classmethod
    def ideal(cls) -> "ProcessingParams":
        return cls(**IDEAL_VALUES)

    @property
    def survival(self) -> float:
        """Probability a grown CNT ends up as a surviving s-CNT."""
        return (1.0 - self.p_m) * (1.0 - self.p_rs)

    def optimized(self) -> np.ndarray:
        return np.array([self.idc, self.p_m, self.p_rs], dtype=float)

    def with_optimized(self, values) -> "ProcessingParams":
        idc, p_m, p_rs = (float(v) for v in values)
        return ProcessingParams(idc=idc, p_m=p_m, p_rs=p_rs, p_rm=self.p_rm)

    def is_ideal(self, name: str) -> bool:
        return getattr(self, name) == IDEAL_VALUES[name]


class TechnologyParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    cnt_density: float = Field(250.0, gt=0.0, description="CNTs per micrometer")
    region_width: float = Field(0.020, gt=0.0, description="sampling region width, micrometers")
    v_dd: float = Field(0.35, gt=0.0, description="supply voltage, volts")
    snm_r: float = Field(None, ge=0.0, description="required static noise margin, volts")

    @model_validator(mode="before")
    @classmethod
    def _default_snm_r(cls, data):
        if isinstance(data, dict) and data.get("snm_r") is None:
            data = dict(data)
            data["snm_r"] = data.get("v_dd", cls.model_fields["v_dd"].default) / 5.0
        return data

    @model_validator(mode="after")
    def _check_snm_r(self):
        if self.snm_r >= self.v_dd:
            raise ValueError(f"snm_r ({self.snm_r}) must be below v_dd ({self.v_dd})")
        return self

    @property
    def lambda_w(self) -> float:
        """Expected number of grown CNTs per sampling region."""
        return self.cnt_density * self.region_width


@dataclass(frozen=True)
class RegionCountModel:
    mu_r: float
    sigma_r: float
    mu_m: float = 0.0

    @property
    def cv(self) -> float:
        return self.sigma_r / self.mu_r if self.mu_r > 0 else math.inf


def derive_region_model(params: ProcessingParams, tech: TechnologyParams) -> RegionCountModel:
    """Renewal-process count moments followed by independent Bernoulli thinning.

    The raw count of a region has mean λW and variance IDC·λW; keeping each CNT
    with probability p gives mean p·λW and variance p²·IDC·λW + p(1-p)·λW.
    """
    lam_w = tech.cnt_density * tech.region_width
    if lam_w <= 0:
        raise ValueError(f"cnt_density * region_width must be positive, got {lam_w}")
    p = params.survival
    variance = p * p * params.idc * lam_w + p * (1.0 - p) * lam_w
    return RegionCountModel(
        mu_r=lam_w * p,
        sigma_r=math.sqrt(max(variance, 0.0)),
        mu_m=lam_w * params.p_m * (1.0 - params.p_rm),
    )


class RegionStream:
    """Counter-based random streams: block b of stream s under seed k is always the same draw."""

    def __init__(self, seed: int, stream: int):
        self.seed = int(seed)
        self.stream = int(stream)

    def generator(self, block: int) -> np.random.Generator:
        key = ((self.seed & 0xFFFFFFFFFFFFFFFF) << 64) | ((self.stream & 0xFFFFFFFF) << 32) | (block & 0xFFFFFFFF)
        return np.random.Generator(np.random.Philox(key=key))


def trial_blocks(n: int, block: int = TRIAL_BLOCK) -> list[tuple[int, int, int]]:
    return [(b, start, min(start + block, n)) for b, start in enumerate(range(0, n, block))]


def _run_blocks(fn, n: int, workers: int) -> list:
    blocks = trial_blocks(n)
    if workers <= 1 or len(blocks) == 1:
        return [fn(*blk) for blk in blocks]
    with ThreadPoolExecutor(max_workers=min(workers, len(blocks))) as executor:
        return list(executor.map(lambda blk: fn(*blk), blocks))


def gaussian_block(seed: int, block: int, r: int, ncols: int) -> np.ndarray:
    """Unit normals for trial block `block`; identical whichever caller asks for it."""
    return RegionStream(seed, STREAM_GAUSSIAN).generator(block).standard_normal((r, ncols))


def sample_standard_normal(r: int, n: int, seed: int, workers: int = 1) -> np.ndarray:
    if r < 1 or n < 1:
        raise ValueError(f"region and trial counts must be >= 1, got r={r}, n={n}")

    def block(b, start, stop):
        return gaussian_block(seed, b, r, stop - start)

    return np.hstack(_run_blocks(block, n, workers))


@dataclass(frozen=True)
class GaussianRegionSample:
    x: np.ndarray
    mu_r: float
    sigma_r: float

    @property
    def counts(self) -> np.ndarray:
        return self.mu_r + self.sigma_r * self.x


def sample_regions_gaussian(model: RegionCountModel, r: int, n: int, seed: int,
                            workers: int = 1) -> GaussianRegionSample:
    """N = μ_R·1·1ᵀ + σ_R·X; the unit-normal X is kept for the factored delay model."""
    x = sample_standard_normal(r, n, seed, workers=workers)
    return GaussianRegionSample(x=x, mu_r=model.mu_r, sigma_r=model.sigma_r)


def _discrete_counts(rng: np.random.Generator, params: ProcessingParams, tech: TechnologyParams,
                     size: int) -> np.ndarray:
    # positions are in units of the mean CNT spacing, so the window is λW long
    window = tech.lambda_w
    span = BURN_IN_SPACINGS + window
    n_spacings = int(math.ceil(span + 10.0 * math.sqrt(span * params.idc) + 5))

    phase = rng.random(size)
    if params.idc > 0:
        shape = 1.0 / params.idc
        spacings = rng.gamma(shape, params.idc, size=(size, n_spacings))
    else:
        spacings = np.ones((size, n_spacings))
    positions = (phase - BURN_IN_SPACINGS)[:, None] + np.cumsum(spacings, axis=1)
    while params.idc > 0 and (positions[:, -1] < window).any():
        extra = rng.gamma(1.0 / params.idc, params.idc, size=(size, n_spacings))
        positions = np.hstack([positions, positions[:, -1:] + np.cumsum(extra, axis=1)])

    # the phase point itself sits before the window, only cumulative points can land inside
    raw = ((positions >= 0.0) & (positions < window)).sum(axis=1)
    return rng.binomial(raw, params.survival)


def discrete_block(params: ProcessingParams, tech: TechnologyParams, seed: int, block: int, r: int,
                   ncols: int) -> np.ndarray:
    rng = RegionStream(seed, STREAM_DISCRETE).generator(block)
    return _discrete_counts(rng, params, tech, r * ncols).reshape(r, ncols)


def sample_regions_discrete(params: ProcessingParams, tech: TechnologyParams, r: int, n: int, seed: int,
                            workers: int = 1) -> np.ndarray:
    """Integer region counts from a gamma-renewal CNT process thinned to surviving s-CNTs."""
    if r < 1 or n < 1:
        raise ValueError(f"region and trial counts must be >= 1, got r={r}, n={n}")

    def block(b, start, stop):
        return discrete_block(params, tech, seed, b, r, stop - start)

    return np.hstack(_run_blocks(block, n, workers)).astype(np.int64)


def transistor_counts(incidence: sp.spmatrix, region_counts: np.ndarray) -> np.ndarray:
    """s = B·n for every trial column."""
    return np.asarray(incidence @ region_counts)


def count_failure_margin(incidence: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    """Per-trial min over transistors of (B·X)ᵢ/(B·1)ᵢ.

    A trial has a nonpositive Gaussian transistor count exactly when this margin
    is <= -μ_R/σ_R, so failures under new (μ_R, σ_R) need no matrix product.
    """
    widths = np.asarray(incidence.sum(axis=1)).ravel()
    if (widths <= 0).any():
        raise ValueError("every transistor must overlap at least one sampling region")
    scaled = np.asarray(incidence @ x) / widths[:, None]
    return scaled.min(axis=0)


def gaussian_count_failures(margin: np.ndarray, mu_r: float, sigma_r: float) -> np.ndarray:
    if sigma_r == 0:
        return np.full(margin.shape, mu_r <= 0)
    return margin <= -mu_r / sigma_r


@dataclass(frozen=True)
class YieldEstimate:
    yield_: float
    half_width: float
    failed_trials: int
    trials: int


def count_limited_yield(circuit: "PlacedCircuit", params: ProcessingParams, tech: TechnologyParams,
                        trials: int = 10_000, seed: int = 0, workers: int = 1) -> YieldEstimate:
    """MC probability that no transistor ends up with zero s-CNTs."""
    if trials < 10_000:
        raise ValueError(f"count-limited yield needs >= 10^4 trials, got {trials}")
    incidence = circuit.incidence()
    widths = np.asarray(incidence.sum(axis=1)).ravel()
    if (widths <= 0).any():
        bad = [circuit.transistors[i].label for i in np.flatnonzero(widths <= 0)[:5]]
        raise ValueError(f"transistors overlapping zero sampling regions: {bad}")

    r = circuit.n_regions

    def block(b, start, stop):
        counts = discrete_block(params, tech, seed, b, r, stop - start)
        per_transistor = incidence @ counts
        return int((per_transistor >= 1).all(axis=0).sum())

    passed = 0
    blocks = trial_blocks(trials)
    if workers <= 1:
        for blk in tqdm(blocks, desc="Yield MC", leave=False):
            passed += block(*blk)
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            passed = sum(executor.map(lambda blk: block(*blk), blocks))

    ci = binomtest(passed, trials).proportion_ci(confidence_level=0.95, method="wilson")
    estimate = YieldEstimate(
        yield_=passed / trials,
        half_width=(ci.high - ci.low) / 2.0,
        failed_trials=trials - passed,
        trials=trials,
    )
    logger.debug("count-limited yield %.6f ± %.2e over %d trials", estimate.yield_, estimate.half_width, trials)
    return estimate
