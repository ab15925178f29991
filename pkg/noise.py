"""SNM constraint system and the probability of noise-margin violation (PNMV).

Every (driver, loader, sensitization case) gate pair gives one SNMH and one
SNML constraint, linear in the loader's transistor counts s:

    SNMH:  n_P + H12 n_N <= 0        SNML:  H21 n_P + n_N <= 0

Mapped to region counts through K = H B, then the redundant rows are dropped
and the remaining ones are grouped by the placement row of their loader, so
PNMV factors into a product of small MVN orthant probabilities.
"""

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.stats import binomtest
from tqdm import tqdm

from cell_library import worst_output_levels
from mvn import BlockResult, MvnProblem, block_mvncdf, DEFAULT_TARGET_ERROR
from variation import (ProcessingParams, TechnologyParams, derive_region_model, discrete_block,
                       gaussian_block, trial_blocks)

if TYPE_CHECKING:
    from circuit import PlacedCircuit

logger = logging.getLogger(__name__)

DOMINANCE_CHUNK_ELEMENTS = 4_000_000
MC_CONFIDENCE = 0.90


@dataclass(frozen=True)
class ConstraintTag:
    kind: str
    driver: int | None
    loader: int
    input: str
    case: str
    row: int
    ideal_driver: bool
    feedback: bool = False


def build_constraints(circuit: "PlacedCircuit", snm_r: float, v_dd: float) -> tuple[sp.csr_matrix, list[ConstraintTag]]:
    rows, cols, vals = [], [], []
    tags: list[ConstraintTag] = []
    ideal_pairs = 0

    def add(kind, coeff_p, coeff_n, p_idx, n_idx, tag_args):
        r = len(tags)
        for i in p_idx:
            rows.append(r), cols.append(i), vals.append(coeff_p)
        for i in n_idx:
            rows.append(r), cols.append(i), vals.append(coeff_n)
        tags.append(ConstraintTag(kind=kind, **tag_args))

    for pair in circuit.gate_pairs():
        loader = circuit.stages[pair.loader]
        coeffs = loader.stage.snm[pair.input]
        if pair.driver is None:
            v_oh, v_ol = v_dd, 0.0
            ideal_pairs += 1
        else:
            v_oh, v_ol = worst_output_levels(list(circuit.stages[pair.driver].stage.snm.values()))
        h12 = coeffs.snmh_factor(v_oh, snm_r)
        h21 = coeffs.snml_factor(v_ol, snm_r)
        for case in loader.stage.sensitization_cases(pair.input):
            if not case.p_group or not case.n_group:
                logger.warning("skipping %s: case %s lacks a pull-up or pull-down group", loader.label, case.describe())
                continue
            p_idx = [circuit.transistor_index[(pair.loader, n)] for n in case.p_group]
            n_idx = [circuit.transistor_index[(pair.loader, n)] for n in case.n_group]
            tag_args = dict(driver=pair.driver, loader=pair.loader, input=pair.input, case=case.describe(),
                            row=loader.row, ideal_driver=pair.driver is None, feedback=pair.feedback)
            add("SNMH", 1.0, h12, p_idx, n_idx, tag_args)
            add("SNML", h21, 1.0, p_idx, n_idx, tag_args)

    if ideal_pairs:
        logger.info("%d gate pairs driven by primary inputs use an ideal driver (V_OH = V_DD, V_OL = 0)", ideal_pairs)
    h = sp.csr_matrix((vals, (rows, cols)), shape=(len(tags), len(circuit.transistors)))
    return h, tags


def to_region_space(h: sp.spmatrix, b: sp.spmatrix) -> sp.csr_matrix:
    k = sp.csr_matrix(h @ b)
    k.eliminate_zeros()
    k.sort_indices()
    return k


@dataclass(frozen=True)
class EliminationReport:
    total: int
    kept: int
    duplicates: int
    dominated: int
    support_groups: int

    @property
    def removed(self) -> int:
        return self.total - self.kept

    @property
    def fraction_removed(self) -> float:
        return self.removed / self.total if self.total else 0.0

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "kept": self.kept,
            "removed": self.removed,
            "duplicates": self.duplicates,
            "dominated": self.dominated,
            "support_groups": self.support_groups,
            "fraction_removed": self.fraction_removed,
        }


def _dominated_rows(values: np.ndarray) -> np.ndarray:
    """Row i is dominated when some other row j has values[i] <= values[j] everywhere."""
    g, s = values.shape
    out = np.zeros(g, dtype=bool)
    chunk = max(1, DOMINANCE_CHUNK_ELEMENTS // max(1, g * s))
    for start in range(0, g, chunk):
        stop = min(start + chunk, g)
        dom = (values[start:stop, None, :] <= values[None, :, :]).all(axis=2)
        dom[np.arange(stop - start), np.arange(start, stop)] = False
        out[start:stop] = dom.any(axis=1)
    return out


def eliminate_noncritical(k: sp.csr_matrix) -> tuple[np.ndarray, EliminationReport]:
    """Indices of the critical rows of K, valid for nonnegative region counts.

    Rows are compared only within groups sharing the same support; exact
    duplicates collapse to their first occurrence before the dominance check.
    """
    k = sp.csr_matrix(k)
    k.sort_indices()
    groups: dict[bytes, list[int]] = defaultdict(list)
    for i in range(k.shape[0]):
        groups[k.indices[k.indptr[i]:k.indptr[i + 1]].tobytes()].append(i)

    kept, duplicates, dominated = [], 0, 0
    for members in groups.values():
        members = np.array(members)
        values = np.vstack([k.data[k.indptr[i]:k.indptr[i + 1]] for i in members])
        _, first = np.unique(values, axis=0, return_index=True)
        first.sort()
        duplicates += len(members) - len(first)
        drop = _dominated_rows(values[first])
        dominated += int(drop.sum())
        kept.extend(members[first[~drop]].tolist())

    kept = np.array(sorted(kept), dtype=np.int64)
    report = EliminationReport(total=k.shape[0], kept=len(kept), duplicates=duplicates,
                               dominated=dominated, support_groups=len(groups))
    logger.debug("constraint elimination: %d of %d rows kept", report.kept, report.total)
    return kept, report


@dataclass(frozen=True)
class ConstraintBlock:
    row: int
    members: np.ndarray
    regions: np.ndarray
    cov: np.ndarray
    bound: np.ndarray


def assemble_blocks(k_tilde: sp.csr_matrix, rows: np.ndarray, split_independent: bool = False) -> list[ConstraintBlock]:
    """Covariance blocks C_u = K̃_u K̃_uᵀ and bounds b_u = -K̃_u 1, one per placement row.

    With `split_independent`, each row block is further split into components
    that share no sampling region (zero covariance between components).
    """
    blocks = []
    for row in np.unique(rows):
        members = np.flatnonzero(rows == row)
        sub = k_tilde[members]
        regions = np.unique(sub.indices)
        dense = sub[:, regions].toarray()
        parts = [np.arange(len(members))]
        if split_independent and len(members) > 1:
            overlap = sp.csr_matrix(np.abs(dense) > 0, dtype=float)
            n_comp, labels = connected_components(overlap @ overlap.T, directed=False)
            parts = [np.flatnonzero(labels == c) for c in range(n_comp)]
        for part in parts:
            d = dense[part]
            used = np.flatnonzero(np.abs(d).sum(axis=0) > 0)
            d = d[:, used]
            blocks.append(ConstraintBlock(
                row=int(row),
                members=members[part],
                regions=regions[used],
                cov=d @ d.T,
                bound=-d.sum(axis=1),
            ))
    return blocks


@dataclass
class SnmConstraintSystem:
    h: sp.csr_matrix
    k: sp.csr_matrix
    kept: np.ndarray
    tags: list[ConstraintTag]
    blocks: list[ConstraintBlock]
    report: EliminationReport
    incidence: sp.csr_matrix = field(repr=False)

    @property
    def k_tilde(self) -> sp.csr_matrix:
        return self.k[self.kept]

    @property
    def b(self) -> np.ndarray:
        return -np.asarray(self.k_tilde.sum(axis=1)).ravel()

    @property
    def kept_tags(self) -> list[ConstraintTag]:
        return [self.tags[i] for i in self.kept]

    @property
    def ideal_driver_constraints(self) -> int:
        return sum(1 for t in self.tags if t.ideal_driver)


def build_snm_system(circuit: "PlacedCircuit", tech: TechnologyParams, split_independent: bool = True) -> SnmConstraintSystem:
    h, tags = build_constraints(circuit, tech.snm_r, tech.v_dd)
    incidence = circuit.incidence()
    k = to_region_space(h, incidence)
    kept, report = eliminate_noncritical(k)
    rows = np.array([tags[i].row for i in kept], dtype=np.int64)
    blocks = assemble_blocks(k[kept], rows, split_independent=split_independent)
    logger.info("SNM system: %d constraints, %d critical, %d MVN blocks", report.total, report.kept, len(blocks))
    return SnmConstraintSystem(h=h, k=k, kept=kept, tags=tags, blocks=blocks, report=report, incidence=incidence)


@dataclass(frozen=True)
class PnmvResult:
    value: float
    error: float
    points: list[int]


def pnmv(system: SnmConstraintSystem, mu_r: float, sigma_r: float, seed: int = 0,
         target_abs_error: float = DEFAULT_TARGET_ERROR, workers: int = 1,
         points: list[int] | None = None) -> PnmvResult:
    """PNMV = 1 - ∏ MVNCDF(C_u, (μ_R/σ_R) b_u)."""
    if not system.blocks:
        return PnmvResult(value=0.0, error=0.0, points=[])
    if sigma_r == 0:
        violated = any((mu_r * blk.bound < 0).any() for blk in system.blocks)
        return PnmvResult(value=float(violated), error=0.0, points=[])
    problems = [MvnProblem(cov=blk.cov, upper=(mu_r / sigma_r) * blk.bound) for blk in system.blocks]
    result: BlockResult = block_mvncdf(problems, target_abs_error=target_abs_error, seed=seed,
                                       workers=workers, points=points)
    return PnmvResult(value=max(0.0, 1.0 - result.prob), error=result.error,
                      points=[r.points for r in result.blocks])


@dataclass(frozen=True)
class McEstimate:
    estimate: float
    low: float
    high: float
    violations: int
    trials: int
    excluded: int


def pnmv_mc(k: sp.spmatrix, params: ProcessingParams, tech: TechnologyParams, trials: int, seed: int,
            discrete: bool = False, incidence: sp.spmatrix | None = None, workers: int = 1) -> McEstimate:
    """Fraction of sampled region-count vectors violating K n <= 0.

    Trials where any transistor count is nonpositive (needs `incidence`) are
    count failures and are left out of the estimate.
    """
    k = sp.csr_matrix(k)
    r = k.shape[1]
    model = derive_region_model(params, tech)

    def block(b, start, stop):
        if discrete:
            n = discrete_block(params, tech, seed, b, r, stop - start).astype(float)
        else:
            n = model.mu_r + model.sigma_r * gaussian_block(seed, b, r, stop - start)
        ok = np.ones(stop - start, dtype=bool)
        if incidence is not None:
            ok = (np.asarray(incidence @ n) > 0).all(axis=0)
        violated = (np.asarray(k @ n) > 0).any(axis=0) if k.shape[0] else np.zeros(stop - start, dtype=bool)
        return int((violated & ok).sum()), int(ok.sum())

    blocks = trial_blocks(trials)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(lambda blk: block(*blk), blocks))
    else:
        parts = [block(*blk) for blk in tqdm(blocks, desc="PNMV MC", leave=False)]
    violations = sum(p[0] for p in parts)
    used = sum(p[1] for p in parts)
    if used == 0:
        return McEstimate(estimate=float("nan"), low=0.0, high=1.0, violations=0, trials=0, excluded=trials)
    ci = binomtest(violations, used).proportion_ci(confidence_level=MC_CONFIDENCE, method="exact")
    return McEstimate(estimate=violations / used, low=ci.low, high=ci.high, violations=violations,
                      trials=used, excluded=trials - used)


def violation_agreement(k: sp.spmatrix, k_tilde: sp.spmatrix, params: ProcessingParams, tech: TechnologyParams,
                        trials: int, seed: int, workers: int = 1) -> int:
    """Number of discrete samples on which K n <= 0 and K̃ n <= 0 disagree."""
    k, k_tilde = sp.csr_matrix(k), sp.csr_matrix(k_tilde)
    r = k.shape[1]

    def block(b, start, stop):
        n = discrete_block(params, tech, seed, b, r, stop - start).astype(float)
        full = (np.asarray(k @ n) > 0).any(axis=0)
        reduced = (np.asarray(k_tilde @ n) > 0).any(axis=0) if k_tilde.shape[0] else np.zeros_like(full)
        return int((full != reduced).sum())

    blocks = trial_blocks(trials)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return sum(executor.map(lambda blk: block(*blk), blocks))
    return sum(block(*blk) for blk in blocks)


def triplet_frame(matrix: sp.spmatrix) -> pd.DataFrame:
    coo = sp.coo_matrix(matrix)
    return pd.DataFrame({"row": coo.row, "col": coo.col, "value": coo.data})


def constraint_frame(system: SnmConstraintSystem, circuit: "PlacedCircuit") -> pd.DataFrame:
    kept = set(system.kept.tolist())
    return pd.DataFrame([
        {
            "constraint": i,
            "kind": t.kind,
            "driver": None if t.driver is None else circuit.stages[t.driver].label,
            "loader": circuit.stages[t.loader].label,
            "input": t.input,
            "case": t.case,
            "row": t.row,
            "ideal_driver": t.ideal_driver,
            "critical": i in kept,
        }
        for i, t in enumerate(system.tags)
    ])
