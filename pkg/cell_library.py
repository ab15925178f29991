"""Parametric standard-cell library: logic stages, timing arcs and SNM coefficients."""

import itertools
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Literal, NamedTuple, Sequence

from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

LIBRARY_FORMAT = "cntco-library/1"


class StageArcModel(BaseModel):
    """Affine drive/load coefficients of one logic stage; counts are s-CNTs summed over a transistor group."""

    model_config = ConfigDict(frozen=True)

    i1_per_cnt: float = Field(ge=0.0)
    i1_fixed: float = Field(0.0, ge=0.0)
    i2_per_cnt: float = Field(ge=0.0)
    i2_fixed: float = Field(0.0, ge=0.0)
    c_par_per_cnt: float = Field(ge=0.0)
    c_par_fixed: float = Field(0.0, ge=0.0)
    c_in: float = Field(ge=0.0)

    @model_validator(mode="after")
    def _check_drive(self):
        if self.i1_fixed + self.i2_fixed + self.i1_per_cnt + self.i2_per_cnt <= 0:
            raise ValueError("arc has no drive current, nominal delay would be infinite")
        return self

    def scaled(self, factor: float) -> "StageArcModel":
        # per-CNT terms stay put; a device `factor` times wider already carries `factor` times the CNTs in its count
        return StageArcModel(
            i1_per_cnt=self.i1_per_cnt,
            i1_fixed=self.i1_fixed * factor,
            i2_per_cnt=self.i2_per_cnt,
            i2_fixed=self.i2_fixed * factor,
            c_par_per_cnt=self.c_par_per_cnt,
            c_par_fixed=self.c_par_fixed * factor,
            c_in=self.c_in * factor,
        )

    def drive(self, n_group: float, frozen_factor: float = 1.0) -> float:
        return ((self.i1_per_cnt * frozen_factor + self.i2_per_cnt) * n_group
                + self.i1_fixed * frozen_factor + self.i2_fixed)


class VtcParams(NamedTuple):
    v_oh: float
    v_ih: float
    v_il: float
    v_ol: float


class SnmCoeffs(BaseModel):
    model_config = ConfigDict(frozen=True)

    t_voh0: float
    t_vih0: float
    t_vih1: float
    t_vil0: float
    t_vil1: float
    t_vol0: float

    @model_validator(mode="after")
    def _check_monotone(self):
        if not self.t_voh0 > self.t_vih0 > self.t_vil0 > self.t_vol0:
            raise ValueError(
                f"VTC coefficients must satisfy t_voh0 > t_vih0 > t_vil0 > t_vol0, got "
                f"{self.t_voh0}, {self.t_vih0}, {self.t_vil0}, {self.t_vol0}"
            )
        if self.t_vih1 <= 0 or self.t_vil1 <= 0:
            raise ValueError("t_vih1 and t_vil1 must be positive")
        return self

    @classmethod
    def from_tuple(cls, values: Sequence[float]) -> "SnmCoeffs":
        keys = ("t_voh0", "t_vih0", "t_vih1", "t_vil0", "t_vil1", "t_vol0")
        return cls(**dict(zip(keys, values)))

    def snmh_factor(self, driver_v_oh: float, snm_r: float) -> float:
        """H12 such that v_oh - v_ih >= snm_r  <=>  n_p + H12 * n_n <= 0."""
        if self.t_vih1 == 0:
            raise ValueError("t_vih1 = 0 makes the SNMH constraint degenerate")
        return -(10.0 ** ((driver_v_oh - self.t_vih0 - snm_r) / self.t_vih1))

    def snml_factor(self, driver_v_ol: float, snm_r: float) -> float:
        """H21 such that v_il - v_ol >= snm_r  <=>  H21 * n_p + n_n <= 0."""
        if self.t_vil1 == 0:
            raise ValueError("t_vil1 = 0 makes the SNML constraint degenerate")
        return -(10.0 ** ((self.t_vil0 - driver_v_ol - snm_r) / self.t_vil1))


def eval_vtc_params(coeffs: SnmCoeffs, n_p: float, n_n: float) -> VtcParams:
    if n_p <= 0 or n_n <= 0:
        raise ValueError(f"CNT counts must be positive, got n_p={n_p}, n_n={n_n}")
    ratio = math.log10(n_p / n_n)
    return VtcParams(
        v_oh=coeffs.t_voh0,
        v_ih=coeffs.t_vih0 + coeffs.t_vih1 * ratio,
        v_il=coeffs.t_vil0 + coeffs.t_vil1 * ratio,
        v_ol=coeffs.t_vol0,
    )


def worst_output_levels(driver_coeffs: SnmCoeffs | Sequence[SnmCoeffs]) -> tuple[float, float]:
    """Lowest V_OH and highest V_OL over every parameter set a driver stage carries."""
    if isinstance(driver_coeffs, SnmCoeffs):
        driver_coeffs = [driver_coeffs]
    return min(c.t_voh0 for c in driver_coeffs), max(c.t_vol0 for c in driver_coeffs)


def snm_of_pair(driver_coeffs: SnmCoeffs | Sequence[SnmCoeffs], loader_coeffs: SnmCoeffs,
                n_p: float, n_n: float) -> tuple[float, float, float]:
    v_oh, v_ol = worst_output_levels(driver_coeffs)
    loader = eval_vtc_params(loader_coeffs, n_p, n_n)
    snmh = v_oh - loader.v_ih
    snml = loader.v_il - v_ol
    return snmh, snml, min(snmh, snml)


class TransistorDef(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    polarity: Literal["p", "n"]
    gate: str
    width: int = Field(ge=1, description="width in sampling regions")
    offset: int = Field(0, ge=0, description="start position on the polarity track, in regions")


@dataclass(frozen=True)
class SensitizationCase:
    input: str
    state: tuple[tuple[str, int], ...]
    p_group: tuple[str, ...]
    n_group: tuple[str, ...]

    def describe(self) -> str:
        others = ",".join(f"{k}={v}" for k, v in self.state) or "-"
        return f"{self.input}[{others}]"


class StageDef(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    inputs: list[str]
    output: str
    transistors: list[TransistorDef]
    pull_up: list[list[str]]
    pull_down: list[list[str]]
    arc: StageArcModel
    arcs: dict[str, StageArcModel] = Field(default_factory=dict)
    snm: dict[str, SnmCoeffs]
    launch: bool = False

    @model_validator(mode="after")
    def _check_networks(self):
        names = [t.name for t in self.transistors]
        if len(set(names)) != len(names):
            raise ValueError(f"stage {self.name}: duplicate transistor names")
        by_name = {t.name: t for t in self.transistors}
        for t in self.transistors:
            if t.gate not in self.inputs:
                raise ValueError(f"stage {self.name}: transistor {t.name} gated by unknown input {t.gate}")
        for label, network, polarity in (("pull_up", self.pull_up, "p"), ("pull_down", self.pull_down, "n")):
            for path in network:
                for name in path:
                    if name not in by_name:
                        raise ValueError(f"stage {self.name}: {label} names unknown transistor {name}")
                    if by_name[name].polarity != polarity:
                        raise ValueError(f"stage {self.name}: {name} in {label} must be {polarity}-type")
        missing = set(self.inputs) - set(self.snm)
        if missing:
            raise ValueError(f"stage {self.name}: no SNM coefficients for inputs {sorted(missing)}")
        for state in itertools.product((0, 1), repeat=len(self.inputs)):
            values = dict(zip(self.inputs, state))
            up, down = self._conducts(self.pull_up, values), self._conducts(self.pull_down, values)
            if up == down:
                raise ValueError(f"stage {self.name}: networks not complementary at {values}")
        return self

    @cached_property
    def _by_name(self) -> dict[str, TransistorDef]:
        return {t.name: t for t in self.transistors}

    def transistor(self, name: str) -> TransistorDef:
        return self._by_name[name]

    def _is_on(self, name: str, values: dict[str, int]) -> bool:
        t = self._by_name[name]
        return values[t.gate] == (1 if t.polarity == "n" else 0)

    def _conducts(self, network: list[list[str]], values: dict[str, int]) -> bool:
        return any(all(self._is_on(name, values) for name in path) for path in network)

    def evaluate(self, values: dict[str, int]) -> int:
        return int(self._conducts(self.pull_up, values))

    def _group(self, network: list[list[str]], inp: str, values: dict[str, int]) -> tuple[str, ...]:
        group = []
        for path in network:
            gated = [n for n in path if self._by_name[n].gate == inp]
            if gated and all(self._is_on(n, values) for n in path if self._by_name[n].gate != inp):
                group.extend(n for n in gated if n not in group)
        return tuple(group)

    def sensitization_cases(self, inp: str) -> list[SensitizationCase]:
        if inp not in self.inputs:
            raise ValueError(f"{inp} is not an input of stage {self.name}")
        return list(self._cases[inp])

    @cached_property
    def _cases(self) -> dict[str, tuple[SensitizationCase, ...]]:
        cases = {}
        for inp in self.inputs:
            others = [i for i in self.inputs if i != inp]
            found = []
            for state in itertools.product((0, 1), repeat=len(others)):
                values = dict(zip(others, state))
                if self.evaluate({**values, inp: 0}) == self.evaluate({**values, inp: 1}):
                    continue
                found.append(SensitizationCase(
                    input=inp,
                    state=tuple(values.items()),
                    p_group=self._group(self.pull_up, inp, {**values, inp: 0}),
                    n_group=self._group(self.pull_down, inp, {**values, inp: 1}),
                ))
            if not found:
                logger.warning("stage %s: input %s is never sensitized (constant output)", self.name, inp)
            cases[inp] = tuple(found)
        return cases

    def arc_for(self, inp: str) -> StageArcModel:
        return self.arcs.get(inp, self.arc)

    def group_width(self, group: Sequence[str]) -> int:
        return sum(self._by_name[n].width for n in group)

    def timing_case(self, counts_per_region: float) -> tuple[str, SensitizationCase]:
        """Weakest-drive sensitization case at uniform region counts."""
        best, best_drive = None, math.inf
        for inp in self.inputs:
            arc = self.arc_for(inp)
            for case in self._cases[inp]:
                n_avg = counts_per_region * (self.group_width(case.p_group) + self.group_width(case.n_group)) / 2
                drive = arc.drive(n_avg)
                if drive < best_drive:
                    best, best_drive = (inp, case), drive
        if best is None:
            raise ValueError(f"stage {self.name} has no sensitized input")
        return best

    def scaled(self, factor: float, w_min: int = 1) -> "StageDef":
        # rebuilt through validation so cached lookups never outlive the old widths
        data = self.model_dump()
        for t in data["transistors"]:
            t["width"] = max(w_min, round(t["width"] * factor))
            t["offset"] = round(t["offset"] * factor)
        data["arc"] = self.arc.scaled(factor)
        data["arcs"] = {k: v.scaled(factor) for k, v in self.arcs.items()}
        return StageDef.model_validate(data)


def sensitization_cases(stage: StageDef, inp: str) -> list[SensitizationCase]:
    return stage.sensitization_cases(inp)


class DriveChain(BaseModel):
    model_config = ConfigDict(frozen=True)

    strengths: list[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16])
    scale: float = Field(2.0, gt=1.0)

    @model_validator(mode="after")
    def _check_increasing(self):
        if not self.strengths or any(a >= b for a, b in zip(self.strengths, self.strengths[1:])):
            raise ValueError(f"drive strengths must be strictly increasing, got {self.strengths}")
        return self

    def factor(self, drive: int) -> float:
        if drive not in self.strengths:
            raise ValueError(f"drive X{drive} not in chain {self.strengths}")
        return self.scale ** self.strengths.index(drive)

    def next(self, drive: int) -> int | None:
        i = self.strengths.index(drive)
        return self.strengths[i + 1] if i + 1 < len(self.strengths) else None


class FeedbackPair(BaseModel):
    """A cross-coupled connection inside a sequential cell: `driver` output loads `loader` at `input`."""

    model_config = ConfigDict(frozen=True)

    driver: str
    loader: str
    input: str


class StandardCell(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    inputs: list[str]
    outputs: list[str]
    sequential: bool = False
    drive_chain: DriveChain = Field(default_factory=DriveChain)
    stages: list[StageDef]
    feedback: list[FeedbackPair] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_structure(self):
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ValueError(f"cell {self.name}: duplicate stage names")
        produced = [s.output for s in self.stages]
        if len(set(produced)) != len(produced):
            raise ValueError(f"cell {self.name}: two stages drive the same node")
        for out in self.outputs:
            if out not in produced:
                raise ValueError(f"cell {self.name}: output {out} is not driven by any stage")
        for stage in self.stages:
            for inp in stage.inputs:
                if inp not in self.inputs and inp not in produced:
                    raise ValueError(f"cell {self.name}: stage {stage.name} reads undriven node {inp}")
        launches = [s for s in self.stages if s.launch]
        if self.sequential and len(launches) != 1:
            raise ValueError(f"sequential cell {self.name} needs exactly one launch stage")
        if not self.sequential and launches:
            raise ValueError(f"combinational cell {self.name} cannot have a launch stage")
        for fb in self.feedback:
            if fb.driver not in names or fb.loader not in names:
                raise ValueError(f"cell {self.name}: feedback pair names unknown stage")
            if fb.input not in self.stage(fb.loader).inputs:
                raise ValueError(f"cell {self.name}: feedback input {fb.input} not on stage {fb.loader}")
        return self

    def stage(self, name: str) -> StageDef:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(f"cell {self.name} has no stage {name}")

    @property
    def max_drive(self) -> int:
        return self.drive_chain.strengths[-1]

    def drive_factor(self, drive: int) -> float:
        return self.drive_chain.factor(drive)

    def input_capacitance(self, pin: str, drive: int) -> float:
        if pin not in self.inputs:
            raise ValueError(f"{pin} is not an input of {self.name}")
        factor = self.drive_factor(drive)
        return sum(s.arc_for(pin).c_in * factor for s in self.stages if pin in s.inputs)

    def min_input_capacitance(self, drive: int) -> float:
        return min(self.input_capacitance(pin, drive) for pin in self.inputs)


class CellLibrary(BaseModel):
    model_config = ConfigDict(frozen=True)

    format: str = LIBRARY_FORMAT
    name: str = "library"
    v_dd: float | None = Field(None, gt=0.0, description="supply the coefficients were fitted at")
    cells: dict[str, StandardCell]

    @model_validator(mode="before")
    @classmethod
    def _name_cells(cls, data):
        if isinstance(data, dict) and isinstance(data.get("cells"), dict):
            data = dict(data)
            data["cells"] = {
                key: ({**value, "name": value.get("name", key)} if isinstance(value, dict) else value)
                for key, value in data["cells"].items()
            }
        return data

    @model_validator(mode="after")
    def _check_format(self):
        if self.format != LIBRARY_FORMAT:
            raise ValueError(f"unsupported library format {self.format!r}, expected {LIBRARY_FORMAT!r}")
        return self

    def cell(self, name: str) -> StandardCell:
        try:
            return self.cells[name]
        except KeyError:
            raise ValueError(f"cell {name!r} not in library {self.name!r}") from None
