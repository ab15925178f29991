"""Netlist DAG, row placement, sampling-region grid and the transistor-to-region incidence map."""

import logging
from dataclasses import dataclass, field
from functools import cached_property

import networkx as nx
import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, model_validator

from cell_library import CellLibrary, StageDef

logger = logging.getLogger(__name__)

NETLIST_FORMAT = "cntco-netlist/1"


class PrimaryInput(BaseModel):
    model_config = ConfigDict(frozen=True)

    delay: float = Field(0.0, ge=0.0, description="fixed external arrival delay, seconds")


class InstanceDef(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    cell: str
    drive: int = 1
    pins: dict[str, str]


class RowSlot(BaseModel):
    model_config = ConfigDict(frozen=True)

    instance: str
    offset: int = Field(0, ge=0, description="start of the cell on both polarity tracks, in regions")


class RowDef(BaseModel):
    model_config = ConfigDict(frozen=True)

    slots: list[RowSlot]
    track_regions: int | None = Field(None, ge=1)


class Netlist(BaseModel):
    model_config = ConfigDict(frozen=True)

    format: str = NETLIST_FORMAT
    name: str = "netlist"
    primary_inputs: dict[str, PrimaryInput]
    primary_outputs: list[str]
    output_load: float = Field(0.0, ge=0.0, description="capacitance on every primary output, farads")
    input_slew: float = Field(1.0e-11, gt=0.0, description="slew at primary inputs and launch clocks, seconds")
    instances: list[InstanceDef]
    rows: list[RowDef]
    w_min: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_placement(self):
        if self.format != NETLIST_FORMAT:
            raise ValueError(f"unsupported netlist format {self.format!r}, expected {NETLIST_FORMAT!r}")
        names = [inst.name for inst in self.instances]
        if len(set(names)) != len(names):
            raise ValueError("duplicate instance names")
        placed = [slot.instance for row in self.rows for slot in row.slots]
        if sorted(placed) != sorted(names):
            missing = sorted(set(names) - set(placed))
            extra = sorted(set(placed) - set(names))
            raise ValueError(f"placement must hold every instance exactly once (missing {missing}, unknown {extra})")
        return self

    def instance(self, name: str) -> InstanceDef:
        for inst in self.instances:
            if inst.name == name:
                return inst
        raise KeyError(name)


@dataclass(frozen=True)
class StageSite:
    index: int
    instance: str
    cell: str
    stage: StageDef
    inputs: dict[str, str]
    output: str
    row: int
    launch: bool
    sequential: bool

    @property
    def label(self) -> str:
        return f"{self.instance}/{self.stage.name}"


@dataclass(frozen=True)
class TransistorSite:
    index: int
    stage: int
    name: str
    polarity: str
    width: int
    start: int
    label: str


@dataclass(frozen=True)
class GatePair:
    driver: int | None
    loader: int
    input: str
    net: str
    feedback: bool = False


@dataclass(frozen=True)
class RowSpan:
    p_start: int
    n_start: int
    length: int

    @property
    def regions(self) -> range:
        return range(self.p_start, self.n_start + self.length)


@dataclass
class NetInfo:
    driver: int | None = None
    loads: list[tuple[int, str]] = field(default_factory=list)


def _resolve(inst: InstanceDef, cell_pins: set[str], node: str) -> str:
    return inst.pins[node] if node in cell_pins else f"{inst.name}/{node}"


class PlacedCircuit:
    """A netlist bound to a library and laid out on the sampling-region grid.

    Stages are indexed in a fixed topological order of the timing graph; that
    index is the arc index used by the timing engine.
    """

    def __init__(self, netlist: Netlist, library: CellLibrary, nominal_count: float = 5.0):
        self.netlist = netlist
        self.library = library
        self.nominal_count = nominal_count
        self._scaled: dict[tuple[str, str, int, int], StageDef] = {}

        sites = self._build_stages()
        self.nets = self._build_nets(sites)
        order = self._timing_order(sites)
        self.stages: list[StageSite] = [
            StageSite(index=i, **{k: v for k, v in vars(sites[old]).items() if k != "index"})
            for i, old in enumerate(order)
        ]
        remap = {old: i for i, old in enumerate(order)}
        for info in self.nets.values():
            info.driver = None if info.driver is None else remap[info.driver]
            info.loads = [(remap[s], inp) for s, inp in info.loads]
        self.feedback_pairs = [(remap[d], remap[l], inp, net) for d, l, inp, net in self._feedback]
        self._by_instance: dict[str, list[StageSite]] = {}
        for site in self.stages:
            self._by_instance.setdefault(site.instance, []).append(site)

        self.row_spans = self._layout()
        self.transistors = self._place_transistors()
        self.n_regions = self.row_spans[-1].n_start + self.row_spans[-1].length if self.row_spans else 0
        logger.debug("placed %s: %d stages, %d transistors, %d regions in %d rows",
                      netlist.name, len(self.stages), len(self.transistors), self.n_regions, len(self.row_spans))

    def _scaled_stage(self, cell_name: str, stage: StageDef, drive: int) -> StageDef:
        key = (cell_name, stage.name, drive, self.netlist.w_min)
        if key not in self._scaled:
            factor = self.library.cell(cell_name).drive_factor(drive)
            self._scaled[key] = stage.scaled(factor, w_min=self.netlist.w_min)
        return self._scaled[key]

    def _build_stages(self) -> list[StageSite]:
        row_of = {slot.instance: r for r, row in enumerate(self.netlist.rows) for slot in row.slots}
        sites = []
        self._feedback = []
        for inst in self.netlist.instances:
            cell = self.library.cell(inst.cell)
            pins = set(cell.inputs) | set(cell.outputs)
            missing = pins - set(inst.pins)
            if missing:
                raise ValueError(f"instance {inst.name} leaves pins {sorted(missing)} unconnected")
            if inst.drive not in cell.drive_chain.strengths:
                raise ValueError(f"instance {inst.name}: drive X{inst.drive} not offered by {cell.name}")
            local = {}
            for stage in cell.stages:
                local[stage.name] = len(sites)
                sites.append(StageSite(
                    index=len(sites),
                    instance=inst.name,
                    cell=cell.name,
                    stage=self._scaled_stage(cell.name, stage, inst.drive),
                    inputs={i: _resolve(inst, pins, i) for i in stage.inputs},
                    output=_resolve(inst, pins, stage.output),
                    row=row_of[inst.name],
                    launch=stage.launch,
                    sequential=cell.sequential,
                ))
            for fb in cell.feedback:
                net = sites[local[fb.loader]].inputs[fb.input]
                self._feedback.append((local[fb.driver], local[fb.loader], fb.input, net))
        return sites

    def _build_nets(self, sites: list[StageSite]) -> dict[str, NetInfo]:
        nets: dict[str, NetInfo] = {name: NetInfo() for name in self.netlist.primary_inputs}
        for site in sites:
            info = nets.setdefault(site.output, NetInfo())
            if info.driver is not None or site.output in self.netlist.primary_inputs:
                raise ValueError(f"net {site.output} has more than one driver")
            info.driver = site.index
        for site in sites:
            for inp, net in site.inputs.items():
                if net not in nets:
                    raise ValueError(f"net {net} read by {site.label} has no driver")
                nets[net].loads.append((site.index, inp))
        for po in self.netlist.primary_outputs:
            if po not in nets:
                raise ValueError(f"primary output {po} is not a net")
        return nets

    def _timing_order(self, sites: list[StageSite]) -> list[int]:
        graph = nx.DiGraph()
        graph.add_nodes_from(range(len(sites)))
        for info in self.nets.values():
            if info.driver is None:
                continue
            for load, _ in info.loads:
                if not sites[load].launch:
                    graph.add_edge(info.driver, load)
        if not nx.is_directed_acyclic_graph(graph):
            cycle = nx.find_cycle(graph)
            raise ValueError(f"combinational loop through {[sites[u].label for u, _ in cycle]}")
        return list(nx.lexicographical_topological_sort(graph))

    def footprint(self, instance: str) -> int:
        """Regions the sized cell occupies on each polarity track."""
        return max((t.offset + t.width for site in self.stages_of(instance) for t in site.stage.transistors),
                   default=0)

    def _layout(self) -> list[RowSpan]:
        # cells keep their placed order; a cell grown by upsizing pushes its right neighbours along
        spans, base = [], 0
        self.instance_start: dict[str, int] = {}
        for r, row in enumerate(self.netlist.rows):
            cursor = 0
            for slot in sorted(row.slots, key=lambda s: s.offset):
                start = max(slot.offset, cursor)
                if start != slot.offset:
                    logger.debug("row %d: %s shifted from %d to %d", r, slot.instance, slot.offset, start)
                self.instance_start[slot.instance] = start
                cursor = start + self.footprint(slot.instance)
            length = max(row.track_regions or 0, cursor, 1)
            if row.track_regions and cursor > row.track_regions:
                logger.debug("row %d widened from %d to %d regions", r, row.track_regions, cursor)
            spans.append(RowSpan(p_start=base, n_start=base + length, length=length))
            base += 2 * length
        return spans

    def _place_transistors(self) -> list[TransistorSite]:
        self.stage_transistors: list[list[int]] = [[] for _ in self.stages]
        self.transistor_index: dict[tuple[int, str], int] = {}
        placed = []
        for site in self.stages:
            span = self.row_spans[site.row]
            for t in site.stage.transistors:
                track = span.p_start if t.polarity == "p" else span.n_start
                idx = len(placed)
                placed.append(TransistorSite(
                    index=idx,
                    stage=site.index,
                    name=t.name,
                    polarity=t.polarity,
                    width=t.width,
                    start=track + self.instance_start[site.instance] + t.offset,
                    label=f"{site.label}/{t.name}",
                ))
                self.stage_transistors[site.index].append(idx)
                self.transistor_index[(site.index, t.name)] = idx
        return placed

    def stages_of(self, instance: str) -> list[StageSite]:
        return self._by_instance.get(instance, [])

    @cached_property
    def _incidence(self) -> sp.csr_matrix:
        rows, cols = [], []
        for t in self.transistors:
            rows.extend([t.index] * t.width)
            cols.extend(range(t.start, t.start + t.width))
        data = np.ones(len(rows))
        return sp.csr_matrix((data, (rows, cols)), shape=(len(self.transistors), self.n_regions))

    def incidence(self) -> sp.csr_matrix:
        """B: t × r, B[i, j] = 1 iff transistor i overlaps region j."""
        return self._incidence

    def group_rows(self, stage: int, names) -> sp.csr_matrix:
        """Sum of the B rows of the named transistors of one stage (1 × r)."""
        idx = [self.transistor_index[(stage, n)] for n in names]
        return sp.csr_matrix(self._incidence[idx].sum(axis=0))

    @cached_property
    def region_rows(self) -> np.ndarray:
        owner = np.empty(self.n_regions, dtype=np.int64)
        for r, span in enumerate(self.row_spans):
            owner[span.p_start:span.n_start + span.length] = r
        return owner

    @cached_property
    def arc_preds(self) -> list[np.ndarray]:
        preds = [[] for _ in self.stages]
        for info in self.nets.values():
            if info.driver is None:
                continue
            for load, _ in info.loads:
                if not self.stages[load].launch and info.driver not in preds[load]:
                    preds[load].append(info.driver)
        return [np.array(sorted(p), dtype=np.int64) for p in preds]

    def load_capacitance(self, stage: int) -> float:
        """Fan-out input capacitance plus primary-output load on the stage's output net."""
        site = self.stages[stage]
        info = self.nets[site.output]
        total = sum(self.stages[s].stage.arc_for(inp).c_in for s, inp in info.loads)
        total += sum(self.stages[l].stage.arc_for(inp).c_in for d, l, inp, _ in self.feedback_pairs if d == stage)
        if site.output in self.netlist.primary_outputs:
            total += self.netlist.output_load
        return total

    def fixed_delay(self, stage: int) -> float:
        site = self.stages[stage]
        delays = [self.netlist.primary_inputs[n].delay for n in site.inputs.values() if n in self.netlist.primary_inputs]
        return max(delays, default=0.0)

    def reads_primary_input(self, stage: int) -> bool:
        site = self.stages[stage]
        return site.launch or any(n in self.netlist.primary_inputs for n in site.inputs.values())

    def gate_pairs(self) -> list[GatePair]:
        pairs = []
        for net, info in self.nets.items():
            for load, inp in info.loads:
                pairs.append(GatePair(driver=info.driver, loader=load, input=inp, net=net))
        for driver, loader, inp, net in self.feedback_pairs:
            pairs.append(GatePair(driver=driver, loader=loader, input=inp, net=net, feedback=True))
        return pairs

    def timing_case(self, stage: int):
        return self.stages[stage].stage.timing_case(self.nominal_count)


def _net_loads(netlist: Netlist, library: CellLibrary) -> dict[str, list[tuple[str, str]]]:
    loads: dict[str, list[tuple[str, str]]] = {}
    for inst in netlist.instances:
        for pin in library.cell(inst.cell).inputs:
            loads.setdefault(inst.pins[pin], []).append((inst.name, pin))
    return loads


def fanouts(netlist: Netlist, library: CellLibrary) -> dict[str, float]:
    """Output load capacitance over the smallest input capacitance, per instance."""
    loads = _net_loads(netlist, library)
    drives = {inst.name: inst for inst in netlist.instances}
    result = {}
    for inst in netlist.instances:
        cell = library.cell(inst.cell)
        load = 0.0
        for out in cell.outputs:
            net = inst.pins[out]
            for other, pin in loads.get(net, []):
                loader = drives[other]
                load += library.cell(loader.cell).input_capacitance(pin, loader.drive)
            if net in netlist.primary_outputs:
                load += netlist.output_load
        result[inst.name] = load / cell.min_input_capacitance(inst.drive)
    return result


def apply_upsizes(netlist: Netlist, library: CellLibrary, sequence: list[str]) -> Netlist:
    drives = {inst.name: inst.drive for inst in netlist.instances}
    for name in sequence:
        nxt = library.cell(netlist.instance(name).cell).drive_chain.next(drives[name])
        if nxt is None:
            raise ValueError(f"instance {name} is already at maximum drive")
        drives[name] = nxt
    instances = [inst.model_copy(update={"drive": drives[inst.name]}) for inst in netlist.instances]
    return netlist.model_copy(update={"instances": instances})


def upsize_sequence(netlist: Netlist, library: CellLibrary, k_max: int) -> list[str]:
    """Instance names in the order the largest-fan-out loop would upsize them."""
    if k_max < 0:
        raise ValueError(f"k must be >= 0, got {k_max}")
    sequence = []
    current = netlist
    for _ in range(k_max):
        table = fanouts(current, library)
        best, best_fanout = None, -1.0
        for inst in current.instances:
            if library.cell(inst.cell).drive_chain.next(inst.drive) is None:
                continue
            if table[inst.name] > best_fanout:
                best, best_fanout = inst.name, table[inst.name]
        if best is None:
            logger.info("selective upsizing stopped after %d steps: every cell at maximum drive", len(sequence))
            break
        sequence.append(best)
        current = apply_upsizes(current, library, [best])
    return sequence


def selective_upsize(netlist: Netlist, library: CellLibrary, k: int) -> tuple[Netlist, int]:
    sequence = upsize_sequence(netlist, library, k)
    return apply_upsizes(netlist, library, sequence), len(sequence)


def min_width_upsize(netlist: Netlist, w_min: int) -> Netlist:
    if w_min < 1:
        raise ValueError(f"w_min must be >= 1, got {w_min}")
    return netlist.model_copy(update={"w_min": w_min})
