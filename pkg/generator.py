"""Random leveled combinational circuits with aligned-active row placement."""

import logging
import math

import numpy as np

from cell_library import CellLibrary
from circuit import InstanceDef, Netlist, PrimaryInput, RowDef, RowSlot

logger = logging.getLogger(__name__)

DEFAULT_CELL_MIX = {"INV": 0.25, "BUF": 0.05, "NAND2": 0.30, "NOR2": 0.25, "AOI21": 0.15}


def cell_footprint(library: CellLibrary, cell_name: str, drive: int = 1) -> int:
    """Regions a cell occupies on each polarity track at the given drive."""
    cell = library.cell(cell_name)
    factor = cell.drive_factor(drive)
    return max(
        round(t.offset * factor) + max(1, round(t.width * factor))
        for stage in cell.stages
        for t in stage.transistors
    )


def _pick_inputs(rng: np.random.Generator, candidates: list[str], required: list[str], count: int,
                 fanout: dict[str, int], mean_fanout: float, max_fanout: int) -> list[str]:
    chosen = []
    pool = required
    for _ in range(count):
        options = [s for s in pool if s not in chosen and fanout[s] < max_fanout]
        if not options:
            options = [s for s in candidates if s not in chosen and fanout[s] < max_fanout]
        if not options:
            options = [s for s in candidates if s not in chosen] or candidates
        weights = np.exp(-np.array([fanout[s] for s in options]) / mean_fanout)
        pick = options[int(rng.choice(len(options), p=weights / weights.sum()))]
        chosen.append(pick)
        fanout[pick] += 1
        pool = candidates
    return chosen


def generate_netlist(library: CellLibrary, gate_count: int, depth: int = 8, rows: int = 4,
                     mean_fanout: float = 2.0, max_fanout: int = 8, primary_inputs: int | None = None,
                     seed: int = 0, cell_mix: dict[str, float] | None = None, output_load: float = 1e-16) -> Netlist:
    """Leveled random DAG; every gate of level L reads at least one signal of level L-1.

    Fan-in sources are drawn with weight exp(-fanout/mean_fanout) and capped at
    `max_fanout` where possible. Signals nobody reads become primary outputs.
    Rows are filled in level order and cells abut at aligned offsets.
    """
    if gate_count < 1:
        raise ValueError(f"gate_count must be >= 1, got {gate_count}")
    if depth < 1 or rows < 1 or mean_fanout <= 0 or max_fanout < 1:
        raise ValueError("depth, rows, mean_fanout and max_fanout must be positive")
    name = f"gen{gate_count}_s{seed}"
    if gate_count == 1:
        return Netlist(
            name=name,
            primary_inputs={"in0": PrimaryInput()},
            primary_outputs=["n0"],
            output_load=output_load,
            instances=[InstanceDef(name="g0", cell="INV", pins={"A": "in0", "Y": "n0"})],
            rows=[RowDef(slots=[RowSlot(instance="g0", offset=0)])],
        )

    rng = np.random.default_rng(seed)
    mix = cell_mix or DEFAULT_CELL_MIX
    cells = sorted(mix)
    probs = np.array([mix[c] for c in cells], dtype=float)
    probs /= probs.sum()
    depth = min(depth, gate_count)
    n_pi = primary_inputs or max(2, int(math.ceil(math.sqrt(gate_count))))

    pis = [f"in{i}" for i in range(n_pi)]
    by_level: list[list[str]] = [pis]
    fanout = {s: 0 for s in pis}
    instances = []
    for i in range(gate_count):
        level = 1 + i * depth // gate_count
        while len(by_level) <= level:
            by_level.append([])
        cell = library.cell(cells[int(rng.choice(len(cells), p=probs))])
        earlier = [s for lvl in by_level[:level] for s in lvl]
        inputs = _pick_inputs(rng, earlier, by_level[level - 1], len(cell.inputs), fanout, mean_fanout, max_fanout)
        out = f"n{i}"
        pins = dict(zip(cell.inputs, inputs))
        pins[cell.outputs[0]] = out
        instances.append(InstanceDef(name=f"g{i}", cell=cell.name, pins=pins))
        by_level[level].append(out)
        fanout[out] = 0

    outputs = [f"n{i}" for i in range(gate_count) if fanout[f"n{i}"] == 0]
    per_row = int(math.ceil(gate_count / min(rows, gate_count)))
    placement = []
    for start in range(0, gate_count, per_row):
        slots, offset = [], 0
        for inst in instances[start:start + per_row]:
            slots.append(RowSlot(instance=inst.name, offset=offset))
            offset += cell_footprint(library, inst.cell)
        placement.append(RowDef(slots=slots))

    netlist = Netlist(
        name=name,
        primary_inputs={p: PrimaryInput() for p in pis},
        primary_outputs=outputs,
        output_load=output_load,
        instances=instances,
        rows=placement,
    )
    logger.info("generated %s: %d gates, %d levels, %d primary outputs, %d rows",
                name, gate_count, depth, len(outputs), len(placement))
    return netlist
