from pathlib import Path

import pytest

from circuit import InstanceDef, Netlist, PlacedCircuit, PrimaryInput, RowDef, RowSlot
from data_loader import load_library
from variation import TechnologyParams

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def library():
    return load_library(ROOT / "data" / "refcell.json")


@pytest.fixture(scope="session")
def tech():
    return TechnologyParams()


def chain_netlist(length: int = 3, track_regions: int | None = None, w_min: int = 1, name: str = "chain") -> Netlist:
    """Inverters g0 -> g1 -> ... abutted in one row, fed by primary input `a`."""
    instances = [
        InstanceDef(name=f"g{i}", cell="INV", pins={"A": "a" if i == 0 else f"n{i - 1}", "Y": f"n{i}"})
        for i in range(length)
    ]
    return Netlist(
        name=name,
        primary_inputs={"a": PrimaryInput()},
        primary_outputs=[f"n{length - 1}"],
        output_load=1e-16,
        instances=instances,
        rows=[RowDef(slots=[RowSlot(instance=f"g{i}", offset=2 * i) for i in range(length)],
                     track_regions=track_regions)],
        w_min=w_min,
    )


def mixed_netlist() -> Netlist:
    """NAND2 -> INV in row 0, NOR2 -> INV in row 1."""
    return Netlist(
        name="mixed",
        primary_inputs={"a": PrimaryInput(), "b": PrimaryInput(delay=2e-12), "c": PrimaryInput()},
        primary_outputs=["n3"],
        output_load=1e-16,
        instances=[
            InstanceDef(name="g0", cell="NAND2", pins={"A": "a", "B": "b", "Y": "n0"}),
            InstanceDef(name="g1", cell="INV", pins={"A": "n0", "Y": "n1"}),
            InstanceDef(name="g2", cell="NOR2", pins={"A": "n1", "B": "c", "Y": "n2"}),
            InstanceDef(name="g3", cell="INV", pins={"A": "n2", "Y": "n3"}),
        ],
        rows=[
            RowDef(slots=[RowSlot(instance="g0", offset=0), RowSlot(instance="g1", offset=2)]),
            RowDef(slots=[RowSlot(instance="g2", offset=0), RowSlot(instance="g3", offset=2)]),
        ],
    )


def flop_netlist() -> Netlist:
    """INV -> DFF -> INV; the flop breaks the timing graph at its launch stage."""
    return Netlist(
        name="flop",
        primary_inputs={"a": PrimaryInput()},
        primary_outputs=["n2"],
        output_load=1e-16,
        instances=[
            InstanceDef(name="g0", cell="INV", pins={"A": "a", "Y": "n0"}),
            InstanceDef(name="ff", cell="DFF", pins={"D": "n0", "Q": "n1"}),
            InstanceDef(name="g1", cell="INV", pins={"A": "n1", "Y": "n2"}),
        ],
        rows=[RowDef(slots=[RowSlot(instance="g0", offset=0), RowSlot(instance="ff", offset=2),
                            RowSlot(instance="g1", offset=10)])],
    )


@pytest.fixture
def chain(library, tech):
    return PlacedCircuit(chain_netlist(), library, nominal_count=tech.lambda_w)


@pytest.fixture
def mixed(library, tech):
    return PlacedCircuit(mixed_netlist(), library, nominal_count=tech.lambda_w)


@pytest.fixture
def flop(library, tech):
    return PlacedCircuit(flop_netlist(), library, nominal_count=tech.lambda_w)
