import json
import os
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from cell_library import CellLibrary
from circuit import Netlist
from errors import InputError
from optimizer import SearchConfig
from variation import ProcessingParams, TechnologyParams

SCHEMA_VERSION = 1
OUT_DIR_ENV = "CNTCO_OUT_DIR"

# processing sets used for the linearized-vs-nonlinear sweep, p_rm = 99.99% throughout
VALIDATION_PROCESSING_SETS = [
    (0.50, 0.10, 0.05), (0.50, 0.05, 0.05), (0.50, 0.01, 0.05), (0.50, 0.001, 0.05),
    (0.35, 0.05, 0.05), (0.10, 0.05, 0.05), (0.25, 0.05, 0.05), (0.25, 0.05, 0.025),
]


class Seeds(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    sample: int = 0
    mvn: int = 0
    yield_: int = Field(0, alias="yield")
    validation: int = 1

    @classmethod
    def derived(cls, key: int) -> "Seeds":
        sample, mvn, yield_, validation = (int(v) for v in np.random.SeedSequence(key).generate_state(4))
        return cls(sample=sample, mvn=mvn, yield_=yield_, validation=validation)


class Trials(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    ssta: int = Field(2000, ge=100)
    yield_: int = Field(10_000, ge=10_000, alias="yield")
    pnmv_mc: int = Field(200_000, ge=1)


class ValidationConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    processing_sets: list[ProcessingParams] = Field(default_factory=lambda: [
        ProcessingParams(idc=idc, p_m=p_m, p_rs=p_rs) for idc, p_m, p_rs in VALIDATION_PROCESSING_SETS
    ])
    k_values: list[int] = Field(default_factory=lambda: list(range(7)))
    idc_sweep: list[float] = Field(default_factory=lambda: [0.05, 0.1, 0.25, 0.5, 0.75, 1.0])
    pnmv_snm_r: float | None = Field(None, ge=0.0, description="snm_r for the PNMV comparison; None keeps the run's")
    edp_suboptimality_max: float = 0.02
    speedup_min: float = 10.0
    median_error_max: float = 0.005
    spread_error_max: float = 0.02
    pnmv_rms_max: float = 0.10
    power_min: float = 0.90


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    netlists: list[Path] = Field(min_length=1)
    library: Path
    technology: TechnologyParams = Field(default_factory=TechnologyParams)
    processing: ProcessingParams = Field(default_factory=ProcessingParams)
    search: SearchConfig = Field(default_factory=SearchConfig)
    seeds: Seeds = Field(default_factory=Seeds)
    trials: Trials = Field(default_factory=Trials)
    node_label: str = "default"
    output_dir: Path = Path("out")
    validation: ValidationConfig = Field(default_factory=ValidationConfig)


def _read_json(path: Path, what: str) -> Any:
    if not path.is_file():
        raise InputError(f"{what}: file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise InputError(f"{what}: {path} is not valid JSON ({exc})") from None


def load_run_config(path: str | Path, out_dir: str | Path | None = None,
                    seed_override: int | None = None) -> RunConfig:
    """Parse a run config; relative paths resolve against the config's directory."""
    path = Path(path)
    raw = _read_json(path, "config")
    if not isinstance(raw, dict):
        raise InputError(f"config: {path} must hold a JSON object")
    base = path.parent
    for key in ("library", "output_dir"):
        if key in raw and raw[key] is not None:
            raw[key] = str(base / raw[key])
    if isinstance(raw.get("netlists"), list):
        raw["netlists"] = [str(base / p) for p in raw["netlists"]]
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(p) for p in first["loc"])
        raise InputError(f"config field {field}: {first['msg']}") from None

    if not config.library.is_file():
        raise InputError(f"config field library: file not found: {config.library}")
    for i, p in enumerate(config.netlists):
        if not p.is_file():
            raise InputError(f"config field netlists[{i}]: file not found: {p}")

    update = {}
    if out_dir is not None:
        update["output_dir"] = Path(out_dir)
    elif os.environ.get(OUT_DIR_ENV):
        update["output_dir"] = Path(os.environ[OUT_DIR_ENV])
    if seed_override is not None:
        update["seeds"] = Seeds.derived(seed_override)
    return config.model_copy(update=update) if update else config


def load_library(path: str | Path) -> CellLibrary:
    raw = _read_json(Path(path), "library")
    try:
        return CellLibrary.model_validate(raw)
    except ValidationError as exc:
        raise InputError(f"library {path}: {exc}") from None


def save_library(library: CellLibrary, path: str | Path) -> None:
    Path(path).write_text(library.model_dump_json(indent=2, exclude_defaults=False) + "\n", encoding="utf-8")


def load_netlist(path: str | Path) -> Netlist:
    raw = _read_json(Path(path), "netlist")
    try:
        return Netlist.model_validate(raw)
    except ValidationError as exc:
        raise InputError(f"netlist {path}: {exc}") from None


def save_netlist(netlist: Netlist, path: str | Path) -> None:
    Path(path).write_text(netlist.model_dump_json(indent=2) + "\n", encoding="utf-8")


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"schema_version": SCHEMA_VERSION, **_jsonable(payload)}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, ensure_ascii=False, indent=2)
        f.write("\n")
    return path


def write_csv(path: str | Path, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# schema_version: {SCHEMA_VERSION}\n")
        frame.to_csv(f, index=False, lineterminator="\n")
    return path


def read_csv(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")
