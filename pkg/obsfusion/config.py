import argparse
import json
from pathlib import Path
from typing import Any, Literal

import json5
from jsonschema import ValidationError as SchemaValidationError
from jsonschema import validate
from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as ModelValidationError

from obsfusion.errors import ObsFusionError
from obsfusion.models import CurbParams, TemporalSettings

try:
    import yaml
except ImportError:
    yaml = None  # type: ignore[assignment]

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "schema"
RUN_CONFIG_SCHEMA_FILE = "run_config.json"
SCENE_SCHEMA_FILE = "scene.json"

# Fields that change how a run executes but never what it writes.
EXECUTION_FIELDS = ("jobs", "verbose")


class ConfigError(ObsFusionError):
    exit_code = 2


class RunConfig(BaseModel):
    """Every tunable of a run. Defaults follow the published method."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # ── Detection ──
    d_th: float = Field(default=0.4, gt=0, description="breakpoint threshold (m)")
    max_spread: float = Field(
        default=2.0, gt=0, description="max obstacle azimuth spread (deg)"
    )
    road: Literal["auto", "curb", "mask", "none"] = Field(
        default="auto", description="road filter (auto: mask when present, else curb)"
    )
    curb_jump: float = Field(default=0.08, gt=0, description="curb height jump (m)")
    forward_azimuth: float = Field(
        default=90.0, ge=0, lt=360, description="forward azimuth (deg)"
    )
    fov_half_width: float = Field(
        default=90.0, gt=0, le=180, description="road search half width (deg)"
    )
    min_curb_span: float = Field(
        default=3.0, gt=0, description="min curb azimuth span (deg)"
    )

    # ── Confidence maps ──
    sigma: float = Field(default=5.0, gt=0, description="Gaussian sigma (px)")
    z_min: float = Field(default=0.1, gt=0, description="near plane (m)")

    # ── Temporal ──
    temporal_method: Literal["template", "forward", "none"] = Field(
        default="template", description="temporal propagation"
    )
    temporal_k: int = Field(default=4, ge=1, description="frames kept in memory")
    template_size: int = Field(default=32, ge=3, description="template side (px)")
    search_radius: int = Field(default=48, ge=1, description="search radius (px)")
    ncc_threshold: float = Field(
        default=0.6, ge=-1, le=1, description="NCC acceptance threshold"
    )
    merge_radius: float = Field(
        default=10.0, ge=0, description="re-detection merge radius (px)"
    )
    channel: Literal["luma", "red", "green", "blue"] = Field(
        default="luma", description="matching channel"
    )

    # ── Calibration ──
    lr: float = Field(default=1e-5, gt=0, description="Adam learning rate")
    max_iters: int = Field(default=20000, ge=1, description="Adam iteration cap")
    tol: float = Field(default=1e-9, ge=0, description="loss tolerance (px)")
    stall_window: int = Field(default=50, ge=1, description="stall window (iters)")
    stall_delta: float = Field(
        default=1e-9, ge=0, description="min improvement per stall window (px)"
    )

    # ── Evaluation ──
    min_area: int = Field(default=3, ge=1, description="min instance area (px)")
    overlap_threshold: float = Field(
        default=0.2, ge=0, lt=1, description="instance overlap ratio"
    )
    confidence_threshold: float = Field(
        default=0.5, gt=0, le=1, description="obstacle confidence cut"
    )

    # ── Execution ──
    jobs: int = Field(default=1, ge=1, description="worker threads")
    verbose: bool = Field(default=False, description="debug logging")

    def temporal_settings(self) -> TemporalSettings:
        return TemporalSettings(
            k=self.temporal_k,
            template_size=self.template_size,
            search_radius=self.search_radius,
            ncc_threshold=self.ncc_threshold,
            merge_radius=self.merge_radius,
            method=self.temporal_method,
            channel=self.channel,
        )

    def curb_params(self) -> CurbParams:
        return CurbParams(
            forward_azimuth=self.forward_azimuth,
            fov_half_width=self.fov_half_width,
            height_jump=self.curb_jump,
            min_curb_span=self.min_curb_span,
        )


def load_data(path: str | Path) -> Any:
    path_obj = Path(path)
    suffix = path_obj.suffix.lower()
    with open(path_obj, "r") as fh:
        if suffix in (".yml", ".yaml"):
            if yaml is None:
                raise ImportError(
                    "PyYAML is required to load YAML files. "
                    "Install with: uv sync --extra yaml"
                )
            try:
                return yaml.safe_load(fh)
            except yaml.YAMLError as e:
                mark = getattr(e, "problem_mark", None)
                where = f" line {mark.line + 1}" if mark is not None else ""
                problem = getattr(e, "problem", None) or "malformed YAML"
                raise ConfigError(f"{path_obj.name}:{where} {problem}") from e
        elif suffix in (".json", ".json5"):
            try:
                return json5.load(fh)
            except ValueError as e:
                message = str(e).splitlines()[0] if str(e) else "malformed JSON"
                raise ConfigError(f"{path_obj.name}: {message}") from e
        else:
            raise ConfigError(
                f"Unsupported file format for {path_obj.name}. "
                "Use .json, .json5, .yml, or .yaml"
            )


def load_schema(
    schema_file_name: str, schemas: str | Path = SCHEMA_DIR
) -> dict[str, Any]:
    schema_file = Path(schemas) / schema_file_name
    if not schema_file.exists():
        raise FileNotFoundError(f"Unable to find schema. Expected: {schema_file}")
    with open(schema_file, "rt") as fh:
        result: dict[str, Any] = json.load(fh)
        return result


def validate_document(document: Any, schema: dict[str, Any], name: str) -> None:
    try:
        validate(instance=document, schema=schema)
    except SchemaValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{name}: {where}: {e.message}") from e


def build_run_config(
    cli: argparse.Namespace, schemas: str | Path = SCHEMA_DIR
) -> RunConfig:
    """
    Merge a run configuration file with flags given on the command line.
    Flags win over the file; the file wins over defaults.
    """
    values: dict[str, Any] = {}
    config_path = getattr(cli, "config", None)
    if config_path:
        document = load_data(config_path)
        validate_document(
            document, load_schema(RUN_CONFIG_SCHEMA_FILE, schemas), str(config_path)
        )
        values.update(document)

    for name in RunConfig.model_fields:
        if name == "verbose":
            continue
        flag = getattr(cli, name, None)
        if flag is not None:
            values[name] = flag
    if getattr(cli, "verbose", False):
        values["verbose"] = True

    try:
        return RunConfig.model_validate(values)
    except ModelValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"Invalid setting {field!r}: {first['msg']}") from e


def defaults_table() -> str:
    lines = ["defaults:"]
    for name, info in RunConfig.model_fields.items():
        lines.append(f"  {name:<22}{info.default!s:<12}{info.description or ''}")
    return "\n".join(lines)


def header_lines(
    config: RunConfig, command: str, inputs: dict[str, str | None]
) -> list[str]:
    """Reproducibility header: command, inputs and every artifact-affecting field."""
    lines = [f"command={command}"]
    lines += [f"{key}={value}" for key, value in sorted(inputs.items()) if value]
    dumped = config.model_dump(exclude=set(EXECUTION_FIELDS))
    lines += [
        f"{key}={dumped[key]!r}" for key in RunConfig.model_fields if key in dumped
    ]
    return lines
