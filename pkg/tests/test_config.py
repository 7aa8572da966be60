import argparse

import pytest

from obsfusion.cli import get_cli_args
from obsfusion.config import (
    RUN_CONFIG_SCHEMA_FILE,
    ConfigError,
    RunConfig,
    build_run_config,
    defaults_table,
    header_lines,
    load_data,
    load_schema,
    validate_document,
)
from obsfusion.scene_io import load_scene

_has_yaml = True
try:
    import yaml  # noqa: F401
except ImportError:
    _has_yaml = False


def test_run_config_schema(config_dir, schema_dir):
    schema = load_schema(RUN_CONFIG_SCHEMA_FILE, schema_dir)
    document = load_data(config_dir / "run.json")
    validate_document(document, schema, "run.json")


def test_run_config_schema_rejects_unknown_key(config_dir, schema_dir):
    schema = load_schema(RUN_CONFIG_SCHEMA_FILE, schema_dir)
    document = load_data(config_dir / "run_bad.json")
    with pytest.raises(ConfigError, match="sigmaa"):
        validate_document(document, schema, "run_bad.json")


def test_models(config_dir):
    config = RunConfig.model_validate(load_data(config_dir / "run.json"))
    assert config.d_th == 0.5
    assert config.temporal_settings().method == "forward"
    assert config.temporal_settings().k == 3
    assert config.curb_params().height_jump == 0.08


def test_defaults():
    config = RunConfig()
    assert config.d_th == 0.4
    assert config.max_spread == 2.0
    assert config.sigma == 5.0
    assert config.temporal_k == 4
    assert config.lr == 1e-5
    table = defaults_table()
    for name in RunConfig.model_fields:
        assert name in table


def test_load_json5_config(config_dir):
    """JSON5 config parses identically to JSON."""
    assert load_data(config_dir / "run.json") == load_data(config_dir / "run.json5")


@pytest.mark.skipif(not _has_yaml, reason="PyYAML not installed")
def test_load_yaml_config(config_dir):
    """YAML config parses identically to JSON."""
    assert load_data(config_dir / "run.json") == load_data(config_dir / "run.yaml")


@pytest.mark.skipif(not _has_yaml, reason="PyYAML not installed")
def test_scene_text_matches_yaml(config_dir, schema_dir):
    text_scene = load_scene(config_dir / "scene.txt", schema_dir)
    yaml_scene = load_scene(config_dir / "scene.yaml", schema_dir)
    assert text_scene.model_dump() == yaml_scene.model_dump()


def test_scene_json(config_dir, schema_dir):
    scene = load_scene(config_dir / "scene.json", schema_dir)
    assert scene.boxes[0].center == (0, 10, 0.25)
    assert scene.curbs[0].offset == 4
    assert scene.trajectory.n == 3
    assert scene.camera.width == 320


def test_unsupported_suffix(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("d_th = 0.4\n")
    with pytest.raises(ConfigError):
        load_data(path)


def test_flags_override_file(config_dir, schema_dir):
    cli = get_cli_args().parse_args(
        [
            "pipeline",
            "--seq",
            "seq",
            "--out",
            "out",
            "--config",
            str(config_dir / "run.json"),
            "--sigma",
            "3",
        ]
    )
    config = build_run_config(cli, schema_dir)
    assert config.sigma == 3.0
    assert config.d_th == 0.5
    assert config.temporal_k == 3
    assert config.ncc_threshold == 0.6


def test_out_of_range_flag(schema_dir):
    cli = argparse.Namespace(config=None, d_th=-1.0, verbose=False)
    with pytest.raises(ConfigError, match="d_th"):
        build_run_config(cli, schema_dir)


def test_header_excludes_execution_fields():
    lines = header_lines(RunConfig(jobs=8, verbose=True), "detect", {"scan": "s.txt"})
    assert lines[0] == "command=detect"
    assert "scan=s.txt" in lines
    assert "d_th=0.4" in lines
    assert not any(line.startswith(("jobs=", "verbose=")) for line in lines)
    assert lines == header_lines(RunConfig(jobs=1), "detect", {"scan": "s.txt"})


def test_malformed_json5_is_config_error(tmp_path):
    broken = tmp_path / "broken.json5"
    broken.write_text("{ d_th: ")
    with pytest.raises(ConfigError, match="broken.json5"):
        load_data(broken)


@pytest.mark.skipif(not _has_yaml, reason="PyYAML not installed")
def test_malformed_yaml_is_config_error(tmp_path):
    broken = tmp_path / "broken.yaml"
    broken.write_text("d_th: 0.5\nsigma: [5\n")
    with pytest.raises(ConfigError, match="broken.yaml"):
        load_data(broken)
