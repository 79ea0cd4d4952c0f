"""Configuration, run orchestration, evaluation and the CLI."""
from .config import (
    PROFILES,
    PROTOCOLS,
    ConfigError,
    ExperimentConfig,
    config_hash,
    desk_profile,
    get_profile,
    load_config,
    paper_profile,
    parse_config,
    serialize,
    with_overrides,
)
from .runner import (
    RunManifest,
    build_splits,
    evaluate,
    format_table,
    grid,
    load_manifest,
    run,
    summarize,
    write_grid_configs,
    write_splits,
)
