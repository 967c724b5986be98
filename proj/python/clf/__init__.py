"""Python bindings for the clf continual-learning core."""

import json as _json

from . import _core
from ._core import (
    ConfigError,
    ContractError,
    RunError,
    avg_accuracy,
    avg_forgetting,
    capacity,
    config_hash,
    format_result,
    gem_project,
    herding_select,
    latest_checkpoint,
    ledger,
    ledger_methods,
    make_toy_dataset,
    method_ids,
    report,
    run,
    save_toy_dataset,
    stability_decay,
    storage_ledger,
    workers_from_env,
)


def load_config(path):
    """Parsed config with every default filled in."""
    return _json.loads(_core.config_echo(str(path)))


__all__ = [name for name in dir() if not name.startswith("_")]
