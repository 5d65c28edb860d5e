"""Python access to the perft_lab core: accounting, routing, analysis and checkpoints."""

import json as _json

from . import _core
from ._core import (
    ConfigError,
    DomainError,
    InputError,
    IoError,
    Model,
    chi2_cdf,
    decode,
    effective_count,
    encode,
    redundancy_estimate,
    route,
)

__all__ = [
    "ConfigError",
    "DomainError",
    "InputError",
    "IoError",
    "Model",
    "chi2_cdf",
    "count_params",
    "decode",
    "effective_count",
    "encode",
    "generate_task",
    "load_model",
    "main",
    "redundancy_estimate",
    "route",
    "run_cli",
]


def count_params(config):
    """Activated trainable parameters for a run config given as a dict."""
    return _json.loads(_core.count_params_json(_json.dumps(config)))


def generate_task(spec, n):
    """Synthetic (instruction, answer) pairs for a task spec dict."""
    return _core.generate_task(_json.dumps(spec), n)


def load_model(path):
    return Model.load(str(path))


def run_cli(*args):
    """Run a perft_lab subcommand in-process; returns (exit_code, stdout, stderr)."""
    return _core.run_cli([str(a) for a in args])


def main():
    import sys

    code, out, err = run_cli(*sys.argv[1:])
    sys.stdout.write(out)
    sys.stderr.write(err)
    raise SystemExit(code)
