"""Run configuration: one flat table of keys shared by the JSON file and CLI flags.

A key ``pos_frac`` is the flag ``--pos-frac``. Each key lists the subcommands
that read it; a JSON config may carry keys for other subcommands (so a single
file can drive a whole pipeline) but never keys outside the table.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import RejectedInput


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    default: object
    help: str
    commands: tuple[str, ...]
    choices: tuple | None = None
    nargs: str | None = None

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


SOURCES = ("fine", "coarse", "fine_cvx", "coarse_cvx", "random")

KEYS = (
    # dataset
    Key("count", int, 2500, "number of samples to generate", ("synth",)),
    Key("pos_frac", float, 0.5, "fraction of positive samples", ("synth",)),
    Key("intensity_min", float, 0.5, "lowest blob peak intensity", ("synth",)),
    Key("intensity_max", float, 0.9, "highest blob peak intensity", ("synth",)),
    Key("radius_min", float, 5.0, "smallest blob half-maximum radius (pixels)", ("synth",)),
    Key("radius_max", float, 9.0, "largest blob half-maximum radius (pixels)", ("synth",)),
    Key("texture", float, 0.3, "background texture amplitude", ("synth",)),
    Key("noise", float, 0.05, "Gaussian noise standard deviation", ("synth",)),
    # shared
    Key("seed", int, 0, "random seed", ("synth", "train", "perturb")),
    Key("out", str, None, "output path (file for synth/witness, directory otherwise; witness prints to stdout without it)", ("synth", "train", "project", "witness", "report")),
    Key("data", str, None, "CADS dataset file", ("train", "attribute", "perturb", "eval")),
    # training
    Key("eval_data", str, None, "held-out CADS file for per-epoch evaluation", ("train",)),
    Key("variant", str, "dual", "model variant", ("train",), choices=("baseline", "tau_k", "tau_l", "unconstrained", "dual", "kl_zero_lf", "kl_zero_fl")),
    Key("alpha", float, 10.0, "consistency penalty weight", ("train",)),
    Key("learning_rate", float, 1e-3, "Adam learning rate", ("train",)),
    Key("epochs", int, 30, "training epochs", ("train",)),
    Key("batch_size", int, 16, "minibatch size", ("train",)),
    Key("witness", str, "free", "multiplier layer for the dual variant", ("train",), choices=("free", "map", "closed_form")),
    Key("key_scale", float, 0.1, "standard deviation of initial gate keys", ("train",)),
    Key("init_from", str, None, "training directory whose checkpoint seeds matching parameters (fine-tuning)", ("train",)),
    # projection / witness
    Key("tau_fine", str, None, "CSV of the fine attention map", ("project", "witness")),
    Key("tau_coarse", str, None, "CSV of the coarse attention map", ("project", "witness")),
    Key("fine", int, None, "fine grid side (or cell count for single-row CSVs)", ("project", "witness")),
    Key("coarse", int, None, "coarse grid side (or cell count for single-row CSVs)", ("project", "witness")),
    Key("tol", float, 1e-10, "oracle optimality-gap tolerance", ("project", "attribute")),
    # attribution and evaluation
    Key("run", str, None, "training output directory", ("attribute", "perturb", "eval")),
    Key("site", str, "fine", "attention site to read", ("attribute",), choices=("fine", "coarse")),
    Key("cvx", bool, False, "project the attention pair onto the consistent set before reading the site", ("attribute",)),
    Key("heatmaps", int, 8, "number of records to export as PGM/CSV heatmaps", ("attribute",)),
    Key("source", str, "fine", "which stored attribution to evaluate", ("perturb", "eval"), choices=SOURCES),
    Key("scorer", str, None, "training directory of the baseline classifier used for re-scoring", ("perturb",)),
    Key("fraction_step", float, 0.05, "spacing of the removed-pixel fractions", ("perturb",)),
    Key("runs", list, None, "run directories to aggregate", ("report",), nargs="+"),
)

KEY_BY_NAME = {k.name: k for k in KEYS}
COMMANDS = ("synth", "train", "project", "witness", "attribute", "perturb", "eval", "report")
REQUIRED = {
    "synth": ("out",),
    "train": ("data", "out"),
    "project": ("tau_fine", "tau_coarse", "fine", "coarse", "out"),
    "witness": ("tau_fine", "tau_coarse", "fine", "coarse"),
    "attribute": ("run", "data"),
    "perturb": ("run", "data", "scorer"),
    "eval": ("run", "data"),
    "report": ("runs", "out"),
}


def keys_for(command: str) -> list[Key]:
    return [k for k in KEYS if command in k.commands]


def _coerce(key: Key, value):
    if value is None:
        return None
    if key.type is bool:
        if not isinstance(value, bool):
            raise RejectedInput(f"{key.name} must be true or false")
        return value
    if key.type is list:
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise RejectedInput(f"{key.name} must be a list of strings")
        return list(value)
    if key.type is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, key.type) or isinstance(value, bool) and key.type is not bool:
        raise RejectedInput(f"{key.name} must be of type {key.type.__name__}, got {value!r}")
    if key.choices and value not in key.choices:
        raise RejectedInput(f"{key.name} must be one of {', '.join(map(str, key.choices))}")
    return value


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise RejectedInput(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise RejectedInput(f"{path}: config must be a JSON object")
    unknown = sorted(set(data) - set(KEY_BY_NAME) - {"command"})
    if unknown:
        raise RejectedInput(f"{path}: unknown config keys {unknown}")
    return data


def resolve(command: str, file_values: dict, flag_values: dict) -> dict:
    """Defaults, then the config file, then explicit flags. Only this command's keys survive."""
    if file_values.get("command", command) != command:
        raise RejectedInput(f"config was written by {file_values['command']!r}, not {command!r}")
    resolved = {}
    for key in keys_for(command):
        value = key.default
        if key.name in file_values:
            value = file_values[key.name]
        if flag_values.get(key.name) is not None:
            value = flag_values[key.name]
        resolved[key.name] = _coerce(key, value)
    missing = [k for k in REQUIRED[command] if resolved.get(k) is None]
    if missing:
        raise RejectedInput(f"{command}: missing required settings {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return resolved


def dump(command: str, resolved: dict) -> str:
    return json.dumps({"command": command, **resolved}, indent=2, sort_keys=True) + "\n"
