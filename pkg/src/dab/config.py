"""Run configuration files: model hyperparameters, dataset, evaluation.

A run config is a YAML (or JSON) mapping.  Model hyperparameters sit at the
top level under the same names as :class:`DabConfig`; the ``data`` and
``eval`` sections say where examples come from and what to evaluate::

    beta: 1.0
    k: 1
    data:
      generator: cubic        # or train_csv / test_csv
      params: {}
    eval:
      calibration: false
    output_dir: runs/cubic

Every violation is collected before anything is raised, so a bad file is
reported in one go.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .datasets import GENERATORS
from .model import DabConfig

MODEL_KEYS = tuple(f.name for f in dataclasses.fields(DabConfig))
TOP_KEYS = MODEL_KEYS + ("data", "eval", "output_dir", "description")
DATA_KEYS = ("generator", "seed", "params", "train_csv", "test_csv", "target", "normalize")
EVAL_KEYS = ("ood_csv", "calibration")

_INT_KEYS = {"k", "latent_dim", "epochs", "batch_size", "seed", "num_classes"}
_BOOL_KEYS = {"margin_enabled"}
_STR_KEYS = {"task", "activation", "optimizer_theta", "optimizer_phi", "init"}


class ConfigError(ValueError):
    """Raised with every problem found in a config, one per line."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass
class DataSpec:
    generator: str | None = None
    seed: int | None = None
    params: dict = field(default_factory=dict)
    train_csv: str | None = None
    test_csv: str | None = None
    target: str = "y"
    normalize: bool = False


@dataclass
class EvalSpec:
    ood_csv: str | None = None
    calibration: bool = False


@dataclass
class RunConfig:
    model: DabConfig
    data: DataSpec
    eval: EvalSpec
    output_dir: str = "run"
    description: str = ""

    def to_dict(self) -> dict:
        out = self.model.to_dict()
        out["data"] = dataclasses.asdict(self.data)
        out["eval"] = dataclasses.asdict(self.eval)
        out["output_dir"] = self.output_dir
        out["description"] = self.description
        return out


def _type_problems(key, value):
    if key in _BOOL_KEYS:
        return [] if isinstance(value, bool) else [f"{key}: expected true/false, got {value!r}"]
    if key in _STR_KEYS:
        return [] if isinstance(value, str) else [f"{key}: expected a string, got {value!r}"]
    if key == "num_classes" and value is None:
        return []
    if key in _INT_KEYS:
        ok = isinstance(value, int) and not isinstance(value, bool)
        return [] if ok else [f"{key}: expected an integer, got {value!r}"]
    if key == "encoder_hidden":
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool)
                                             for v in value)
        return [] if ok else [f"{key}: expected a list of integers, got {value!r}"]
    ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    return [] if ok else [f"{key}: expected a number, got {value!r}"]


def _section(raw, name, allowed, problems):
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        problems.append(f"{name}: expected a mapping")
        return {}
    for key in sec:
        if key not in allowed:
            problems.append(f"{name}.{key}: unknown key")
    return {k: v for k, v in sec.items() if k in allowed}


def parse(raw: dict) -> RunConfig:
    """Validate a raw mapping and build a RunConfig; raises ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a mapping"])
    problems = [f"{key}: unknown key" for key in raw if key not in TOP_KEYS]

    model_kw = {}
    for key in MODEL_KEYS:
        if key in raw:
            p = _type_problems(key, raw[key])
            problems += p
            if not p:
                model_kw[key] = raw[key]
    for key, value in model_kw.items():
        if key in _STR_KEYS:
            model_kw[key] = value.lower()
        elif key not in _INT_KEYS | _BOOL_KEYS | {"encoder_hidden"}:
            model_kw[key] = float(value)
    # badly typed keys fell back to defaults above, so range checks are safe
    model = DabConfig(**model_kw)
    problems += model.errors()

    data = _section(raw, "data", DATA_KEYS, problems)
    data_spec = DataSpec(**data)
    if data_spec.generator is None and data_spec.train_csv is None:
        problems.append("data: give either a generator or train_csv")
    if data_spec.generator is not None and data_spec.train_csv is not None:
        problems.append("data: generator and train_csv are mutually exclusive")
    if data_spec.generator is not None and data_spec.generator not in GENERATORS:
        problems.append(f"data.generator: must be one of {GENERATORS}, got {data_spec.generator!r}")
    if not isinstance(data_spec.params, dict):
        problems.append("data.params: expected a mapping")
    if data_spec.generator == "blobs" and model.task != "classification":
        problems.append("data.generator: blobs needs task: classification")
    if data_spec.generator in ("cubic", "two-clusters") and model.task != "regression":
        problems.append(f"data.generator: {data_spec.generator} needs task: regression")

    ev = EvalSpec(**_section(raw, "eval", EVAL_KEYS, problems))
    if ev.calibration and model.task != "classification":
        problems.append("eval.calibration: needs task: classification")

    output_dir = raw.get("output_dir", "run")
    if not isinstance(output_dir, str):
        problems.append("output_dir: expected a string")
    if problems:
        raise ConfigError(problems)
    return RunConfig(model, data_spec, ev, output_dir, str(raw.get("description", "")))


def load_raw(path) -> dict:
    """Read YAML or JSON (by extension; YAML otherwise)."""
    path = Path(path)
    text = path.read_text()
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError([f"{path}: could not parse: {exc}"]) from None
    return raw if raw is not None else {}


def load(path) -> RunConfig:
    return parse(load_raw(path))


# presets --------------------------------------------------------------------


def preset_names() -> list[str]:
    files = resources.files("dab").joinpath("presets").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".yaml"))


def preset_raw(name: str) -> dict:
    if name not in preset_names():
        raise ConfigError([f"unknown preset {name!r}; available: {', '.join(preset_names())}"])
    text = resources.files("dab").joinpath("presets", f"{name}.yaml").read_text()
    return yaml.safe_load(text)


def preset(name: str) -> RunConfig:
    return parse(preset_raw(name))


def apply_overrides(raw: dict, assignments) -> dict:
    """Apply ``key=value`` strings; dotted keys reach into sections, values parse as YAML."""
    out = copy.deepcopy(raw)
    problems = []
    for item in assignments:
        if "=" not in item:
            problems.append(f"override {item!r}: expected key=value")
            continue
        key, _, text = item.partition("=")
        value = yaml.safe_load(text) if text else None
        target = out
        *parents, leaf = key.strip().split(".")
        for p in parents:
            target = target.setdefault(p, {})
            if not isinstance(target, dict):
                problems.append(f"override {key}: {p} is not a section")
                break
        else:
            target[leaf] = value
    if problems:
        raise ConfigError(problems)
    return out
