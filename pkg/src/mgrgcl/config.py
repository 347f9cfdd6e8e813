"""Run configuration: one JSON document plus dotted ``key=value`` overrides.

The document mirrors the dataclasses field for field::

    {"seed": 0,
     "synth": {... SynthConfig ...},
     "run": {... RunConfig ...},
     "eval": {... EvalProtocol ...},
     "report": {"timing": false, "figures": true}}

A top-level ``seed``, when present, is copied into ``synth.seed`` and
``run.seed``.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .dataset import SynthConfig
from .errors import InvalidConfig
from .evaluation import EvalProtocol
from .pipeline import RunConfig


@dataclass
class ReportConfig:
    timing: bool = False
    figures: bool = True


@dataclass
class Config:
    synth: SynthConfig = field(default_factory=SynthConfig)
    run: RunConfig = field(default_factory=RunConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    report: ReportConfig = field(default_factory=ReportConfig)
    seed: "int | None" = None

    def validate(self):
        self.synth.validate()
        self.run.validate()
        self.eval.validate()
        if self.eval.metric != self.run.clustering.metric:
            raise InvalidConfig("eval.metric", "must match run.clustering.metric")

    def resolved(self):
        """Copy with the top-level seed pushed down."""
        if self.seed is None:
            return self
        return dataclasses.replace(
            self,
            synth=dataclasses.replace(self.synth, seed=self.seed),
            run=dataclasses.replace(self.run, seed=self.seed),
            seed=None,
        )


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _coerce(value, default, key):
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise InvalidConfig(key, "expected an object")
        return _build(type(default), value, key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfig(key, "expected true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfig(key, "expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig(key, "expected a number")
        return float(value)
    if isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise InvalidConfig(key, "expected a list")
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise InvalidConfig(key, "expected a list of numbers")
        return type(default)(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidConfig(key, "expected a string")
        return value
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise InvalidConfig(key, "expected an integer or null")
        return value
    return value


def _build(cls, doc, prefix=""):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in fields:
            raise InvalidConfig(path, "unknown key")
        kwargs[key] = _coerce(value, _default_of(fields[key]), path)
    return cls(**kwargs)


def to_dict(cfg):
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v

    return conv(cfg)


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc, overrides):
    """Apply ``a.b.c=value`` strings to a nested dict (values parsed as JSON when possible)."""
    for item in overrides:
        if "=" not in item:
            raise InvalidConfig(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InvalidConfig(key, "cannot descend into a non-object")
        node[parts[-1]] = parse_value(raw)
    return doc


def load_config(path=None, overrides=()):
    """Parse, override and validate; returns the resolved :class:`Config`."""
    doc = {}
    if path is not None:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidConfig("config", f"not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise InvalidConfig("config", "top level must be an object")
    doc = apply_overrides(doc, overrides)
    cfg = _build(Config, doc).resolved()
    cfg.validate()
    return cfg


def dump_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2)
        fh.write("\n")
