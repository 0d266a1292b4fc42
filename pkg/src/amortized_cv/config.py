"""Run configuration: flat ``key=value`` text with dotted section prefixes.

Blank lines and ``#`` comments are ignored. Values are typed by the default
for the key; lists are comma separated and parsed where they are used.
"""
from __future__ import annotations

import hashlib

from .objectives import KINDS as OBJECTIVE_KINDS

DEFAULTS = {
    "seed": 0,
    "seeds": 1,
    "model.kind": "logreg",
    "data.csv": "",
    "data.target": "",
    "data.model_features": "raw",
    "data.n": 500,
    "data.dim": 8,
    "data.clusters": 4,
    "data.weight_scale": 0.3,
    "data.spread": 3.0,
    "data.offset": 4.0,
    "quad.p": 3,
    "quad.d": 2,
    "quad.context_dim": 2,
    "cv.order": 1,
    "cv.objective": "squared_difference",
    "cv.arms": "context_free,amortized:32x32",
    "optimizer.model.kind": "adam",
    "optimizer.model.lr": 0.01,
    "optimizer.coeff.kind": "adam",
    "optimizer.coeff.lr": 0.01,
    "train.batch_size": 10,
    "train.samples": 1,
    "train.iterations": 2000,
    "static.checkpoints": "10,200,1000",
    "static.cv_steps": 1000,
    "static.log_steps": "0,10,100,200,500,1000",
    "variance.draws": 100,
    "variance.eval_batches": 5,
    "dynamic.checkpoints": "10,200,1000",
    "trace.objectives": "gradient_sum,squared_difference",
    "trace.nelbo_samples": 100,
    "trace.var_every": 500,
    "two_batch.contexts": "",
    "two_batch.mean": 0.5,
    "two_batch.log_scale": 0.0,
    "two_batch.draws": 1000000,
    "two_batch.grid": 25,
    "theory.h": "1,0;0,2",
    "theory.b": "0,0",
    "theory.B": "1,0;0,1",
    "theory.B_tilde": "",
    "theory.eta": 0.125,
    "theory.theta0": "1,1",
    "theory.steps": 200,
    "theory.seeds": 1000,
    "timing.reps": 100,
    "timing.steps": 10,
}

CHOICES = {
    "model.kind": ("logreg", "quadratic"),
    "data.model_features": ("raw", "standardized"),
    "cv.objective": OBJECTIVE_KINDS,
    "optimizer.model.kind": ("adam", "sgd"),
    "optimizer.coeff.kind": ("adam", "sgd"),
}


class ConfigError(ValueError):
    pass


def _coerce(key, value):
    default = DEFAULTS[key]
    text = str(value).strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


class RunConfig:
    def __init__(self, values=None):
        self._values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self[key] = value

    def __getitem__(self, key):
        return self._values[key]

    def __setitem__(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self._values[key] = _coerce(key, value)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def items(self):
        return self._values.items()

    def copy(self, **overrides):
        cfg = RunConfig(self._values)
        for key, value in overrides.items():
            cfg[key.replace("__", ".")] = value
        return cfg

    def list(self, key, typ=str):
        return [typ(v.strip()) for v in str(self[key]).split(",") if v.strip()]

    def matrix(self, key):
        text = str(self[key]).strip()
        if not text:
            return None
        return [[float(v) for v in row.split(",")] for row in text.split(";")]

    @classmethod
    def from_text(cls, text, source="<config>"):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected key=value")
            try:
                cfg[key.strip()] = value.strip()
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        return cfg

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text, source=str(path))

    def to_text(self):
        def fmt(v):
            return repr(v) if isinstance(v, float) else str(v)
        return "".join(f"{k}={fmt(v)}\n" for k, v in self._values.items())

    @property
    def digest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def validate(self):
        for key, allowed in CHOICES.items():
            if self[key] not in allowed:
                raise ConfigError(f"{key}={self[key]!r}; expected one of {allowed}")
        for key in ("seeds", "data.n", "data.dim", "data.clusters", "train.batch_size",
                    "train.samples", "variance.draws", "variance.eval_batches"):
            if self[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self["cv.order"] not in (1, 2, 3):
            raise ConfigError("cv.order must be 1, 2 or 3")
        if not self["data.csv"] and self["train.batch_size"] > self["data.n"]:
            raise ConfigError("train.batch_size exceeds data.n")
        for obj in self.list("trace.objectives"):
            if obj not in OBJECTIVE_KINDS:
                raise ConfigError(f"trace.objectives: unknown objective {obj!r}")
        from .experiments import parse_arm
        for arm in self.list("cv.arms"):
            try:
                parse_arm(arm)
            except ValueError as exc:
                raise ConfigError(f"cv.arms: {exc}") from None
        return self
