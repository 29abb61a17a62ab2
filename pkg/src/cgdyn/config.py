"""Run configuration: a strict INI file with a ``[run]`` section and one section per command.

Example::

    [run]
    model = doublewell
    rc = xi2
    epsilon = 0.01
    beta = 3
    seed = 0

    [residence]
    threshold = 0.13
    n = 2000

Unknown sections or keys are rejected, so a typo cannot silently fall back
to a default in a long Monte Carlo run.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from . import model as models
from .errors import ConfigError

COMMANDS = ("estimate-coefficients", "simulate", "residence", "pathwise", "marginals", "check")


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(",", " ").split()]


def _strings(text):
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v for v in str(text).replace(",", " ").split()]


def _int(text):
    v = float(text)
    if v != int(v):
        raise ValueError(f"{text!r} is not an integer")
    return int(v)


def _fmt(value):
    if isinstance(value, list):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default); a default of REQUIRED must be supplied by the file
REQUIRED = object()

RUN_KEYS = {
    "command": (str, ""),
    "model": (str, "doublewell"),
    "rc": (str, ""),
    "epsilon": (float, 0.01),
    "beta": (float, 3.0),
    "dt": (float, 1e-4),
    "seed": (_int, 0),
    "workers": (_int, 0),  # 0: all available cores
    "out": (str, "."),
    "l0": (float, 1.0),
    "theta0": (float, 1.187),
    "ktheta": (float, 208.0),
    "kappa": (float, models.OMEGA_KAPPA),
}

COMMAND_KEYS = {
    "estimate-coefficients": {
        "engine": (str, "auto"),  # auto: quadrature when the coordinate has a chart, else mc
        "grid": (_floats, []),  # lo, hi, step; empty: builtin default for the coordinate
        "refine": (_floats, []),  # lo, hi, step of an optional refined sub-range
        "mc_steps": (_int, 200_000),
        "mc_dt": (float, 1e-4),
    },
    "simulate": {
        "dynamics": (str, "full"),  # full | effective | free_energy | coupled
        "T": (float, 100.0),
        "stride": (_int, 100),
        "x0": (_floats, []),
        "table": (str, ""),
    },
    "residence": {
        "threshold": (float, REQUIRED),
        "n": (_int, 2000),
        "kinds": (_strings, ["full", "effective", "free_energy"]),
        "table": (str, ""),
        "max_steps": (_int, 10**8),
        "init_stride": (_int, 10_000),
    },
    "pathwise": {
        "epsilons": (_floats, [0.01, 0.001]),
        "dts": (_floats, [1e-4, 1e-5]),
        "T": (float, 10.0),
        "replicas": (_int, 1000),
        "x0": (_floats, []),
    },
    "marginals": {
        "t": (_floats, [0.25, 0.5, 1.0]),
        "n": (_int, 10_000),
        "bins": (_int, 50),
        "x0": (_floats, []),
        "table": (str, ""),
    },
    "check": {
        "z": (_floats, [-1.0, -0.5, 0.0, 0.5, 1.0]),
    },
}

POSITIVE = {"epsilon", "beta", "dt", "T", "mc_dt", "threshold", "mc_steps", "n", "bins", "replicas", "stride",
            "max_steps", "init_stride", "l0", "theta0", "ktheta"}


@dataclass
class RunConfig:
    command: str
    run: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)  # keys of the command's section

    def __getitem__(self, key):
        if key in self.options:
            return self.options[key]
        return self.run[key]

    @property
    def model_params(self):
        name = self.run["model"]
        if name == "doublewell":
            return {"epsilon": self.run["epsilon"]}
        if name == "threeatom":
            return {k: self.run[k] for k in ("epsilon", "l0", "theta0", "ktheta")}
        return {"epsilon": self.run["epsilon"], "kappa": self.run["kappa"]}

    def build_model(self, epsilon=None):
        params = self.model_params
        if epsilon is not None:
            params["epsilon"] = epsilon
        return models.build(self.run["model"], self.run["rc"] or None, **params)

    def to_text(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["run"] = {k: _fmt(v) for k, v in self.run.items()}
        cp["run"]["command"] = self.command
        cp[self.command] = {k: _fmt(v) for k, v in self.options.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue().strip() + "\n"

    @classmethod
    def from_text(cls, text, command=None, overrides=None):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable configuration: {exc}") from None
        unknown_sections = [s for s in cp.sections() if s != "run" and s not in COMMAND_KEYS]
        if unknown_sections:
            raise ConfigError(f"unknown section(s): {', '.join(unknown_sections)}")
        raw_run = dict(cp["run"]) if cp.has_section("run") else {}
        file_command = raw_run.get("command", "")
        if command and file_command and command != file_command:
            raise ConfigError(f"command {command!r} conflicts with command = {file_command!r} in the file")
        command = command or file_command
        if command not in COMMAND_KEYS:
            raise ConfigError(f"unknown or missing command {command!r}; choose from {', '.join(COMMANDS)}")
        raw_opts = dict(cp[command]) if cp.has_section(command) else {}
        run = _parse_section("run", raw_run, RUN_KEYS)
        run["command"] = command
        for key, value in (overrides or {}).items():
            if value is not None:
                run[key] = value
        opts = _parse_section(command, raw_opts, COMMAND_KEYS[command])
        cfg = cls(command, run, opts)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, command=None, overrides=None):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from None
        return cls.from_text(text, command, overrides)

    @classmethod
    def from_artifact(cls, path):
        """Recover the configuration from the comment header of an output file."""
        lines = []
        try:
            with open(path) as fh:
                for line in fh:
                    if not line.startswith("#"):
                        break
                    lines.append(line[2:] if line.startswith("# ") else line[1:])
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        return cls.from_text("".join(lines))

    def validate(self):
        name = self.run["model"]
        if name not in models.MODEL_NAMES:
            raise ConfigError(f"unknown model {name!r}; known: {', '.join(models.MODEL_NAMES)}")
        rc = self.run["rc"] or models.RC_NAMES[name][-1]
        if rc not in models.RC_NAMES[name]:
            raise ConfigError(f"unknown reaction coordinate {rc!r} for {name}; known: {', '.join(models.RC_NAMES[name])}")
        self.run["rc"] = rc
        for section in (self.run, self.options):
            for key, value in section.items():
                if key in POSITIVE:
                    vals = value if isinstance(value, list) else [value]
                    if any(not v > 0 for v in vals):
                        raise ConfigError(f"{key} must be positive, got {_fmt(value)}")
        if self.run["workers"] < 0:
            raise ConfigError("workers must be non-negative")
        if self.run["seed"] < 0:
            raise ConfigError("seed must be non-negative")
        opts = self.options
        if self.command == "pathwise" and len(opts["epsilons"]) != len(opts["dts"]):
            raise ConfigError("pathwise: epsilons and dts must have the same length")
        if self.command == "estimate-coefficients" and opts["engine"] not in ("auto", "quadrature", "mc"):
            raise ConfigError("engine must be auto, quadrature or mc")
        if self.command == "simulate" and opts["dynamics"] not in ("full", "effective", "free_energy", "coupled"):
            raise ConfigError("dynamics must be one of full, effective, free_energy, coupled")
        if self.command == "residence":
            bad = [k for k in opts["kinds"] if k not in ("full", "effective", "free_energy")]
            if bad:
                raise ConfigError(f"unknown residence kind(s): {', '.join(bad)}")
        for key in ("grid", "refine"):
            if key in opts and opts[key] and len(opts[key]) != 3:
                raise ConfigError(f"{key} takes three numbers: lo, hi, step")


def _parse_section(name, raw, schema):
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"[{name}] unknown key(s): {', '.join(unknown)}")
    out = {}
    for key, (parse, default) in schema.items():
        if key in raw:
            try:
                out[key] = parse(raw[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from None
        elif default is REQUIRED:
            raise ConfigError(f"[{name}] missing required key {key!r}")
        else:
            out[key] = list(default) if isinstance(default, list) else default
    return out
