"""Run configuration: per-command defaults, JSON config files and flag merging."""

from dataclasses import dataclass, field
import json
import os

from . import __version__

DEFAULTS = {
    "inconsistency": {"pdg": None, "gamma": 0.0, "beta_override": [], "out": None},
    "lir": {"pdg": None, "strategy": "uniform", "steps": 20, "seed": 0, "rate": 0.05,
            "trace": None, "summary": None, "out": None, "timing": True},
    "synth": {"spec": "chain_4v_3e", "strategies": "uniform,partial,hub,smooth", "seeds": 5,
              "steps": 20, "workers": 1, "out": None, "timing": True},
    "gen": {"spec": "chain_4v_3e", "seed": 0, "out": None},
    "verify": {"harness": None, "seed": 0, "trials": 5},
    "gfn train": {"env": "original", "d": 2, "height": 8, "loss": "modtb", "iters": 3000,
                  "batch": 64, "rate": 0.01, "log_z_multiplier": 100.0, "eval_every": 100,
                  "seed": 0, "out": None, "csv": None},
    "gfn eval": {"run": None, "out": None},
    "gfn modes": {"env": "original", "d": 4, "height": 24},
}


class ConfigError(ValueError):
    """Malformed config file or unknown keys (a usage error)."""


@dataclass
class RunConfig:
    command: str
    params: dict = field(default_factory=dict)

    @property
    def seed(self):
        return self.params.get("seed")

    def merged(self, flags: dict) -> "RunConfig":
        """Copy with explicit flags taking precedence."""
        _check_keys(self.command, flags)
        return RunConfig(self.command, {**self.params, **flags})

    def to_json(self) -> dict:
        return {"command": self.command, **self.params}


def _check_keys(command, doc):
    unknown = sorted(set(doc) - set(DEFAULTS[command]))
    if unknown:
        raise ConfigError(f"unknown config keys for {command!r}: {', '.join(unknown)}")


def default_config(command: str) -> RunConfig:
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    return RunConfig(command, json.loads(json.dumps(DEFAULTS[command])))


def parse_config(doc, command: str = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = dict(doc)
    named = doc.pop("command", None)
    command = command or named
    if named is not None and named != command:
        raise ConfigError(f"config is for {named!r}, not {command!r}")
    cfg = default_config(command)
    _check_keys(command, doc)
    cfg.params.update(doc)
    return cfg


def load_config(path, command: str = None) -> RunConfig:
    """Defaults for ``command`` overlaid with the JSON object in ``path``."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from None
    return parse_config(doc, command)


def save_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def meta_doc(cfg: RunConfig) -> dict:
    return {"command": cfg.command, "config": cfg.params, "seed": cfg.seed, "version": __version__}


def write_meta(cfg: RunConfig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(meta_doc(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def thread_cap(requested: int) -> int:
    """Worker count limited by LIRLAB_THREADS when it is set."""
    env = os.environ.get("LIRLAB_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"LIRLAB_THREADS must be an integer, got {env!r}") from None
        return max(1, min(int(requested), cap))
    return max(1, int(requested))
