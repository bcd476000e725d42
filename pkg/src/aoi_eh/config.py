"""Plain-text key/value configuration files.

Environment keys may appear before any section header (or under ``[env]``);
learner hyperparameters live under ``[gr]``, ``[fdpg]`` and ``[dqn]``::

    p0 = 0.5
    lambda = 0.5
    r_max = 3
    pe = 0.5          # or: eh_matrix = 0.7 0.3 0.3 0.7
    b_max = 5
    e_s = 1
    e_tx = 1
    delta_max = 40

    [fdpg]
    horizon = 50
"""
from __future__ import annotations

import configparser
import dataclasses
import math
import re
from pathlib import Path

import numpy as np

from .learners.dqn import DqnHyper
from .learners.fdpg import FdpgHyper
from .learners.gr import GrHyper
from .model import EhChain, EnvConfig, HarqModel, ModelError

ENV_KEYS = ("p0", "lambda", "r_max", "g_table", "eh_matrix", "pe", "b_max", "e_s", "e_tx",
            "delta_max")
HYPER_SECTIONS = {"gr": GrHyper, "fdpg": FdpgHyper, "dqn": DqnHyper}


class ConfigError(ModelError):
    pass


def _numbers(text: str) -> list:
    return [float(x) for x in re.split(r"[,\s]+", text.strip()) if x]


def _int(sec, key, default):
    if key not in sec:
        return default
    try:
        return int(sec[key])
    except ValueError:
        raise ConfigError(f"{key} must be a decimal integer, got {sec[key]!r}") from None


def _prob(sec, key, default):
    if key not in sec:
        return default
    try:
        v = float(sec[key])
    except ValueError:
        raise ConfigError(f"{key} must be a decimal number, got {sec[key]!r}") from None
    if not 0 <= v <= 1:
        raise ConfigError(f"{key} must lie in [0, 1], got {v}")
    return v


def env_from_mapping(sec) -> EnvConfig:
    unknown = set(sec) - set(ENV_KEYS)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    r_max = _int(sec, "r_max", 3)
    if "g_table" in sec:
        table = _numbers(sec["g_table"])
        harq = HarqModel(r_max=r_max, table=tuple(table))
    else:
        harq = HarqModel(p0=_prob(sec, "p0", 0.5), lam=_prob(sec, "lambda", 0.5), r_max=r_max)
    if "eh_matrix" in sec and "pe" in sec:
        raise ConfigError("give either eh_matrix or pe, not both")
    if "eh_matrix" in sec:
        vals = _numbers(sec["eh_matrix"])
        n = math.isqrt(len(vals))
        if n * n != len(vals) or n == 0:
            raise ConfigError(f"eh_matrix needs a square number of entries, got {len(vals)}")
        eh = EhChain(np.array(vals).reshape(n, n))
    else:
        eh = EhChain.iid(_prob(sec, "pe", 0.5))
    return EnvConfig(harq=harq, eh=eh, b_max=_int(sec, "b_max", 5), e_s=_int(sec, "e_s", 1),
                     e_tx=_int(sec, "e_tx", 1), delta_max=_int(sec, "delta_max", 40))


def _coerce(field, text):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    try:
        return int(text) if kind == "int" else float(text)
    except ValueError:
        raise ConfigError(f"{field.name}: cannot parse {text!r} as {kind}") from None


def hyper_from_mapping(name: str, sec):
    cls = HYPER_SECTIONS[name]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for key, text in sec.items():
        if key not in fields:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        kw[key] = _coerce(fields[key], text)
    try:
        return cls(**kw)
    except ValueError as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def parse_config(text: str, source: str = "<string>"):
    """``(EnvConfig, {section: hyper dataclass})`` from configuration text."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    body = text if text.lstrip().startswith("[env]") else "[env]\n" + text
    try:
        parser.read_string(body, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    extra = set(parser.sections()) - {"env", *HYPER_SECTIONS}
    if extra:
        raise ConfigError(f"{source}: unknown sections {', '.join(sorted(extra))}")
    try:
        cfg = env_from_mapping(dict(parser["env"]))
    except ModelError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    hypers = {name: hyper_from_mapping(name, dict(parser[name]) if parser.has_section(name) else {})
              for name in HYPER_SECTIONS}
    return cfg, hypers


def load_config(path):
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_env(cfg: EnvConfig) -> str:
    """Configuration text that reloads to an equal environment."""
    lines = [f"r_max = {cfg.r_max}",
             "g_table = " + " ".join(repr(g) for g in cfg.harq.probabilities),
             "eh_matrix = " + " ".join(repr(float(p)) for p in np.asarray(cfg.eh.matrix).ravel()),
             f"b_max = {cfg.b_max}", f"e_s = {cfg.e_s}", f"e_tx = {cfg.e_tx}",
             f"delta_max = {cfg.delta_max}"]
    return "\n".join(lines) + "\n"
