"""Run configuration: plain-text key=value files with section headers,
overridable by command-line flags. A run's config is archived next to its
checkpoint so any reported number is reproducible from config + seed.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, asdict

from .model import AblationFlags, Hyperparams

FLAG_NAMES = ("disable_fusion", "disable_contrastive", "tfidf_features",
              "disable_project_level", "disable_structural")

DEFAULT_T1 = 1550000000
DEFAULT_T2 = 1602000000


@dataclass
class RunConfig:
    dataset: str = ""
    workdir: str = "."
    seed: int = 0
    t1: int = DEFAULT_T1
    t2: int = DEFAULT_T2
    features: str = ""          # defaults to <workdir>/features.cfea
    protocol: str = "intra"
    ks: tuple = (5, 10, 20)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    flags: AblationFlags = field(default_factory=AblationFlags)

    def features_path(self) -> str:
        return self.features or os.path.join(self.workdir, "features.cfea")

    def checkpoint_path(self) -> str:
        return os.path.join(self.workdir, "checkpoint.bin")


_HYPER_TYPES = {f.name: f.type for f in Hyperparams.__dataclass_fields__.values()}


def _parse_hyper_value(key: str, raw: str):
    if key == "behaviors":
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    current = getattr(Hyperparams(), key)
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    return float(raw)


def load_config(path: str) -> RunConfig:
    """Parse a config file into a RunConfig."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    rc = RunConfig()
    if parser.has_section("run"):
        run = parser["run"]
        rc.dataset = run.get("dataset", rc.dataset)
        rc.workdir = run.get("workdir", rc.workdir)
        rc.seed = run.getint("seed", rc.seed)
        rc.t1 = run.getint("t1", rc.t1)
        rc.t2 = run.getint("t2", rc.t2)
        rc.features = run.get("features", rc.features)
        rc.protocol = run.get("protocol", rc.protocol)
        if run.get("ks"):
            rc.ks = tuple(int(x) for x in run.get("ks").split(","))
    hyper_kwargs = {}
    if parser.has_section("hyper"):
        for key, raw in parser["hyper"].items():
            if key not in _HYPER_TYPES:
                raise ValueError(f"unknown hyperparameter {key!r} in {path}")
            hyper_kwargs[key] = _parse_hyper_value(key, raw)
    rc.hyper = Hyperparams(**hyper_kwargs)
    flag_kwargs = {}
    if parser.has_section("flags"):
        for key, raw in parser["flags"].items():
            if key not in FLAG_NAMES:
                raise ValueError(f"unknown ablation flag {key!r} in {path}")
            flag_kwargs[key] = raw.lower() in ("1", "true", "yes")
    rc.flags = AblationFlags(**flag_kwargs)
    return rc


def save_config(path: str, rc: RunConfig):
    parser = configparser.ConfigParser()
    parser["run"] = {
        "dataset": rc.dataset, "workdir": rc.workdir, "seed": str(rc.seed),
        "t1": str(rc.t1), "t2": str(rc.t2), "features": rc.features,
        "protocol": rc.protocol, "ks": ",".join(str(k) for k in rc.ks),
    }
    parser["hyper"] = {k: (",".join(v) if isinstance(v, tuple) else str(v))
                       for k, v in asdict(rc.hyper).items()}
    parser["flags"] = {k: str(v).lower() for k, v in asdict(rc.flags).items()}
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def apply_overrides(rc: RunConfig, args) -> RunConfig:
    """Command-line flags override file values when explicitly provided."""
    simple = ("dataset", "workdir", "seed", "t1", "t2", "features", "protocol")
    for name in simple:
        val = getattr(args, name, None)
        if val is not None:
            setattr(rc, name, val)
    if getattr(args, "ks", None):
        rc.ks = tuple(int(x) for x in args.ks.split(","))
    hyper_kwargs = asdict(rc.hyper)
    for key in _HYPER_TYPES:
        val = getattr(args, key, None)
        if val is not None:
            hyper_kwargs[key] = val
    if getattr(args, "behaviors", None):
        hyper_kwargs["behaviors"] = tuple(x.strip() for x in args.behaviors.split(","))
    rc.hyper = Hyperparams(**hyper_kwargs)
    flag_kwargs = asdict(rc.flags)
    for name in getattr(args, "flag", None) or []:
        if name not in FLAG_NAMES:
            raise ValueError(f"unknown ablation flag {name!r}; choose from {FLAG_NAMES}")
        flag_kwargs[name] = True
    rc.flags = AblationFlags(**flag_kwargs)
    return rc
