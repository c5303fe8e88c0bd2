"""Experiment configuration: one structured document drives every subcommand."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict

import yaml

from .diophantine import DiophantineParams
from .errors import ConfigError
from .flow import FlowConfig
from .hamiltonian import (
    ActionRect,
    FourierPolyHamiltonian,
    builtin_flat_torus,
    hamiltonian_from_dict,
    load as load_hamiltonian,
)
from .scarring import ScarConfig

SCHEMA_VERSION = 1

DEFAULTS: Dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "hamiltonian": "builtin:flat_torus",
    "domain": None,
    "diophantine": {"kappa": 0.2, "tau": 2.0, "k_max": 200, "boundary_margin": 0.0},
    "lattice": {"theta_over_4": [0.0, 0.0], "L": 1.0, "grid_factor": 0.125},
    "h_list": [0.0625, 0.03125, 0.015625],
    "flow": {"gamma": 4.0, "t0": 0.2, "n_t": 50, "C1": None, "C2": None, "eps_c": 1.0, "c1_tilde": 1.0,
             "n_triples": 200},
    "t_eval": [0.01],
    "scar": {"lambda": 4.0, "band": [0.0, 2.1], "delta_factor": 3.0, "delta": None},
    "quantize": {"rho": 1.5, "window_margin": 0.001, "eig_tol": 1e-10, "use_cache": True},
    "hypotheses": {"grid": 33},
    "monte_carlo": {"n": 1000000},
    "bilipschitz": {"n_samples": 2000, "subdomain_gap": 0.1},
    "output_dir": "kamscar-out",
    "seed": 0,
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown configuration key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    doc: Dict[str, Any]
    base_dir: Path

    # construction -------------------------------------------------------
    @classmethod
    def from_dict(cls, doc: dict | None = None, base_dir: Path | str = ".") -> "ExperimentConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a mapping")
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        cfg = cls(_merge(DEFAULTS, doc), Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        return cls.from_dict(doc or {}, path.parent)

    def override(self, **kw) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(_merge(self.doc, kw), self.base_dir)

    # validation ---------------------------------------------------------
    def validate(self) -> None:
        d = self.doc
        try:
            self.diophantine_params()
            self.flow_config()
            self.scar_config()
            hs = [float(h) for h in d["h_list"]]
            ts = [float(t) for t in d["t_eval"]]
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        if not hs or any(not (0 < h < 1) for h in hs):
            raise ConfigError("h_list entries must lie in (0, 1)")
        if any(not math.isfinite(t) or t < 0 for t in ts):
            raise ConfigError("t_eval entries must be finite and >= 0")
        q = d["quantize"]
        if not q["rho"] >= 1 or not q["window_margin"] >= 0 or not q["eig_tol"] > 0:
            raise ConfigError("quantize: need rho >= 1, window_margin >= 0, eig_tol > 0")
        if int(d["monte_carlo"]["n"]) < 1:
            raise ConfigError("monte_carlo.n must be positive")
        if int(d["hypotheses"]["grid"]) < 2:
            raise ConfigError("hypotheses.grid must be >= 2")
        if not isinstance(d["seed"], int):
            raise ConfigError("seed must be an integer")
        if self.domain() is not None:
            try:
                self.domain().area
            except Exception as exc:
                raise ConfigError(f"invalid domain: {exc}") from exc

    # typed views --------------------------------------------------------
    def domain(self) -> ActionRect | None:
        dom = self.doc["domain"]
        if dom is None:
            return None
        try:
            return ActionRect.from_dict(dom)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid domain: {exc}") from exc

    def hamiltonian(self) -> FourierPolyHamiltonian:
        source = self.doc["hamiltonian"]
        dom = self.domain()
        if isinstance(source, str) and source.startswith("builtin:"):
            name = source.split(":", 1)[1]
            if name == "flat_torus":
                return builtin_flat_torus(domain=dom)
            if name == "flat_torus_unperturbed":
                return builtin_flat_torus(0.0, domain=dom)
            raise ConfigError(f"unknown builtin Hamiltonian {name!r}")
        if isinstance(source, str):
            H = load_hamiltonian(self.base_dir / source)
        elif isinstance(source, dict):
            H = hamiltonian_from_dict(source)
        else:
            raise ConfigError("hamiltonian must be a builtin name, a file path or an inline mapping")
        if dom is not None:
            H = FourierPolyHamiltonian(H.terms, dom, name=H.name)
        return H

    def diophantine_params(self) -> DiophantineParams:
        p = self.doc["diophantine"]
        return DiophantineParams(float(p["kappa"]), float(p["tau"]), int(p["k_max"]), float(p["boundary_margin"]))

    @property
    def h_list(self):
        return sorted((float(h) for h in self.doc["h_list"]), reverse=True)

    @property
    def t_eval(self):
        return [float(t) for t in self.doc["t_eval"]]

    @property
    def theta_over_4(self):
        v = self.doc["lattice"]["theta_over_4"]
        return (float(v[0]), float(v[1])) if isinstance(v, (list, tuple)) else (float(v), float(v))

    def flow_config(self) -> FlowConfig:
        f = self.doc["flow"]
        p = self.doc["diophantine"]
        lat = self.doc["lattice"]
        return FlowConfig(
            gamma=float(f["gamma"]), t0=float(f["t0"]), n_t=int(f["n_t"]), h_list=tuple(self.h_list),
            kappa=float(p["kappa"]), tau=float(p["tau"]), k_max=int(p["k_max"]),
            C1=None if f["C1"] is None else float(f["C1"]), C2=None if f["C2"] is None else float(f["C2"]),
            eps_c=float(f["eps_c"]), L=float(lat["L"]), grid_factor=float(lat["grid_factor"]),
            theta_over_4=self.theta_over_4, c1_tilde=float(f["c1_tilde"]),
        )

    def scar_config(self) -> ScarConfig:
        s = self.doc["scar"]
        return ScarConfig(
            lam=float(s["lambda"]), L=float(self.doc["lattice"]["L"]),
            band=(float(s["band"][0]), float(s["band"][1])), gamma=float(self.doc["flow"]["gamma"]),
            delta_factor=float(s["delta_factor"]), delta=None if s["delta"] is None else float(s["delta"]),
        )

    @property
    def output_dir(self) -> Path:
        out = Path(self.doc["output_dir"])
        return out if out.is_absolute() else self.base_dir / out

    def experiment_doc(self) -> dict:
        """The configuration without where-to-write settings; hashed and stored with the outputs."""
        return {k: v for k, v in self.doc.items() if k != "output_dir"}

    def canonical_json(self) -> str:
        return json.dumps(self.experiment_doc(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def defaults_yaml() -> str:
    return yaml.safe_dump(DEFAULTS, sort_keys=False)
