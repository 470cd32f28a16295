"""Experiment configuration: YAML files, task presets and validation.

A config file is a nested mapping.  Resolution order is built-in defaults,
then the named ``preset`` (if any), then the file, then command-line
overrides.  Unknown keys anywhere are rejected.

Full key list::

    preset: <name>                      # optional, see PRESETS
    task: <name>
    dataset:
      source: synthetic | directory
      path: <dir>                       # directory source only
      generator: blobs | bars | digits  # synthetic source only
      n: 16
      shape: [32, 32, 1]
      seed: 0
    operator:
      kind: random_inpaint | box_inpaint | downsample | gaussian_blur |
            motion_blur | phase_retrieval | hdr | nonlinear_blur | identity
      noise_sigma: 0.05
      <operator parameters>             # seed parameters default to the run seed
    schedule: {nfe, sigma_max, sigma_min, rho}
    mo: {sgld_steps, sgld_lr, tau, optimizer}
    sampler: {kind, guidance_scale, mu_lr, mu_optimizer, per_step_init}
    seeds: [0, 1, ...]
    best_of: 1
    allow_rotation: false               # score phase retrieval up to a 180 degree turn
    workers: 1
    output_dir: runs
    save_raw: false
"""

from __future__ import annotations

import copy
import dataclasses
from pathlib import Path
from typing import Any

import yaml

from ..mo import OPTIMIZERS, MoConfig
from ..samplers import MU_OPTIMIZERS, SAMPLERS, SamplerRun
from ..schedule import EdmSchedule
from .datasets import SYNTH_KINDS, default_output_root

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "PRESETS",
    "TASKS",
    "config_from_dict",
    "dump_config",
    "load_config",
]


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


TASKS = (
    "sr",
    "box_inpaint",
    "random_inpaint",
    "gaussian_deblur",
    "motion_deblur",
    "phase_retrieval",
    "nonlinear_deblur",
    "hdr",
)
LINEAR_TASKS = TASKS[:5]

# per-dataset hyperparameters for each task: nfe, sigma_max, sigma_min, sgld steps
_TABLE = {
    "ffhq": {
        "sr": (50, 80.0, 0.01, 150),
        "box_inpaint": (50, 80.0, 0.05, 100),
        "random_inpaint": (50, 80.0, 0.05, 150),
        "gaussian_deblur": (50, 80.0, 0.002, 50),
        "motion_deblur": (50, 80.0, 0.02, 100),
        "phase_retrieval": (100, 80.0, 0.05, 500),
        "nonlinear_deblur": (100, 80.0, 0.05, 200),
        "hdr": (100, 80.0, 0.02, 500),
    },
    "imagenet": {
        "sr": (100, 1.0, 0.02, 100),
        "box_inpaint": (100, 80.0, 0.02, 50),
        "random_inpaint": (100, 1.0, 0.02, 50),
        "gaussian_deblur": (100, 80.0, 0.02, 200),
        "motion_deblur": (100, 80.0, 0.02, 100),
        "phase_retrieval": (1000, 80.0, 0.05, 50),
        "nonlinear_deblur": (100, 80.0, 0.05, 200),
        "hdr": (100, 80.0, 0.02, 50),
    },
}

# desk-scale operators (32x32 images; box and kernels shrunk accordingly)
_OPERATORS = {
    "sr": {"kind": "downsample", "factor": 4, "kernel": "bicubic"},
    "box_inpaint": {"kind": "box_inpaint", "box_h": 16, "box_w": 16},
    "random_inpaint": {"kind": "random_inpaint", "keep_prob": 0.3},
    "gaussian_deblur": {"kind": "gaussian_blur", "ksize": 9, "blur_sigma": 3.0},
    "motion_deblur": {"kind": "motion_blur", "ksize": 9, "intensity": 0.5},
    "phase_retrieval": {"kind": "phase_retrieval", "oversample": 2.0},
    "nonlinear_deblur": {"kind": "nonlinear_blur", "ksize": 9, "blur_sigma": 3.0, "gain": 1.0},
    "hdr": {"kind": "hdr", "factor": 2.0},
}

# operator kind -> (required params, optional params with defaults)
_OPERATOR_PARAMS: dict[str, tuple[tuple[str, ...], dict[str, Any]]] = {
    "identity": ((), {}),
    "random_inpaint": (("keep_prob",), {"mask_seed": None}),
    "box_inpaint": (("box_h", "box_w"), {"position_seed": None}),
    "downsample": (("factor",), {"kernel": "bicubic"}),
    "gaussian_blur": (("ksize", "blur_sigma"), {}),
    "motion_blur": (("ksize", "intensity"), {"kernel_seed": None}),
    "phase_retrieval": ((), {"oversample": 2.0}),
    "hdr": ((), {"factor": 2.0}),
    "nonlinear_blur": (("ksize", "blur_sigma"), {"gain": 1.0}),
}
SEED_PARAMS = ("mask_seed", "position_seed", "kernel_seed")


def _preset(dataset: str, task: str) -> dict[str, Any]:
    nfe, sigma_max, sigma_min, steps = _TABLE[dataset][task]
    lr = 5e-4 if (dataset, task) == ("imagenet", "phase_retrieval") else 5e-5
    nonlinear = task in ("phase_retrieval", "nonlinear_deblur", "hdr")
    return {
        "task": task,
        "operator": dict(_OPERATORS[task]),
        "schedule": {"nfe": nfe, "sigma_max": sigma_max, "sigma_min": sigma_min},
        "mo": {"sgld_steps": steps, "sgld_lr": lr},
        "best_of": 4 if nonlinear else 1,
        "allow_rotation": task == "phase_retrieval",
    }


PRESETS: dict[str, dict[str, Any]] = {
    f"{ds}-{task}": _preset(ds, task) for ds in _TABLE for task in TASKS
}


def _defaults() -> dict[str, Any]:
    return {
        "task": "custom",
        "dataset": {
            "source": "synthetic",
            "path": None,
            "generator": "blobs",
            "n": 16,
            "shape": [32, 32, 1],
            "seed": 0,
        },
        "operator": {"kind": "random_inpaint", "noise_sigma": 0.05, "keep_prob": 0.3},
        "schedule": {"nfe": 50, "sigma_max": 80.0, "sigma_min": 0.05, "rho": 7.0},
        "mo": {"sgld_steps": 100, "sgld_lr": 5e-5, "tau": 0.01, "optimizer": "sgld"},
        "sampler": {
            "kind": "dps-mo",
            "guidance_scale": 0.3,
            "mu_lr": 0.1,
            "mu_optimizer": "adam",
            "per_step_init": True,
        },
        "seeds": [0],
        "best_of": 1,
        "allow_rotation": False,
        "workers": 1,
        "output_dir": str(default_output_root()),
        "save_raw": False,
    }


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        path = f"{where}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out.get(key), dict) and key != "operator":
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a mapping")
            out[key] = _merge(out[key], value, f"{path}.")
        elif key == "operator":
            if not isinstance(value, dict):
                raise ConfigError("'operator' must be a mapping")
            # a different kind replaces the parameter set wholesale
            if "kind" in value and value["kind"] != out[key].get("kind"):
                noise = out[key].get("noise_sigma", 0.05)
                out[key] = {"noise_sigma": noise}
            out[key].update(copy.deepcopy(value))
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    task: str
    dataset: dict[str, Any]
    operator: dict[str, Any]
    schedule: dict[str, Any]
    mo: dict[str, Any]
    sampler: dict[str, Any]
    seeds: tuple[int, ...]
    best_of: int = 1
    allow_rotation: bool = False
    workers: int = 1
    output_dir: str = "runs"
    save_raw: bool = False

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        return config_from_dict({**self.to_dict(), **changes})

    def edm_schedule(self, nfe: int | None = None) -> EdmSchedule:
        s = self.schedule
        return EdmSchedule(
            sigma_max=float(s["sigma_max"]),
            sigma_min=float(s["sigma_min"]),
            rho=float(s["rho"]),
            n_steps=int(nfe if nfe is not None else s["nfe"]),
        )

    def mo_config(self) -> MoConfig:
        m = self.mo
        return MoConfig(
            n_sgld=int(m["sgld_steps"]),
            base_eta=float(m["sgld_lr"]),
            tau=float(m["tau"]),
            optimizer=m["optimizer"],
        )

    def sampler_run(self, seed: int, replica: int = 0, nfe: int | None = None) -> SamplerRun:
        s = self.sampler
        return SamplerRun(
            schedule=self.edm_schedule(nfe),
            mo_cfg=self.mo_config(),
            kind=s["kind"],
            guidance_scale=float(s["guidance_scale"]),
            mu_optimizer=s["mu_optimizer"],
            mu_lr=float(s["mu_lr"]),
            per_step_init=bool(s["per_step_init"]),
            seed=seed,
            replica=replica,
        )

    def operator_params(self, seed: int) -> dict[str, Any]:
        """Operator factory keyword arguments with unset seeds filled from ``seed``."""
        params = {k: v for k, v in self.operator.items() if k not in ("kind", "noise_sigma")}
        _, optional = _OPERATOR_PARAMS[self.operator["kind"]]
        for key, default in optional.items():
            params.setdefault(key, default)
        for key in SEED_PARAMS:
            if key in params and params[key] is None:
                params[key] = seed
        return params


def _validate(d: dict[str, Any]) -> None:
    ds = d["dataset"]
    if ds["source"] not in ("synthetic", "directory"):
        raise ConfigError(f"dataset.source must be 'synthetic' or 'directory', got {ds['source']!r}")
    if ds["source"] == "directory" and not ds["path"]:
        raise ConfigError("dataset.path is required for a directory source")
    if ds["source"] == "synthetic":
        if ds["generator"] not in SYNTH_KINDS:
            raise ConfigError(f"dataset.generator must be one of {SYNTH_KINDS}")
        if int(ds["n"]) < 1:
            raise ConfigError("dataset.n must be >= 1")
        if len(ds["shape"]) not in (2, 3):
            raise ConfigError("dataset.shape must be [H, W] or [H, W, C]")

    op = d["operator"]
    kind = op.get("kind")
    if kind not in _OPERATOR_PARAMS:
        raise ConfigError(f"unknown operator kind {kind!r}")
    required, optional = _OPERATOR_PARAMS[kind]
    allowed = {"kind", "noise_sigma", *required, *optional}
    extra = set(op) - allowed
    if extra:
        raise ConfigError(f"unknown config key(s) for operator {kind!r}: {sorted(extra)}")
    missing = [k for k in required if k not in op]
    if missing:
        raise ConfigError(f"operator {kind!r} needs {missing}")
    if float(op.get("noise_sigma", 0.0)) < 0:
        raise ConfigError("operator.noise_sigma must be >= 0")

    if d["mo"]["optimizer"] not in OPTIMIZERS:
        raise ConfigError(f"mo.optimizer must be one of {OPTIMIZERS}")
    if d["sampler"]["kind"] not in SAMPLERS:
        raise ConfigError(f"sampler.kind must be one of {SAMPLERS}")
    if d["sampler"]["mu_optimizer"] not in MU_OPTIMIZERS:
        raise ConfigError(f"sampler.mu_optimizer must be one of {MU_OPTIMIZERS}")
    seeds = d["seeds"]
    if isinstance(seeds, int):
        raise ConfigError("seeds must be a list")
    if not seeds:
        raise ConfigError("seeds must be non-empty")
    if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in seeds):
        raise ConfigError("seeds must be non-negative integers")
    if int(d["best_of"]) < 1:
        raise ConfigError("best_of must be >= 1")
    if int(d["workers"]) < 1:
        raise ConfigError("workers must be >= 1")


def config_from_dict(raw: dict[str, Any], overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Resolve defaults, preset, ``raw`` and ``overrides`` into a checked config."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    merged = _defaults()
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        merged = _merge(merged, PRESETS[preset])
    merged = _merge(merged, raw)
    if overrides:
        merged = _merge(merged, overrides)
    _validate(merged)
    try:
        cfg = ExperimentConfig(
            task=str(merged["task"]),
            dataset=merged["dataset"],
            operator=merged["operator"],
            schedule=merged["schedule"],
            mo=merged["mo"],
            sampler=merged["sampler"],
            seeds=tuple(merged["seeds"]),
            best_of=int(merged["best_of"]),
            allow_rotation=bool(merged["allow_rotation"]),
            workers=int(merged["workers"]),
            output_dir=str(merged["output_dir"]),
            save_raw=bool(merged["save_raw"]),
        )
        cfg.sampler_run(cfg.seeds[0])  # surfaces bad numeric values as config errors
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(raw or {}, overrides)


def dump_config(cfg: ExperimentConfig, path) -> None:
    """Write the fully resolved config; loading it back reproduces ``cfg``."""
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
