"""Run configured experiments and persist images, CSV reports and config echoes."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import metrics
from ..grid import RngStream
from ..operators import ForwardOperator, Measurement, apply_noise, operator_from_dict
from ..prior import PriorDataset
from ..samplers import sample
from .config import ExperimentConfig, dump_config
from .datasets import load_dataset, save_image, synth_dataset

__all__ = [
    "CSV_COLUMNS",
    "ReportRow",
    "ablate_init",
    "ablate_optimizer",
    "build_dataset",
    "build_operator",
    "make_measurement",
    "nfe_sweep",
    "read_csv",
    "run_experiment",
    "write_csv",
]

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "task",
    "sampler",
    "nfe",
    "sgld_steps",
    "seed",
    "replica",
    "psnr_db",
    "ssim",
    "residual_norm",
    "runtime_ms",
    "image_path",
)


@dataclasses.dataclass
class ReportRow:
    task: str
    sampler: str
    nfe: int
    sgld_steps: int
    seed: int
    replica: int
    psnr_db: float
    ssim: float
    residual_norm: float
    runtime_ms: float
    image_path: str
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def csv_fields(self) -> list[str]:
        out = []
        for name in CSV_COLUMNS:
            v = getattr(self, name)
            out.append(repr(float(v)) if isinstance(v, float) else str(v))
        return out


def build_dataset(cfg: ExperimentConfig) -> PriorDataset:
    ds = cfg.dataset
    if ds["source"] == "directory":
        return load_dataset(ds["path"])
    return synth_dataset(ds["generator"], int(ds["n"]), tuple(ds["shape"]), int(ds["seed"]))


def build_operator(cfg: ExperimentConfig, shape, seed: int) -> ForwardOperator:
    spec = {"kind": cfg.operator["kind"], "shape": tuple(shape), **cfg.operator_params(seed)}
    return operator_from_dict(spec)


def make_measurement(cfg: ExperimentConfig, op: ForwardOperator, x_true, seed: int) -> Measurement:
    stream = RngStream(seed, purpose="measurement")
    return apply_noise(op(x_true), float(cfg.operator["noise_sigma"]), stream, operator_id=op.kind)


def ground_truth_index(ds: PriorDataset, seed: int) -> int:
    """The prior item a seed's measurement is taken from."""
    return seed % ds.n


def _sampler_label(cfg: ExperimentConfig) -> str:
    label = cfg.sampler["kind"]
    if label == "dps":
        return label
    tags = []
    if cfg.mo["optimizer"] != "sgld":
        tags.append(cfg.mo["optimizer"])
    if not cfg.sampler["per_step_init"]:
        tags.append("same-solution")
    return f"{label}[{','.join(tags)}]" if tags else label


@dataclasses.dataclass
class _Outcome:
    seed: int
    replica: int
    image: np.ndarray | None
    score: metrics.ScoreRow | None
    residual_norm: float
    runtime_ms: float
    error: str | None = None


def _ssim_or_nan(x_hat, x_true) -> float:
    # images smaller than the SSIM window get no SSIM score
    if min(x_true.shape[:2]) < 11:
        return math.nan
    return metrics.ssim(x_hat, x_true)


def _run_replica(cfg, ds, op, y, x_true, seed, replica, nfe) -> _Outcome:
    start = time.perf_counter()
    try:
        x_hat = sample(ds, op, y, cfg.sampler_run(seed, replica, nfe))
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        ms = 1000.0 * (time.perf_counter() - start)
        return _Outcome(seed, replica, None, None, math.nan, ms, f"{type(exc).__name__}: {exc}")
    ms = 1000.0 * (time.perf_counter() - start)
    plain = metrics.psnr(x_hat, x_true)
    rotated = cfg.allow_rotation and metrics.psnr(metrics.rot180(x_hat), x_true) > plain
    aligned = metrics.rot180(x_hat) if rotated else x_hat
    score = metrics.ScoreRow(
        psnr_db=metrics.ambiguity_psnr(x_hat, x_true, cfg.allow_rotation),
        ssim=_ssim_or_nan(aligned, x_true),
        runtime_ms=ms,
        seed=seed,
        replica=replica,
        rotated=rotated,
    )
    resid = op(x_hat) - y.values
    return _Outcome(seed, replica, x_hat, score, float(np.sqrt((resid * resid).sum())), ms)


def _seed_jobs(cfg, ds, seed, nfe):
    x_true = ds.items[ground_truth_index(ds, seed)]
    op = build_operator(cfg, ds.shape, seed)
    y = make_measurement(cfg, op, x_true, seed)
    return [(cfg, ds, op, y, x_true, seed, r, nfe) for r in range(cfg.best_of)]


def _collect(cfg: ExperimentConfig, ds: PriorDataset, nfe: int, out_dir: Path | None,
             executor: ThreadPoolExecutor | None) -> list[ReportRow]:
    jobs, failed = [], {}
    for seed in cfg.seeds:
        try:
            jobs.extend(_seed_jobs(cfg, ds, seed, nfe))
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            failed[seed] = f"{type(exc).__name__}: {exc}"
    if executor is None:
        outcomes = [_run_replica(*job) for job in jobs]
    else:
        outcomes = list(executor.map(lambda job: _run_replica(*job), jobs))

    by_seed: dict[int, list[_Outcome]] = {}
    for o in outcomes:
        by_seed.setdefault(o.seed, []).append(o)

    label = _sampler_label(cfg)
    steps = int(cfg.mo["sgld_steps"])
    rows = []
    for seed in cfg.seeds:
        if seed in failed:
            rows.append(ReportRow(cfg.task, label, nfe, steps, seed, 0, math.nan, math.nan,
                                  math.nan, 0.0, "", failed[seed]))
            log.warning("seed %d failed: %s", seed, failed[seed])
            continue
        good = [o for o in by_seed[seed] if o.error is None]
        if not good:
            first = by_seed[seed][0]
            rows.append(ReportRow(cfg.task, label, nfe, steps, seed, first.replica, math.nan,
                                  math.nan, math.nan, first.runtime_ms, "", first.error))
            log.warning("seed %d failed: %s", seed, first.error)
            continue
        best = metrics.best_of([o.score for o in good])
        chosen = next(o for o in good if o.replica == best.replica)
        image_path = ""
        if out_dir is not None:
            rel = Path(cfg.task) / str(seed) / f"{label}_nfe{nfe}.png"
            (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
            save_image(out_dir / rel, chosen.image)
            if cfg.save_raw:
                np.save(out_dir / rel.with_suffix(".npy"), chosen.image)
            image_path = rel.as_posix()
        rows.append(ReportRow(
            cfg.task, label, nfe, steps, seed, chosen.replica, best.psnr_db, best.ssim,
            chosen.residual_norm, sum(o.runtime_ms for o in by_seed[seed]), image_path,
        ))
    return rows


def _executor(workers: int) -> ThreadPoolExecutor | None:
    return ThreadPoolExecutor(max_workers=workers) if workers > 1 else None


def write_csv(rows: Sequence[ReportRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow(row.csv_fields())


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _run_many(configs: Sequence[tuple[ExperimentConfig, int]], out_dir, write: bool):
    base = configs[0][0]
    out = Path(out_dir if out_dir is not None else base.output_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(base, out / "config.yaml")
    ds = build_dataset(base)
    pool = _executor(base.workers)
    try:
        rows = []
        for cfg, nfe in configs:
            rows.extend(_collect(cfg, ds, nfe, out if write else None, pool))
    finally:
        if pool is not None:
            pool.shutdown()
    if write:
        write_csv(rows, out / "results.csv")
    return rows


def run_experiment(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> list[ReportRow]:
    """Run every seed of ``cfg`` (best of ``cfg.best_of`` replicas each).

    Writes ``results.csv``, ``config.yaml`` and the recovered images under
    ``out_dir/<task>/<seed>/`` unless ``write`` is off.  A failing seed is
    reported in its row and the remaining seeds still run.
    """
    if not cfg.seeds:
        raise ValueError("seeds must be non-empty")
    return _run_many([(cfg, int(cfg.schedule["nfe"]))], out_dir, write)


def nfe_sweep(cfg: ExperimentConfig, nfes: Sequence[int], out_dir=None,
              write: bool = True) -> list[ReportRow]:
    """One :func:`run_experiment` per NFE value, sharing the seed list."""
    if not nfes:
        raise ValueError("nfe list must be non-empty")
    return _run_many([(cfg, int(n)) for n in nfes], out_dir, write)


def ablate_optimizer(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> list[ReportRow]:
    """Paired SGLD and Adam inner loops on the same seeds and step budget."""
    runs = [(cfg.replace(mo={**cfg.mo, "optimizer": opt}), int(cfg.schedule["nfe"]))
            for opt in ("sgld", "adam")]
    return _run_many(runs, out_dir, write)


def ablate_init(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> list[ReportRow]:
    """Per-step re-initialised inner solves against a single reused solution."""
    runs = [(cfg.replace(sampler={**cfg.sampler, "per_step_init": flag}), int(cfg.schedule["nfe"]))
            for flag in (True, False)]
    return _run_many(runs, out_dir, write)
