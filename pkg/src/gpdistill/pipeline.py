"""End-to-end discovery and calibration runs.

Stages: ``gp`` (fit + condition), ``distill`` (flow vs. GP), ``sobol``
(sensitivity + library reduction) and ``refine`` (fresh flow on the
reduced library).  Every artifact lands in the run's output directory
together with the config hash and seed that produced it.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import dataset as ds
from . import mechanics as mech
from .distill import DistillConfig, ForwardMap, gp_sampler, make_critic, train, write_history
from .flow import FlowModel
from .gp import (
    ErrorModel,
    GpPosterior,
    bands_at_measurements,
    estimated_coverage,
    export_posteriors,
    fit_posteriors,
    interval_bands,
    sample_stacked,
)
from .sobol import SobolReport, deformation_resolved_indices, reduce_library

__all__ = [
    "ConfigError",
    "StageError",
    "RunConfig",
    "PRESETS",
    "preset",
    "DiscoveryRun",
    "run_discovery",
    "run_calibration",
    "compute_metrics",
    "export_plot_data",
    "load_run",
    "STAGES",
]

log = logging.getLogger(__name__)

STAGES = ("gp", "distill", "sobol", "refine")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, checkpoint: str | None = None):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.checkpoint = checkpoint


@dataclass
class RunConfig:
    data: dict
    library: Any = "isotropic"
    n_s: Any = ds.DEFAULT_N_S
    sigma_min: float = 0.01
    sigma_r: float = 0.05
    length_scale_factor: float = 1.0
    gp_iterations: int = 200
    gp_lr: float = 0.2
    lambda_L: float = 10.0
    penalty: str = "two-sided"
    critic_input_scale: Any = 1.0
    critic_iters: int = 10
    critic_warmup: int = 0
    batch_size: int = 32
    iterations: int = 20000
    refine_iterations: int = 10000
    critic_lr: float = 1e-4
    critic_weight_decay: float = 0.01
    critic_hidden: Any = None
    critic_activation: str = "softplus"
    flow_lr: float = 5e-4
    flow_decay: float = 0.9999
    flow_warmup: int = 0
    flow_layers: int = 16
    flow_hidden: Any = None
    init_log_kappa: Any = 0.0
    init_log_std: float | None = None
    resample_per_critic_step: bool = True
    sobol_N: int = 4096
    sobol_bounds_samples: int = 8192
    threshold: float = 1e-4
    refine_passes: int = 1
    interval_samples: int = 8192
    plot_samples: int = 20
    log_every: int = 50
    checkpoint_every: int = 1000
    seed: int = 0
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        validate_config(d)
        return cls(**copy.deepcopy(d))

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def distill_config(self, iterations: int, checkpoint_dir: str | None = None, input_scale: float = 1.0) -> DistillConfig:
        return DistillConfig(
            iterations=iterations,
            critic_iters=self.critic_iters,
            critic_warmup=self.critic_warmup,
            batch_size=self.batch_size,
            lambda_L=self.lambda_L,
            penalty=self.penalty,
            input_scale=input_scale,
            critic_lr=self.critic_lr,
            critic_weight_decay=self.critic_weight_decay,
            flow_lr=self.flow_lr,
            flow_decay=self.flow_decay,
            flow_warmup=self.flow_warmup,
            resample_per_critic_step=self.resample_per_critic_step,
            log_every=self.log_every,
            checkpoint_every=self.checkpoint_every,
            checkpoint_dir=checkpoint_dir,
        )


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT0 = {"type": "integer", "minimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_INTS = {"type": "array", "items": {"type": "integer"}}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["data"],
    "additionalProperties": False,
    "properties": {
        "data": {
            "type": "object",
            "oneOf": [
                {"required": ["csv"]},
                {"required": ["synthetic"]},
            ],
            "properties": {
                "csv": {"type": "string"},
                "sidecar": {"type": ["string", "null"]},
                "synthetic": {
                    "type": "object",
                    "required": ["generator", "layout", "controls"],
                    "properties": {
                        "generator": {"type": ["string", "object"]},
                        "layout": {"type": ["string", "array"]},
                        "controls": {"type": "object"},
                        "sigma_min": {"type": "number", "minimum": 0},
                        "sigma_r": {"type": "number", "minimum": 0},
                        "seed": {"type": "integer"},
                    },
                },
            },
        },
        "library": {"type": ["string", "object"]},
        "n_s": {"oneOf": [{"type": "integer", "minimum": 2}, {"type": "array", "items": {"type": "integer", "minimum": 2}}]},
        "sigma_min": _POS,
        "sigma_r": {"type": "number", "minimum": 0},
        "length_scale_factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "gp_iterations": _INT0,
        "gp_lr": _POS,
        "lambda_L": _POS,
        "penalty": {"enum": ["two-sided", "one-sided"]},
        "critic_input_scale": {"oneOf": [_POS, {"const": "auto"}]},
        "critic_iters": _INT1,
        "critic_warmup": _INT0,
        "batch_size": _INT1,
        "iterations": _INT0,
        "refine_iterations": _INT0,
        "critic_lr": _POS,
        "critic_weight_decay": {"type": "number", "minimum": 0},
        "critic_hidden": {"oneOf": [{"type": "null"}, _INTS]},
        "critic_activation": {"enum": ["softplus", "tanh"]},
        "flow_lr": _POS,
        "flow_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "flow_warmup": _INT0,
        "flow_layers": _INT1,
        "flow_hidden": {"oneOf": [{"type": "null"}, _INTS]},
        "init_log_kappa": {"oneOf": [_NUM, {"type": "array", "items": _NUM}, {"const": "balanced"}]},
        "init_log_std": {"oneOf": [{"type": "null"}, {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}]},
        "resample_per_critic_step": {"type": "boolean"},
        "sobol_N": _INT1,
        "sobol_bounds_samples": {"type": "integer", "minimum": 2},
        "threshold": _POS,
        "refine_passes": {"type": "integer", "minimum": 1, "maximum": 3},
        "interval_samples": _INT1,
        "plot_samples": _INT0,
        "log_every": _INT1,
        "checkpoint_every": _INT1,
        "seed": _INT0,
        "output_dir": {"type": "string"},
    },
}


def validate_config(d: dict) -> None:
    try:
        jsonschema.validate(d, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {path}: {exc.message}") from exc


def _lin(start, stop, num):
    return {"start": start, "stop": stop, "num": num}


_CARDIAC_CONTROLS = {
    spec["id"]: (_lin(0.0, 0.5, 11) if spec["protocol"].startswith("SS") else _lin(1.0, 1.1, 11))
    for spec in ds.CARDIAC_LAYOUT
}

PRESETS: dict[str, dict] = {
    "treloar": {
        "library": "isotropic",
        "length_scale_factor": 0.8,
        "lambda_L": 10.0,
        "threshold": 1e-4,
        "iterations": 20000,
        "refine_iterations": 10000,
    },
    "cardiac-synthetic": {
        "data": {
            "synthetic": {
                "generator": "cardiac-4term",
                "layout": "cardiac",
                "controls": _CARDIAC_CONTROLS,
                "sigma_min": 0.01,
                "sigma_r": 0.05,
                "seed": 0,
            }
        },
        "library": "anisotropic",
        "length_scale_factor": 0.6,
        "lambda_L": 100.0,
        "threshold": 0.01,
        "iterations": 20000,
        "refine_iterations": 10000,
    },
    "cardiac-experimental": {
        "library": "anisotropic",
        "length_scale_factor": 0.6,
        "lambda_L": 100.0,
        "threshold": 0.01,
        "iterations": 20000,
        "refine_iterations": 10000,
    },
    # scaled-down runs that finish in minutes on one CPU core
    "desk-isotropic": {
        "data": {
            "synthetic": {
                "generator": "mooney-rivlin",
                "layout": "treloar",
                "controls": {"UT": _lin(1.0, 2.5, 8), "EBT": _lin(1.0, 2.0, 8), "PS": _lin(1.0, 2.0, 8)},
                "sigma_min": 0.01,
                "sigma_r": 0.05,
                "seed": 0,
            }
        },
        "library": "isotropic",
        "n_s": 16,
        "length_scale_factor": 0.6,
        "lambda_L": 10.0,
        "threshold": 1e-4,
        "iterations": 2000,
        "refine_iterations": 1000,
        "critic_lr": 5e-3,
        "critic_warmup": 200,
        "critic_input_scale": "auto",
        "flow_lr": 3e-3,
        "flow_warmup": 100,
        "flow_decay": 0.997,
        "init_log_kappa": "balanced",
        "init_log_std": 0.1,
    },
    "desk-calibration": {
        "data": {
            "synthetic": {
                "generator": "neo-hooke",
                "layout": "treloar",
                "controls": {"UT": _lin(1.0, 2.5, 8), "EBT": _lin(1.0, 2.0, 8), "PS": _lin(1.0, 2.0, 8)},
                "sigma_min": 0.01,
                "sigma_r": 0.05,
                "seed": 0,
            }
        },
        "library": {"kind": "isotropic", "keep": ["c(1,0)"]},
        "n_s": 16,
        "length_scale_factor": 0.6,
        "lambda_L": 10.0,
        "iterations": 1000,
        "refine_iterations": 0,
        "critic_lr": 5e-3,
        "critic_warmup": 200,
        "flow_lr": 5e-3,
        "flow_decay": 0.998,
        "init_log_kappa": -2.0,
        "init_log_std": 0.1,
    },
}

GENERATORS = {
    "mooney-rivlin": ({"kind": "isotropic"}, {0: 0.1, 1: 0.3}),
    "neo-hooke": ({"kind": "isotropic", "keep": ["c(1,0)"]}, {0: 0.3}),
}


def preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = copy.deepcopy(PRESETS[name])
    d.update(overrides)
    if "data" not in d:
        raise ConfigError(f"preset {name!r} needs a dataset: pass data={{'csv': ...}}")
    return RunConfig.from_dict(d)


def _generator(spec) -> tuple[mech.ModelLibrary, np.ndarray]:
    if spec == "cardiac-4term":
        return mech.generator_4term()
    if isinstance(spec, str):
        if spec not in GENERATORS:
            raise ConfigError(f"unknown generator {spec!r}")
        lib_cfg, values = GENERATORS[spec]
        lib = mech.library_from_config(lib_cfg)
        kappa = np.zeros(lib.n_kappa)
        for i, v in values.items():
            kappa[i] = v
        return lib, kappa
    lib = mech.library_from_config(spec["library"])
    kappa = np.asarray(spec["kappa"], dtype=float)
    if kappa.shape != (lib.n_kappa,):
        raise ConfigError("generator kappa length does not match its library")
    return lib, kappa


def _controls(c) -> np.ndarray:
    if isinstance(c, dict):
        return np.linspace(float(c["start"]), float(c["stop"]), int(c["num"]))
    return np.asarray(c, dtype=float)


def load_tests(cfg: RunConfig) -> list[ds.MechanicalTest]:
    data = cfg.data
    if "csv" in data:
        return ds.load_dataset(data["csv"], data.get("sidecar"))
    syn = data["synthetic"]
    lib, kappa = _generator(syn["generator"])
    layout = syn["layout"]
    if isinstance(layout, str):
        layouts = {"treloar": ds.TRELOAR_LAYOUT, "cardiac": ds.CARDIAC_LAYOUT}
        if layout not in layouts:
            raise ConfigError(f"unknown layout {layout!r}")
        layout = layouts[layout]
    ids = [s["id"] for s in layout]
    missing = [i for i in ids if i not in syn["controls"]]
    if missing:
        raise ConfigError(f"no controls for tests {missing}")
    controls = {i: _controls(syn["controls"][i]) for i in ids}
    return ds.synthesize_dataset(
        lib, kappa, layout, controls,
        syn.get("sigma_min", cfg.sigma_min), syn.get("sigma_r", cfg.sigma_r), syn.get("seed", 0),
    )


def _stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STAGES.index(stage) if stage in STAGES else 99]))


def _stage_seed(seed: int, stage: str, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), 1000 + STAGES.index(stage), k]).generate_state(1)[0])


@dataclass
class DiscoveryRun:
    config: RunConfig
    tests: list
    grid: ds.FunctionGrid
    library: mech.ModelLibrary
    posteriors: dict[tuple[int, int], GpPosterior] | None = None
    gp_fits: dict | None = None
    flow: FlowModel | None = None
    history: list = field(default_factory=list)
    sobol: SobolReport | None = None
    reduced_library: mech.ModelLibrary | None = None
    index_map: dict | None = None
    refined_flow: FlowModel | None = None
    refine_history: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    stages_done: list = field(default_factory=list)
    mode: str = "discover"

    @property
    def out(self) -> Path:
        return Path(self.config.output_dir)

    @property
    def final_flow(self) -> FlowModel | None:
        return self.refined_flow or self.flow

    @property
    def final_library(self) -> mech.ModelLibrary:
        return self.reduced_library if self.refined_flow is not None else self.library


def _offset_for(cfg: RunConfig, n: int, keep=None, forward_map: ForwardMap | None = None, posteriors=None):
    if cfg.init_log_kappa == "balanced":
        peak = max(float(np.abs(p.mean).max()) for p in posteriors.values())
        return forward_map.balanced_log_kappa(peak)
    off = np.asarray(cfg.init_log_kappa, dtype=float)
    if off.ndim == 0:
        return float(off)
    return off[list(keep)] if keep is not None else off


def _metadata(run: DiscoveryRun, stage: str) -> dict:
    return {"stage": stage, "config_hash": run.config.hash(), "seed": run.config.seed}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _prepare(cfg: RunConfig, mode: str) -> DiscoveryRun:
    try:
        library = mech.library_from_config(cfg.library)
    except mech.MechanicsError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        tests = load_tests(cfg)
        grid = ds.build_grid(tests, cfg.n_s)
    except ds.DatasetError as exc:
        raise ConfigError(str(exc)) from exc
    run = DiscoveryRun(cfg, tests, grid, library, mode=mode)
    run.out.mkdir(parents=True, exist_ok=True)
    _clear_artifacts(run.out)
    _write_json(run.out / "config.json", cfg.to_dict())
    ds.save_dataset(tests, run.out / "data.csv")
    return run


_ARTIFACTS = (
    "run.json", "metrics.json", "gp_posteriors.json", "gp_hyperparameters.json", "flow_*.npz", "flow_*.json",
    "history_*.csv", "sobol.json", "sobol.csv", "sobol_curves.csv", "reduced_library.json",
)


def _clear_artifacts(out: Path) -> None:
    """Remove outputs of an earlier run so stale files cannot be mixed in."""
    for pattern in _ARTIFACTS:
        for path in out.glob(pattern):
            path.unlink()
    for ck in out.glob("checkpoints_*"):
        if ck.is_dir():
            shutil.rmtree(ck)


def _stage(run: DiscoveryRun, name: str, fn):
    try:
        fn()
    except (ConfigError, StageError):
        raise
    except Exception as exc:  # noqa: BLE001 - annotate and re-raise with the stage name
        raise StageError(name, exc, _last_checkpoint(run)) from exc
    run.stages_done.append(name)
    _write_json(run.out / "run.json", {"stages": run.stages_done, "mode": run.mode, **_metadata(run, name)})


def _last_checkpoint(run: DiscoveryRun) -> str | None:
    cks = sorted(run.out.glob("**/flow_*.npz"))
    return str(cks[-1]) if cks else None


def _gp_stage(run: DiscoveryRun) -> None:
    cfg = run.config
    em = ErrorModel(cfg.sigma_min, cfg.sigma_r)
    run.posteriors, run.gp_fits = fit_posteriors(
        run.tests, run.grid, em, cfg.length_scale_factor, cfg.gp_iterations, cfg.gp_lr
    )
    export_posteriors(run.posteriors, run.out / "gp_posteriors.json")
    _write_json(
        run.out / "gp_hyperparameters.json",
        {
            c: {"fitted": f.fitted.to_dict(), "used": f.params.to_dict(), "normalizer": f.normalizer.to_dict()}
            for c, f in run.gp_fits.items()
        }
        | {"meta": _metadata(run, "gp")},
    )


def critic_input_scale(cfg: RunConfig, posteriors) -> float:
    """Factor applied to stress functions before the critic.

    ``"auto"`` gives 1 / median GP posterior std over the grid, so the
    critic's non-linearity acts on the scale of the posterior spread.
    """
    if cfg.critic_input_scale != "auto":
        return float(cfg.critic_input_scale)
    sd = np.sqrt(np.concatenate([np.diag(p.cov) for p in posteriors.values()]))
    sd = sd[sd > 0]
    return 1.0 / float(np.median(sd)) if sd.size else 1.0


def _train_flow(run: DiscoveryRun, library, stage: str, iterations: int, keep=None) -> tuple[FlowModel, list]:
    cfg = run.config
    fm = ForwardMap.from_grid(library, run.grid)
    flow = FlowModel(
        library.n_kappa, cfg.flow_layers, cfg.flow_hidden, seed=_stage_seed(cfg.seed, stage, 0),
        init_log_kappa=_offset_for(cfg, library.n_kappa, keep, fm, run.posteriors),
        init_log_std=cfg.init_log_std,
    )
    critic = make_critic(
        run.grid.n_s, cfg.critic_hidden, cfg.critic_activation, seed=_stage_seed(cfg.seed, stage, 1)
    )
    ck_dir = run.out / f"checkpoints_{stage}"
    result = train(
        gp_sampler(run.posteriors, run.grid), fm, flow, critic,
        cfg.distill_config(iterations, str(ck_dir), critic_input_scale(cfg, run.posteriors)), _stage_rng(cfg.seed, stage),
    )
    flow.save(run.out / f"flow_{stage}", {**_metadata(run, stage), "library": library.to_config(), "iterations": iterations})
    write_history(result.history, run.out / f"history_{stage}.csv")
    return flow, result.history


def _sobol_stage(run: DiscoveryRun) -> None:
    cfg = run.config
    library, flow = run.library, run.flow
    keep_total = list(range(library.n_kappa))
    report = None
    for p in range(cfg.refine_passes):
        fm = ForwardMap.from_grid(library, run.grid)
        report = deformation_resolved_indices(
            flow, fm, run.grid, cfg.sobol_N, cfg.sobol_bounds_samples, _stage_rng(cfg.seed + p, "sobol")
        )
        reduced, index_map = reduce_library(report, library, cfg.threshold)
        keep_total = [keep_total[i] for i in sorted(index_map)]
        if p == 0:
            run.sobol = report
        if reduced.n_kappa == library.n_kappa or p == cfg.refine_passes - 1:
            library = reduced
            break
        library = reduced
        flow, _ = _train_flow(run, library, "refine", cfg.refine_iterations, keep_total)
    run.reduced_library = library
    run.index_map = {int(o): n for n, o in enumerate(keep_total)}
    run.sobol.write_json(run.out / "sobol.json", full=True)
    run.sobol.write_csv(run.out / "sobol.csv")
    run.sobol.write_curves(run.out / "sobol_curves.csv", run.grid)
    _write_json(
        run.out / "reduced_library.json",
        {"library": library.to_config(), "index_map": {str(k): v for k, v in run.index_map.items()}, **_metadata(run, "sobol")},
    )


def _refine_stage(run: DiscoveryRun) -> None:
    keep = sorted(run.index_map)
    run.refined_flow, run.refine_history = _train_flow(
        run, run.reduced_library, "refine", run.config.refine_iterations, keep
    )


def _metrics_stage(run: DiscoveryRun) -> None:
    run.metrics = compute_run_metrics(run)
    _write_json(run.out / "metrics.json", run.metrics)


def _execute(cfg: RunConfig, mode: str, stages) -> DiscoveryRun:
    run = _prepare(cfg, mode)
    order = ["gp", "distill"] if mode == "calibrate" else list(STAGES)
    wanted = order if stages in (None, "all") else order[: order.index(stages) + 1]
    steps = {
        "gp": lambda: _gp_stage(run),
        "distill": lambda: _distill_stage(run),
        "sobol": lambda: _sobol_stage(run),
        "refine": lambda: _refine_stage(run),
    }
    for name in wanted:
        log.info("running stage %s", name)
        _stage(run, name, steps[name])
    _stage(run, "metrics", lambda: _metrics_stage(run))
    return run


def _distill_stage(run: DiscoveryRun) -> None:
    run.flow, run.history = _train_flow(run, run.library, "distill", run.config.iterations)


def run_discovery(config: RunConfig, stages: str | None = "all") -> DiscoveryRun:
    """GP -> distill -> Sobol' reduction -> refinement, then metrics."""
    if isinstance(config, dict):
        config = RunConfig.from_dict(config)
    if stages not in (None, "all") and stages not in STAGES:
        raise ConfigError(f"unknown stage {stages!r}")
    return _execute(config, "discover", stages)


def run_calibration(config: RunConfig) -> DiscoveryRun:
    """GP + distillation on a fixed library (no sensitivity reduction)."""
    if isinstance(config, dict):
        config = RunConfig.from_dict(config)
    return _execute(config, "calibrate", "all")


def compute_metrics(source, grid: ds.FunctionGrid) -> dict:
    """R^2, RMSE and EC per function and in total.

    ``source`` is a posterior dict or a model sample matrix ``(n, n_s)``.
    The mean and interval bounds are linearly interpolated from the grid
    to the measurement controls.  Totals pool every measured point for
    R^2 / RMSE; total EC averages per-test means.
    """
    bands = interval_bands(source, grid)
    at = bands_at_measurements(bands, grid)
    per_fn_ec, total_ec = estimated_coverage(source, grid)
    per_fn, ys, ms = {}, [], []
    for t, q, _, tg, comp in grid.block_info():
        y = tg.test.stresses[:, q]
        m = at[(t, q)][0]
        ys.append(y)
        ms.append(m)
        per_fn[f"{tg.test.id}/{comp}"] = {"r2": _r2(y, m), "rmse": _rmse(y, m), "ec": per_fn_ec[(t, q)]}
    y, m = np.concatenate(ys), np.concatenate(ms)
    return {"per_function": per_fn, "total": {"r2": _r2(y, m), "rmse": _rmse(y, m), "ec": total_ec}}


def _r2(y, m) -> float:
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - m) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else float("-inf"))


def _rmse(y, m) -> float:
    return float(np.sqrt(np.mean((y - m) ** 2)))


def model_samples(run: DiscoveryRun, count: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(kappa, stacked functions)`` from the final flow."""
    count = run.config.interval_samples if count is None else count
    kappa, _ = run.final_flow.sample(count, _stage_rng(run.config.seed, "metrics"))
    return kappa, ForwardMap.from_grid(run.final_library, run.grid)(kappa)


def compute_run_metrics(run: DiscoveryRun) -> dict:
    out = {"meta": {"config_hash": run.config.hash(), "seed": run.config.seed, "stages": list(run.stages_done)}}
    if run.posteriors is not None:
        out["gp"] = compute_metrics(run.posteriors, run.grid)
    if run.final_flow is not None:
        kappa, S = model_samples(run)
        out["model"] = compute_metrics(S, run.grid)
        out["model"]["parameters"] = {
            name: {"mean": float(kappa[:, i].mean()), "std": float(kappa[:, i].std())}
            for i, name in enumerate(run.final_library.param_names)
        }
    if run.reduced_library is not None:
        out["reduced_library"] = list(run.reduced_library.param_names)
    return out


def load_run(run_dir) -> DiscoveryRun:
    """Rebuild a run from its output directory (GP is refitted deterministically)."""
    run_dir = Path(run_dir)
    if not (run_dir / "config.json").exists():
        raise ConfigError(f"{run_dir} is not a run directory")
    d = json.loads((run_dir / "config.json").read_text())
    d["output_dir"] = str(run_dir)
    cfg = RunConfig.from_dict(d)
    tests = ds.load_dataset(run_dir / "data.csv")
    grid = ds.build_grid(tests, cfg.n_s)
    library = mech.library_from_config(cfg.library)
    meta = json.loads((run_dir / "run.json").read_text()) if (run_dir / "run.json").exists() else {"stages": []}
    run = DiscoveryRun(cfg, tests, grid, library, mode=meta.get("mode", "discover"))
    stages = meta.get("stages", [])
    if "gp" in stages:
        em = ErrorModel(cfg.sigma_min, cfg.sigma_r)
        run.posteriors, run.gp_fits = fit_posteriors(tests, grid, em, cfg.length_scale_factor, cfg.gp_iterations, cfg.gp_lr)
    if (run_dir / "flow_distill.npz").exists():
        run.flow = FlowModel.load(run_dir / "flow_distill")
    if (run_dir / "reduced_library.json").exists():
        red = json.loads((run_dir / "reduced_library.json").read_text())
        run.reduced_library = mech.library_from_config(red["library"])
        run.index_map = {int(k): v for k, v in red["index_map"].items()}
    if (run_dir / "sobol.json").exists():
        run.sobol = SobolReport.from_dict(json.loads((run_dir / "sobol.json").read_text()))
    if (run_dir / "flow_refine.npz").exists() and "refine" in stages:
        run.refined_flow = FlowModel.load(run_dir / "flow_refine")
    run.stages_done = [s for s in stages if s != "metrics"]
    return run


def export_plot_data(run: DiscoveryRun, out_dir=None) -> list[Path]:
    """Per-function band CSVs, parameter samples and Sobol' curves."""
    if run.posteriors is None and run.final_flow is None:
        raise StageError("export", ConfigError("run has no completed stage to export"))
    out = Path(out_dir) if out_dir else run.out / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    rng = _stage_rng(run.config.seed, "export")
    sources = []
    if run.posteriors is not None:
        sources.append(("gp", run.posteriors, None))
    if run.final_flow is not None:
        kappa, S = model_samples(run)
        sources.append(("model", S, kappa))
    k = run.config.plot_samples
    for tag, src, kappa in sources:
        mean, lo, hi = interval_bands(src, run.grid)
        if tag == "gp":
            draws = sample_stacked(src, run.grid, k, rng)
        else:
            draws = src[rng.choice(len(src), size=min(k, len(src)), replace=False)]
        bad = np.flatnonzero(mean < lo - 1e-12) if tag == "model" else []
        if len(bad):
            log.info("%s: mean outside interval at %d grid points", tag, len(bad))
        for t, q, sl, tg, comp in run.grid.block_info():
            path = out / f"{tag}_{_safe(tg.test.id)}_{comp}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["control", "mean", "lower", "upper"] + [f"sample_{i}" for i in range(len(draws))])
                for s, c in enumerate(tg.controls):
                    j = sl.start + s
                    w.writerow([repr(float(c)), repr(float(mean[j])), repr(float(lo[j])), repr(float(hi[j]))] + [repr(float(v)) for v in draws[:, j]])
            written.append(path)
        if kappa is not None:
            path = out / "parameter_samples.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(list(run.final_library.param_names))
                for row in kappa:
                    w.writerow([repr(float(v)) for v in row])
            written.append(path)
    if run.sobol is not None:
        path = out / "sobol_curves.csv"
        run.sobol.write_curves(path, run.grid)
        written.append(path)
    return written


def _safe(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "-" for ch in s)


def config_fields() -> list[str]:
    return [f.name for f in fields(RunConfig)]
