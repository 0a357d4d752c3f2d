"""File-based orchestration of a calibration study.

A run directory holds a ``manifest.json`` and every artifact the commands
produce.  The manifest stores a snapshot of the configuration and its hash;
commands refuse to touch a run whose snapshot does not match the
configuration they were given.  Artifacts are JSON (structured data) or CSV
(plot series), written deterministically so that re-running a command with
the same configuration reproduces them byte for byte.

Seeds are tuples rooted at the configured master seed, one stage code per
kind of randomness::

    (seed, 0)              target synthesis
    (seed, 1, k)           design of wave k
    (seed, 2, k, i)        run i of wave k
    (seed, 3)              training design
    (seed, 4, i)           training run i
    (seed, 5, tag..., i)   runs requested during calibration
    (seed, 6, ...)         proposal chains and resampling
    (seed, 7)              emulator hyperparameter search
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np

from .design import InputRegion, maximin_lhs, reduce_region, region_volume_fraction
from .emulator import LikelihoodEmulator
from .likelihood import (
    GROUP_LABELS,
    DiscrepancySpec,
    TargetData,
    group_bounds,
    output_proportions,
    total_loglik,
)
from .sampler import (
    CalibrationConfig,
    CalibrationState,
    ImportanceSample,
    LoglikEvaluator,
    RunCache,
    reweight,
    run_calibration,
)
from .simulator import INPUT_NAMES, NhmInputs, NhmSimulator, SimulatorOutput, make_rng

__all__ = [
    "DEFAULT_CONFIG",
    "ConfigError",
    "ArtifactError",
    "Run",
    "load_config",
    "config_hash",
    "cmd_synthesize_target",
    "cmd_wave",
    "cmd_emulate",
    "cmd_calibrate",
    "cmd_reweight",
    "cmd_report",
]

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "nhmcal.manifest"
MANIFEST_VERSION = 1

DEFAULT_CONFIG = {
    "seed": 0,
    "simulator": {
        "active_inputs": ["onset_age", "scale_normal_to_low", "adenoma_prob"],
        "base_inputs": {},
        "cohort_size": 5000,
        "n_randomizations": 10,
        "window_years": None,
    },
    "prior": {"lower": [0.0, 10.0, 0.05], "upper": [50.0, 100.0, 0.95]},
    "truth": {"x_true": [20.0, 45.0, 0.4], "cohort_size": 50000, "lambda_true": None},
    "discrepancy": [0.01, 0.01, 0.01, 0.01],
    "waves": [
        {"n_runs": 500, "log_ratio_threshold": -40.0, "restarts": 20},
        {"n_runs": 500, "log_ratio_threshold": -40.0, "restarts": 20},
    ],
    "emulator": {"n_train": 200, "gibbs_iters": 200, "restarts": 20},
    "calibration": {
        "S": 500,
        "M": 500,
        "thin": 20,
        "warmup": 500,
        "u": 50,
        "v": 2.0,
        "alpha_start": 0.1,
        "alpha_step": 0.1,
        "alpha_cap": 1.0,
        "max_iterations": 12,
        "ess_floor": 0.05,
        "corr_threshold": 0.9,
        "target_accept": 0.3,
        "refit_gibbs_iters": 50,
        "near_zero": 0.01,
    },
}

_LAMBDA = {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
           "minItems": 4, "maxItems": 4}
_VECTOR = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_POS_INT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["seed", "simulator", "prior", "truth", "discrepancy", "waves", "emulator",
                 "calibration"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "simulator": {
            "type": "object",
            "required": ["active_inputs", "cohort_size", "n_randomizations"],
            "properties": {
                "active_inputs": {"type": "array", "items": {"enum": list(INPUT_NAMES)},
                                  "minItems": 1, "uniqueItems": True},
                "base_inputs": {"type": "object",
                                "propertyNames": {"enum": list(INPUT_NAMES)},
                                "additionalProperties": {"type": "number"}},
                "cohort_size": _POS_INT,
                "n_randomizations": _POS_INT,
                "window_years": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "prior": {"type": "object", "required": ["lower", "upper"],
                  "properties": {"lower": _VECTOR, "upper": _VECTOR}},
        "truth": {
            "type": "object",
            "required": ["x_true", "cohort_size"],
            "properties": {
                "x_true": _VECTOR,
                "cohort_size": _POS_INT,
                "lambda_true": {"oneOf": [{"type": "null"}, _LAMBDA]},
            },
        },
        "discrepancy": _LAMBDA,
        "waves": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["n_runs", "log_ratio_threshold"],
                "properties": {
                    "n_runs": {"type": "integer", "minimum": 2},
                    "log_ratio_threshold": {"type": "number", "maximum": 0},
                    "restarts": _POS_INT,
                    "cohort_size": _POS_INT,
                },
            },
        },
        "emulator": {
            "type": "object",
            "required": ["n_train"],
            "properties": {"n_train": {"type": "integer", "minimum": 4},
                           "gibbs_iters": {"type": "integer", "minimum": 0},
                           "restarts": _POS_INT},
        },
        "calibration": {"type": "object"},
    },
}


class ConfigError(ValueError):
    """Invalid configuration, or one that does not match the run's snapshot."""


class ArtifactError(ValueError):
    """A required artifact is missing, or a write would alter an existing one."""


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(config: dict) -> dict:
    """Check a complete configuration; returns it unchanged."""
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"config {path}: {exc.message}") from None
    p = len(config["simulator"]["active_inputs"])
    lower, upper = config["prior"]["lower"], config["prior"]["upper"]
    if len(lower) != p or len(upper) != p or len(config["truth"]["x_true"]) != p:
        raise ConfigError("prior bounds and x_true need one entry per active input")
    try:
        InputRegion(lower, upper)
        CalibrationConfig(**config["calibration"])
        _simulator(config).inputs_at(config["truth"]["x_true"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return config


def load_config(path=None, seed: int | None = None) -> dict:
    """Defaults overlaid with the JSON file at ``path`` and an optional seed."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            override = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ArtifactError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(override, dict):
            raise ConfigError("config file must hold a JSON object")
        config = _merge(config, override)
    if seed is not None:
        config["seed"] = int(seed)
    return validate_config(config)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(_canonical(config).encode()).hexdigest()


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _json_bytes(obj) -> bytes:
    return (json.dumps(_to_jsonable(obj), indent=1, sort_keys=True) + "\n").encode()


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if isinstance(v, float) and not np.isfinite(v) else
                         repr(float(v)) if isinstance(v, (float, np.floating)) else v
                         for v in row])
    return buf.getvalue().encode()


def _simulator(config: dict) -> NhmSimulator:
    sim = config["simulator"]
    base = NhmInputs().replace(**sim.get("base_inputs", {}))
    return NhmSimulator(
        active=tuple(sim["active_inputs"]),
        base=base,
        cohort_size=sim["cohort_size"],
        n_randomizations=sim["n_randomizations"],
        window_years=sim.get("window_years"),
    )


def _calibration_config(config: dict) -> CalibrationConfig:
    return CalibrationConfig(**config["calibration"])


def _int_seed(seed) -> int:
    return int(make_rng(seed).integers(2**31 - 1))


def _lambda_tag(lam) -> str:
    return "_".join(f"{v:g}" for v in lam)


class Run:
    """A run directory and its manifest.

    Parameters
    ----------
    manifest_path : path-like
        Location of ``manifest.json``; artifacts live beside it.
    config : dict, optional
        Configuration to use.  A new manifest is created from it when none
        exists; an existing manifest must carry the same config hash.  When
        omitted, the manifest's snapshot is used.
    """

    def __init__(self, manifest_path, config: dict | None = None):
        self.path = Path(manifest_path)
        self.root = self.path.parent
        if self.path.exists():
            self.manifest = json.loads(self.path.read_text())
            if self.manifest.get("format") != MANIFEST_FORMAT:
                raise ArtifactError(f"{self.path} is not a run manifest")
            stored = self.manifest["config_hash"]
            if config_hash(self.manifest["config"]) != stored:
                raise ConfigError(f"{self.path}: config snapshot does not match its recorded hash")
            if config is not None and config_hash(config) != stored:
                raise ConfigError(
                    f"config hash {config_hash(config)[:12]} differs from the run's "
                    f"{stored[:12]}; refusing to mix artifacts across configurations"
                )
            self.config = validate_config(self.manifest["config"])
        else:
            if config is None:
                raise ArtifactError(f"manifest not found: {self.path} (pass a config to create it)")
            self.config = validate_config(config)
            digest = config_hash(self.config)
            self.manifest = {
                "format": MANIFEST_FORMAT,
                "version": MANIFEST_VERSION,
                "run_id": digest[:12],
                "config": self.config,
                "config_hash": digest,
                "artifacts": {},
                "waves": [],
                "history": [],
            }
            self.root.mkdir(parents=True, exist_ok=True)
            self._save_manifest()

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    @property
    def artifacts(self) -> dict:
        return self.manifest["artifacts"]

    def _save_manifest(self) -> None:
        self.path.write_text(json.dumps(_to_jsonable(self.manifest), indent=1, sort_keys=True) + "\n")

    def record(self, command: str, **details) -> None:
        entry = {"command": command, "time": datetime.now(timezone.utc).isoformat(timespec="seconds")}
        entry.update(_to_jsonable(details))
        self.manifest["history"].append(entry)
        self._save_manifest()

    def write(self, relpath: str, data: bytes) -> str:
        """Write an artifact; an existing file may only be rewritten identically."""
        target = self.root / relpath
        if target.exists() and target.read_bytes() != data:
            raise ArtifactError(
                f"{relpath} already exists with different content; artifacts are append-only "
                "(start a new run directory instead)"
            )
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
        return relpath

    def write_json(self, relpath: str, obj) -> str:
        return self.write(relpath, _json_bytes(obj))

    def write_csv(self, relpath: str, header, rows) -> str:
        return self.write(relpath, _csv_bytes(header, rows))

    def require(self, relpath: str | None, what: str) -> Path:
        if relpath is None:
            raise ArtifactError(f"missing {what}; run the command that produces it first")
        target = self.root / relpath
        if not target.exists():
            raise ArtifactError(f"missing {what}: {target}")
        return target

    def read_json(self, relpath, what: str):
        return json.loads(self.require(relpath, what).read_text())


# ---------------------------------------------------------------- target


def _perturb_target(output: SimulatorOutput, lam: list[float], rng) -> TargetData:
    # observed counts drawn from the discrepancy model around the simulator output
    def binomial(y, n, lam_j):
        p = rng.beta(1 + lam_j * y, 1 + lam_j * (n - y))
        return rng.binomial(n, p)

    def multinomial(y, lam_j):
        n = int(np.sum(y))
        p = rng.dirichlet(1 + lam_j * np.asarray(y, dtype=float))
        return rng.multinomial(n, p)

    return TargetData(
        z1=binomial(output.y1[0], output.n1[0], lam[0]),
        N1=output.n1[0],
        z2=multinomial(output.y2, lam[1]),
        z3=multinomial(output.y3, lam[2]),
        z4=binomial(output.y4, output.n4, lam[3]),
        N4=output.n4,
    ).validate()


def cmd_synthesize_target(run: Run) -> str:
    """Simulate the truth at a large cohort and store it as target data."""
    truth = run.config["truth"]
    sim = _simulator(run.config)
    sim.n_randomizations = 1
    rng_seed = (run.seed, 0)
    output = sim(truth["x_true"], rng_seed, cohort_size=truth["cohort_size"])
    if truth.get("lambda_true") is None:
        target = TargetData.from_output(output)
    else:
        target = _perturb_target(output, truth["lambda_true"], make_rng((run.seed, 0, 1)))
    rel = run.write_json("target.json", target.to_dict())
    run.artifacts["target"] = rel
    run.manifest["truth"] = {"x_true": truth["x_true"], "inputs": dataclasses.asdict(sim.inputs_at(truth["x_true"]))}
    run.record("synthesize-target", path=rel)
    return rel


def _load_target(run: Run) -> TargetData:
    return TargetData.from_dict(run.read_json(run.artifacts.get("target"), "target data (synthesize-target)"))


def _lambda(run: Run) -> DiscrepancySpec:
    return DiscrepancySpec.from_sequence(run.config["discrepancy"])


# ----------------------------------------------------------------- waves


def _wave_region(run: Run, k: int) -> InputRegion:
    if k == 0:
        return InputRegion(run.config["prior"]["lower"], run.config["prior"]["upper"])
    waves = run.manifest["waves"]
    if len(waves) < k or waves[k - 1] is None:
        raise ArtifactError(f"wave {k - 1} has not been run; its region is needed for wave {k}")
    return InputRegion.from_dict(run.read_json(waves[k - 1]["region_out"], f"region of wave {k - 1}"))


def cmd_wave(run: Run, k: int) -> dict:
    """Design, simulate, score and reduce the input region for wave ``k``."""
    waves_cfg = run.config["waves"]
    if not 0 <= k < len(waves_cfg):
        raise ConfigError(f"wave index {k} outside the {len(waves_cfg)} configured waves")
    wcfg = waves_cfg[k]
    target = _load_target(run)
    lam = _lambda(run)
    region = _wave_region(run, k)
    sim = _simulator(run.config)
    cohort = wcfg.get("cohort_size", sim.cohort_size)

    design = maximin_lhs(wcfg["n_runs"], region, seed=(run.seed, 1, k),
                         restarts=wcfg.get("restarts", 20), wave=k)
    design.seed = [run.seed, 1, k]
    outputs, f = [], np.empty(len(design))
    for i, x in enumerate(design.points):
        out = sim(x, (run.seed, 2, k, i), cohort_size=cohort)
        outputs.append(out)
        f[i] = total_loglik(target, out, lam)
    reduced = reduce_region(design.points, f, region, wcfg["log_ratio_threshold"])
    fraction, se = region_volume_fraction(reduced, region, seed=(run.seed, 1, k, 1))

    d = f"wave{k}"
    names = run.config["simulator"]["active_inputs"]
    entry = {
        "index": k,
        "cohort_size": cohort,
        "seed": [run.seed, 2, k],
        "n_points": len(design),
        "region_in": run.write_json(f"{d}/region_in.json", region.to_dict()),
        "design": run.write_json(f"{d}/design.json", design.to_dict()),
        "outputs": run.write_json(f"{d}/outputs.json", {
            "design_id": d,
            "runs": [{"index": i, "seed": [run.seed, 2, k, i], "output": o.to_dict()}
                     for i, o in enumerate(outputs)],
        }),
        "logliks": run.write_csv(f"{d}/logliks.csv", ["index", *names, "loglik"],
                                 [[i, *x, v] for i, (x, v) in enumerate(zip(design.points, f))]),
        "region_out": run.write_json(f"{d}/region.json", reduced.to_dict()),
        "volume_fraction": fraction,
        "volume_fraction_se": se,
        "max_loglik": float(f.max()),
    }
    waves = run.manifest["waves"]
    while len(waves) <= k:
        waves.append(None)
    waves[k] = entry
    run.record("wave", wave=k, n_points=len(design), volume_fraction=fraction)
    return entry


def _final_region(run: Run) -> InputRegion:
    n = len(run.config["waves"])
    return _wave_region(run, n)


def _load_wave_outputs(run: Run) -> list[tuple[np.ndarray, SimulatorOutput]]:
    pairs = []
    for k, entry in enumerate(run.manifest["waves"]):
        if entry is None:
            continue
        design = run.read_json(entry["design"], f"design of wave {k}")
        runs = run.read_json(entry["outputs"], f"outputs of wave {k}")["runs"]
        for x, r in zip(design["points"], runs):
            pairs.append((np.asarray(x, dtype=float), SimulatorOutput.from_dict(r["output"])))
    return pairs


# -------------------------------------------------------------- emulator


def cmd_emulate(run: Run) -> str:
    """Fit the emulator to fresh runs on a space-filling design of the final region."""
    target = _load_target(run)
    region = _final_region(run)
    ecfg = run.config["emulator"]
    design = maximin_lhs(ecfg["n_train"], region, seed=(run.seed, 3), restarts=ecfg.get("restarts", 20))
    evaluator = LoglikEvaluator(_simulator(run.config), target, _lambda(run), master_seed=(run.seed, 4))
    f, keys = evaluator(design.points)
    ok = np.isfinite(f)
    if ok.sum() < 4:
        raise ArithmeticError("fewer than four training runs succeeded")
    emulator = LikelihoodEmulator(gibbs_iters=ecfg.get("gibbs_iters", 200),
                                  random_state=_int_seed((run.seed, 7))).fit(design.points[ok], f[ok])
    run.artifacts["training"] = run.write_json("emulator/training.json", {
        "points": design.points, "loglik": f, "run_keys": keys, "design_seed": [run.seed, 3],
    })
    run.artifacts["training_runs"] = run.write_json("emulator/runs.json", evaluator.cache.to_dict())
    run.artifacts["emulator"] = run.write_json("emulator/emulator.json", emulator.to_dict())
    run.record("emulate", n_train=int(ok.sum()), failed_runs=int((~ok).sum()))
    return run.artifacts["emulator"]


def _load_runs(run: Run, key: str, what: str) -> RunCache:
    return RunCache.from_dict(run.read_json(run.artifacts.get(key), what))


# ----------------------------------------------------------- calibration


def cmd_calibrate(run: Run) -> dict:
    """Iterate refinement and importance weighting to the stopping rule."""
    target = _load_target(run)
    lam = _lambda(run)
    region = _final_region(run)
    ccfg = _calibration_config(run.config)
    training = run.read_json(run.artifacts.get("training"), "training data (emulate)")
    emulator = LikelihoodEmulator.from_dict(run.read_json(run.artifacts.get("emulator"), "emulator (emulate)"))
    cache = _load_runs(run, "training_runs", "training runs (emulate)")

    X = np.asarray(training["points"], dtype=float)
    f = np.array([np.nan if v is None else v for v in training["loglik"]], dtype=float)
    ok = np.isfinite(f)
    state = CalibrationState(X[ok], f[ok], emulator, ccfg.alpha_start)
    evaluator = LoglikEvaluator(_simulator(run.config), target, lam, master_seed=(run.seed, 5), cache=cache)

    report_paths = []

    def write_report(report):
        report_paths.append(run.write_json(f"calibration/iteration_{report['iteration']:02d}.json", report))

    result = run_calibration(ccfg, region, evaluator, state, seed=(run.seed, 6), callback=write_report)
    sample = result.sample
    names = run.config["simulator"]["active_inputs"]
    summary = {
        "iterations": len(result.reports),
        "final_alpha": sample.alpha,
        "ess": sample.ess,
        "ess_fraction": sample.ess / ccfg.S,
        "n_unique": int(np.unique(sample.calibrated_index).size),
        "n_train": int(result.state.X_train.shape[0]),
        "simulator_runs": evaluator.n_evaluations,
        "converged": bool(result.reports[-1].get("converged", False)),
        "resample_seed": list(result.resample_seed),
    }
    cal = run.artifacts.setdefault("calibration", {})
    cal.update(
        reports=report_paths,
        sample=run.write_json("calibration/importance_sample.json",
                              {**sample.to_dict(), "resample_seed": list(result.resample_seed)}),
        calibrated=run.write_csv("calibration/calibrated.csv", ["draw", "proposal_index", *names],
                                 [[j, i, *sample.points[i]] for j, i in enumerate(sample.calibrated_index)]),
        runs=run.write_json("calibration/runs.json", evaluator.cache.to_dict()),
        emulator=run.write_json("calibration/emulator.json", result.state.emulator.to_dict()),
        summary=summary,
    )
    run.record("calibrate", **summary)
    return summary


def _load_sample(run: Run) -> tuple[ImportanceSample, list]:
    cal = run.artifacts.get("calibration", {})
    d = run.read_json(cal.get("sample"), "importance sample (calibrate)")
    return ImportanceSample.from_dict(d), d.get("resample_seed")


def _reweight(run: Run, lam_values, seed=None):
    sample, stored_seed = _load_sample(run)
    outputs = RunCache.from_dict(
        run.read_json(run.artifacts["calibration"].get("runs"), "calibration runs (calibrate)"))
    lam = DiscrepancySpec.from_sequence(lam_values)
    seed = tuple(stored_seed) if seed is None else seed
    M = _calibration_config(run.config).M
    return reweight(sample, outputs, _load_target(run), lam, M, seed=seed), sample, outputs, seed


def cmd_reweight(run: Run, lam_values, seed=None) -> dict:
    """Calibrated sample under other discrepancy fractions, from stored runs only.

    ``seed`` defaults to the resampling seed of the calibrate stage, so the
    baseline fractions reproduce the calibrated set exactly.
    """
    lam_values = [float(v) for v in lam_values]
    if len(lam_values) != 4:
        raise ConfigError("--lambda takes four values")
    DiscrepancySpec.from_sequence(lam_values)
    res, base, _, seed = _reweight(run, lam_values, seed)
    names = run.config["simulator"]["active_inputs"]
    tag = _lambda_tag(lam_values)
    summary = {
        "lambda": lam_values,
        "ess": res.ess,
        "baseline_ess": base.ess,
        "ess_ratio": res.ess / base.ess if base.ess > 0 else float("nan"),
        "n_unique": res.n_unique,
        "M": int(res.calibrated.shape[0]),
        "seed": list(seed) if isinstance(seed, (tuple, list)) else seed,
    }
    entry = {
        "sample": run.write_json(f"reweight/{tag}/importance_sample.json", res.sample.to_dict()),
        "calibrated": run.write_csv(f"reweight/{tag}/calibrated.csv", ["draw", "proposal_index", *names],
                                    [[j, i, *res.sample.points[i]]
                                     for j, i in enumerate(res.sample.calibrated_index)]),
        "summary": summary,
    }
    run.artifacts.setdefault("reweights", {})[tag] = entry
    run.record("reweight", **summary)
    return summary


# ---------------------------------------------------------------- report


def _group_rows():
    for key, labels in GROUP_LABELS.items():
        for j, label in enumerate(labels):
            yield key, j, label


def _best_output(run: Run, target, lam, runs: RunCache) -> SimulatorOutput:
    best, best_f = None, -np.inf
    candidates = [o for _, o in _load_wave_outputs(run)] + [runs[k] for k in sorted(runs)]
    for out in candidates:
        f = total_loglik(target, out, lam)
        if f > best_f:
            best, best_f = out, f
    if best is None:
        raise ArtifactError("no simulator runs available")
    return best


def _proportion_matrix(outputs: list[SimulatorOutput]) -> dict[str, np.ndarray]:
    props = [output_proportions(o) for o in outputs]
    return {key: np.array([p[key][0] for p in props]) for key in GROUP_LABELS}


def _quantile_rows(prefix, P, bounds, tp):
    rows = []
    for key, j, label in _group_rows():
        col = P[key][:, j]
        half = bounds[key]["bounds"].discrepancy[j]
        p = tp[key]["p"][j]
        rows.append([*prefix, key, label, p, p - half, p + half, float(col.mean()),
                     *np.quantile(col, [0.025, 0.5, 0.975]),
                     float(np.mean(np.abs(col - p) <= half))])
    return rows


def cmd_report(run: Run) -> dict:
    """Emit the plot series and a JSON summary of the study."""
    target = _load_target(run)
    lam = _lambda(run)
    cal = run.artifacts.get("calibration", {})
    runs = RunCache.from_dict(run.read_json(cal.get("runs"), "calibration runs (calibrate)"))
    sample, stored_seed = _load_sample(run)
    names = run.config["simulator"]["active_inputs"]
    best = _best_output(run, target, lam, runs)
    bounds = group_bounds(target, best, lam)
    paths = {}

    rows = []
    for key, j, label in _group_rows():
        b = bounds[key]
        vb = b["bounds"]
        rows.append([key, label, b["p"][j], b["p_x"][j],
                     vb.measurement[j], vb.simulator[j], vb.discrepancy[j]])
    paths["variance_bounds"] = run.write_csv(
        "report/variance_bounds.csv",
        ["group_set", "group", "target", "best_run", "half_width_measurement",
         "half_width_simulator", "half_width_discrepancy"], rows)

    rows = []
    for rel in cal.get("reports", []):
        rep = run.read_json(rel, "iteration report")
        for i, (fv, mv) in enumerate(zip(rep["scatter"]["f"], rep["scatter"]["m_star"])):
            rows.append([rep["iteration"], rep["status"], i, np.nan if fv is None else fv, mv])
    paths["emulator_vs_loglik"] = run.write_csv(
        "report/emulator_vs_loglik.csv", ["iteration", "status", "point", "loglik", "emulator_mean"], rows)

    tp = {key: {"p": bounds[key]["p"]} for key in GROUP_LABELS}
    header = ["group_set", "group", "target", "lower_bound", "upper_bound", "mean", "q025", "median",
              "q975", "fraction_within"]
    calibrated_outputs = [runs[sample.run_keys[i]] for i in sample.calibrated_index]
    P = _proportion_matrix(calibrated_outputs)
    cal_rows = _quantile_rows([], P, bounds, tp)
    paths["calibrated_outputs"] = run.write_csv("report/calibrated_outputs.csv", header, cal_rows)

    settings = {"baseline": list(lam.as_tuple()), "exact": [1.0] * 4,
                "halved": [v / 2 for v in lam.as_tuple()]}
    for tag, entry in sorted(run.artifacts.get("reweights", {}).items()):
        settings.setdefault(f"reweight_{tag}", entry["summary"]["lambda"])
    sens_rows, sens_summary = [], {}
    for name, lam_values in settings.items():
        res, *_ = _reweight(run, lam_values)
        Pn = _proportion_matrix([runs[res.sample.run_keys[i]] for i in res.sample.calibrated_index])
        sens_rows += _quantile_rows([name, _lambda_tag(lam_values)], Pn, bounds, tp)
        sens_summary[name] = {"lambda": lam_values, "ess": res.ess, "n_unique": res.n_unique}
    paths["sensitivity"] = run.write_csv("report/sensitivity.csv", ["setting", "lambda", *header], sens_rows)

    points = sample.calibrated
    lo, hi = np.quantile(points, [0.025, 0.975], axis=0)
    x_true = np.asarray(run.config["truth"]["x_true"], dtype=float)
    within = {}
    for row in cal_rows:
        within[row[0]] = min(within.get(row[0], 1.0), row[-1])
    summary = {
        "run_id": run.manifest["run_id"],
        "inputs": names,
        "x_true": x_true,
        "interval_95": {"lower": lo, "upper": hi},
        "covers_truth": ((lo <= x_true) & (x_true <= hi)).tolist(),
        "posterior_mean": points.mean(axis=0),
        "ess": sample.ess,
        "S": sample.S,
        "n_unique": int(np.unique(sample.calibrated_index).size),
        "min_fraction_within_bounds": within,
        "sensitivity": sens_summary,
        "waves": [{"index": w["index"], "volume_fraction": w["volume_fraction"],
                   "max_loglik": w["max_loglik"]} for w in run.manifest["waves"] if w],
        "calibration": cal.get("summary"),
    }
    paths["summary"] = run.write_json("report/summary.json", summary)
    run.artifacts["report"] = paths
    run.record("report", **{k: v for k, v in paths.items()})
    return summary
