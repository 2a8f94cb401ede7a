"""Experiment grid: simulate, estimate, train and evaluate every (sim, method, repeat) cell."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import time
import traceback
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .clicksim import SimulatorConfig, dbn_params_from_relevance, simulate_log
from .core import (
    CCMParams,
    ClickLog,
    ClickModelParams,
    DCMParams,
    NoiseSpec,
    PBMParams,
    ValidationError,
    params_from_dict,
)
from .dataset import PreparedDataset, generate_synthetic, load_letor, prepare, split_queries, train_initial_ranker
from .evaluation import evaluate_ranker, select_method
from .metrics import paired_t_test
from .propensity import DLAConfig, estimate_pbm_dla, mle_dcm_lambda, pbm_oracle_theta
from .ltr import TrainConfig, train

logger = logging.getLogger(__name__)

METHODS = ("no-ips", "pbm-ips(oracle)", "pbm-ips(dla)", "cm-ips(oracle)", "cm-ips(mle)")
METHOD_ALIASES = {"pbm-ips": "pbm-ips(oracle)", "cm-ips": "cm-ips(oracle)", "no_ips": "no-ips"}
SKYLINE = ("skyline", "full-info")
DCM_GRID = [f"dcm_{b}_{e}" for b in ("0.6", "1.0") for e in ("0.5", "1.0", "2.0")]
PBM_GRID = [f"pbm_{e}" for e in ("0.5", "1.0", "2.0")]

# synthetic stand-in used by the default grid; see README for the recipe
DEFAULT_DATASET = {
    "source": "synthetic",
    "n_queries": 1000,
    "docs_per_query": 25,
    "feature_dim": 20,
    "relevant_fraction": 0.1,
    "label_noise": 0.3,
    "query_spread": 0.5,
    "query_shift": 2.0,
    "test_fraction": 0.3,
    "k": 20,
    "init_sample": 50,
    "seed": 1,
}


class SpecError(ValueError):
    """The experiment description is invalid."""


def parse_sim(label: str) -> dict:
    """Turn ``dcm_0.6_0.5``-style labels into a parameter description."""
    parts = label.split("_")
    try:
        values = [float(p) for p in parts[1:]]
    except ValueError:
        raise SpecError(f"cannot parse click set label {label!r}") from None
    kind = parts[0]
    if kind == "pbm" and len(values) == 1:
        return {"kind": "pbm", "eta": values[0]}
    if kind == "dcm" and len(values) == 2:
        return {"kind": "dcm", "beta": values[0], "eta": values[1]}
    if kind == "dbn" and len(values) == 1:
        return {"kind": "dbn", "gamma": values[0]}
    if kind == "ccm" and len(values) == 3:
        return {"kind": "ccm", "alpha1": values[0], "alpha2": values[1], "alpha3": values[2]}
    raise SpecError(f"cannot parse click set label {label!r}")


def resolve_sim(desc: dict, lists) -> ClickModelParams:
    """Concrete parameters for a sim description; DBN satisfaction follows relevance."""
    if desc["kind"] == "dbn" and "satisfaction" not in desc:
        return dbn_params_from_relevance(lists, desc["gamma"], desc.get("s_relevant", 0.6),
                                         desc.get("s_nonrelevant", 0.1))
    return params_from_dict(desc)


@dataclass
class ExperimentSpec:
    sims: list
    methods: list
    repeats: int = 15
    clicks: int = 200_000
    seed: int = 0
    dataset: dict = field(default_factory=lambda: dict(DEFAULT_DATASET))
    train: dict = field(default_factory=dict)
    noise: dict = field(default_factory=lambda: NoiseSpec().to_dict())
    skyline: bool = True
    selection: list = field(default_factory=list)
    selection_holdout: float = 0.2
    out: str | None = None

    def __post_init__(self):
        if not isinstance(self.repeats, int) or self.repeats < 1:
            raise SpecError(f"repeats must be an integer >= 1, got {self.repeats!r}")
        if self.clicks < 1:
            raise SpecError("clicks must be positive")
        if not self.sims:
            raise SpecError("at least one click set is required")
        self.methods = [METHOD_ALIASES.get(m, m) for m in self.methods]
        for m in self.methods:
            if m not in METHODS:
                raise SpecError(f"unknown method {m!r}; expected one of {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise SpecError("duplicate methods")
        labels = [self.sim_label(s) for s in self.sims]
        if len(set(labels)) != len(labels):
            raise SpecError("duplicate click set labels")
        for s in self.sims:
            desc = self.sim_desc(s)
            if desc.get("kind") != "dbn":
                try:
                    params_from_dict(desc)
                except (KeyError, TypeError, ValidationError) as exc:
                    raise SpecError(f"click set {self.sim_label(s)!r}: {exc}") from None
        try:
            TrainConfig(**self.train)
            NoiseSpec.from_dict(self.noise)
        except (TypeError, ValidationError) as exc:
            raise SpecError(str(exc)) from None
        from .metrics import NormalizerKind

        for n in self.selection:
            try:
                NormalizerKind.parse(n)
            except ValueError as exc:
                raise SpecError(str(exc)) from None
        if not 0.0 < self.selection_holdout < 1.0:
            raise SpecError("selection_holdout must lie in (0, 1)")
        if self.dataset.get("source", "synthetic") not in ("synthetic", "letor", "prepared"):
            raise SpecError(f"unknown dataset source {self.dataset.get('source')!r}")

    @staticmethod
    def sim_label(sim) -> str:
        return sim if isinstance(sim, str) else sim["label"]

    @staticmethod
    def sim_desc(sim) -> dict:
        if isinstance(sim, str):
            return parse_sim(sim)
        if "params" not in sim or "label" not in sim:
            raise SpecError("click set objects need 'label' and 'params'")
        return dict(sim["params"])

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown spec fields {sorted(extra)}")
        missing = {"sims", "methods"} - set(d)
        if missing:
            raise SpecError(f"missing spec fields {sorted(missing)}")
        d = dict(d)
        if "dataset" in d:
            d["dataset"] = {**DEFAULT_DATASET, **d["dataset"]} if d["dataset"].get("source", "synthetic") == "synthetic" else d["dataset"]
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SpecError(f"cannot read spec {path}: {exc}") from None
        if not isinstance(d, dict):
            raise SpecError("spec must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Seeds and shared inputs
# --------------------------------------------------------------------------


def _stable(label: str) -> int:
    return zlib.crc32(label.encode())


def click_seed(spec: ExperimentSpec, sim_label: str, repeat: int) -> int:
    """Seed of the click log for one (sim, repeat); shared by every method."""
    return int(np.random.SeedSequence([spec.seed, _stable(sim_label), repeat]).generate_state(1)[0])


def train_seed(spec: ExperimentSpec, repeat: int) -> int:
    return int(np.random.SeedSequence([spec.seed, repeat, 7]).generate_state(1)[0])


def build_dataset(cfg: dict) -> PreparedDataset:
    source = cfg.get("source", "synthetic")
    if source == "prepared":
        return PreparedDataset.load(cfg["path"])
    k, seed = cfg.get("k", 20), cfg.get("seed", 0)
    if source == "synthetic":
        raw = generate_synthetic(cfg["n_queries"], cfg["docs_per_query"], cfg["feature_dim"],
                                 cfg["relevant_fraction"], seed, cfg.get("label_noise", 1.0),
                                 cfg.get("query_spread", 0.0), cfg.get("query_shift", 0.0))
        train_raw, test_raw = split_queries(raw, cfg.get("test_fraction", 0.3), seed)
    else:
        train_raw = load_letor(cfg["path"], cfg.get("relevance_threshold", 3))
        if "test_path" in cfg:
            test_raw = load_letor(cfg["test_path"], cfg.get("relevance_threshold", 3), train_raw[0].dim)
        else:
            train_raw, test_raw = split_queries(train_raw, cfg.get("test_fraction", 0.3), seed)
    initial = train_initial_ranker(train_raw, min(cfg.get("init_sample", 50), len(train_raw)), seed)
    return prepare(train_raw, initial, k, test_raw)


_STATE: dict = {}


def _init_worker(spec_dict: dict, dataset: PreparedDataset) -> None:
    _STATE["spec"] = ExperimentSpec.from_dict(spec_dict)
    _STATE["data"] = dataset
    _click_log.cache_clear()


@lru_cache(maxsize=4)
def _click_log(sim_label: str, repeat: int) -> tuple:
    spec, data = _STATE["spec"], _STATE["data"]
    sim = next(s for s in spec.sims if spec.sim_label(s) == sim_label)
    params = resolve_sim(spec.sim_desc(sim), data.train)
    config = SimulatorConfig(params, NoiseSpec.from_dict(spec.noise), seed=click_seed(spec, sim_label, repeat),
                             target_clicks=spec.clicks, name=sim_label)
    return params, simulate_log(data.train, config)


def method_propensity(method: str, params: ClickModelParams, log: ClickLog, data: PreparedDataset,
                      noise: NoiseSpec, seed: int):
    """Propensity model used by ``method`` on a log generated by ``params``.

    Returns ``(propensity, info)``; ``propensity`` is None for the naive method.
    """
    k = data.k
    if method == "no-ips":
        return None, {}
    if method == "pbm-ips(oracle)":
        prop = pbm_oracle_theta(data.train, params, noise, k)
        return prop, {"theta": prop.theta.tolist()}
    if method == "pbm-ips(dla)":
        est = estimate_pbm_dla(log, data.train, k, DLAConfig(seed=seed))
        return est.params, est.to_dict()
    if method == "cm-ips(mle)" or (method == "cm-ips(oracle)" and isinstance(params, PBMParams)):
        # a PBM log has no cascade parameters to hand over, so CM falls back to its estimate
        est = mle_dcm_lambda(log, k)
        return est.params, est.to_dict()
    if method == "cm-ips(oracle)":
        info = params.to_dict()
        info.pop("satisfaction", None)  # per-document table, too large to echo per cell
        return params, {"params": info}
    raise SpecError(f"unknown method {method!r}")


def _train_config(spec: ExperimentSpec, mode: str, seed: int) -> TrainConfig:
    cfg = dict(spec.train)
    cfg.update(mode=mode, seed=seed)
    return TrainConfig(**cfg)


def run_cell(sim_label: str, method: str, repeat: int) -> dict:
    """One grid cell; errors are captured in the returned record."""
    spec, data = _STATE["spec"], _STATE["data"]
    record = {"sim": sim_label, "method": method, "repeat": repeat}
    start = time.perf_counter()
    try:
        seed = train_seed(spec, repeat)
        if (sim_label, method) == SKYLINE:
            result = train(data.train, None, None, _train_config(spec, "full_info", seed), data.test)
        else:
            params, log = _click_log(sim_label, repeat)
            prop, info = method_propensity(method, params, log, data, NoiseSpec.from_dict(spec.noise), seed)
            record["propensity"] = info
            record["n_sessions"] = len(log)
            record["n_clicks"] = log.n_clicks
            mode = "no_ips" if prop is None else "ips"
            result = train(data.train, log, prop, _train_config(spec, mode, seed), data.test)
        report = evaluate_ranker(result.ranker, data.test, method=method, repeat=repeat)
        record.update(status="ok", ndcg10=report.mean, curve=[list(c) for c in result.curve])
    except Exception as exc:  # one failing cell must not take down the grid
        record.update(status="error", error=f"{type(exc).__name__}: {exc}", trace=traceback.format_exc())
    # timing goes to the log only, so rerunning a cell reproduces its file bit for bit
    logger.info("cell %s/%s/r%d took %.1fs", sim_label, method, repeat, time.perf_counter() - start)
    return record


def run_selection(sim_label: str, repeat: int) -> dict:
    """Held-out click log-likelihood of the PBM and CM propensity models for one log."""
    spec, data = _STATE["spec"], _STATE["data"]
    record = {"sim": sim_label, "repeat": repeat}
    try:
        params, log = _click_log(sim_label, repeat)
        cut = int(round((1.0 - spec.selection_holdout) * len(log)))
        fit, held = log[:cut], log[cut:]
        noise = NoiseSpec.from_dict(spec.noise)
        seed = train_seed(spec, repeat)
        pbm, _ = method_propensity("pbm-ips(oracle)", params, fit, data, noise, seed)
        cm, _ = method_propensity("cm-ips(oracle)", params, fit, data, noise, seed)
        ranker = train(data.train, fit, pbm, _train_config(spec, "ips", seed)).ranker
        record["status"] = "ok"
        for normalizer in spec.selection:
            sel = select_method(held, data.train, ranker, [(pbm, "PBM"), (cm, "CM")], normalizer)
            record[str(normalizer)] = sel.to_dict()
    except Exception as exc:
        record.update(status="error", error=f"{type(exc).__name__}: {exc}", trace=traceback.format_exc())
    return record


def _run_task(task: tuple) -> dict:
    if task[0] == "cell":
        return run_cell(*task[1:])
    return run_selection(*task[1:])


def worker_count(n_tasks: int) -> int:
    cap = os.environ.get("CLTR_LAB_THREADS")
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError:
            raise SpecError(f"CLTR_LAB_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(limit, n_tasks))


# --------------------------------------------------------------------------
# Grid driver
# --------------------------------------------------------------------------


def cell_name(sim: str, method: str, repeat: int) -> str:
    safe = method.replace("(", "-").replace(")", "")
    return f"{sim}__{safe}__r{repeat}.json"


def plan(spec: ExperimentSpec) -> list[tuple]:
    labels = [spec.sim_label(s) for s in spec.sims]
    tasks = []
    for repeat in range(spec.repeats):
        if spec.skyline:
            tasks.append(("cell",) + SKYLINE + (repeat,))
        for sim, method in itertools.product(labels, spec.methods):
            tasks.append(("cell", sim, method, repeat))
        if spec.selection:
            tasks.extend(("selection", sim, repeat) for sim in labels)
    return tasks


@dataclass
class ExperimentResult:
    cells: list
    selections: list
    out: Path | None = None

    @property
    def failed(self) -> list:
        return [c for c in self.cells + self.selections if c["status"] != "ok"]

    def matrix(self) -> list[tuple]:
        return [(c["sim"], c["method"], c["repeat"], c["ndcg10"]) for c in self.cells if c["status"] == "ok"]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(spec: ExperimentSpec, out=None, only=None) -> ExperimentResult:
    """Run every cell of the grid, writing one file per cell plus merged outputs.

    ``only`` restricts the run to a collection of ``(sim, method, repeat)``
    keys; existing cell files for other keys are reused for the merge.
    """
    out = Path(out or spec.out) if (out or spec.out) else None
    data = build_dataset(spec.dataset)
    if not data.train or not data.test:
        raise SpecError("dataset has no usable train or test queries after preparation")
    tasks = plan(spec)
    if only is not None:
        keep = {tuple(k) for k in only}
        tasks = [t for t in tasks if t[0] == "cell" and tuple(t[1:]) in keep]
    spec_dict = spec.to_dict()
    workers = worker_count(len(tasks))
    logger.info("running %d tasks on %d workers", len(tasks), workers)
    if workers == 1:
        _init_worker(spec_dict, data)
        records = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(spec_dict, data)) as pool:
            records = list(pool.map(_run_task, tasks, chunksize=1))
    cells = [r for t, r in zip(tasks, records) if t[0] == "cell"]
    selections = [r for t, r in zip(tasks, records) if t[0] == "selection"]
    result = ExperimentResult(cells, selections, out)
    if out is not None:
        for c in cells:
            _write_json(out / "cells" / cell_name(c["sim"], c["method"], c["repeat"]), c)
        for s in selections:
            _write_json(out / "selection" / f"{s['sim']}__r{s['repeat']}.json", s)
        if only is not None:
            result = load_results(out)
        finalize(result, spec, out, data)
    return result


def load_results(directory) -> ExperimentResult:
    d = Path(directory)
    cells = [json.loads(p.read_text()) for p in sorted((d / "cells").glob("*.json"))]
    selections = [json.loads(p.read_text()) for p in sorted((d / "selection").glob("*.json"))]
    return ExperimentResult(cells, selections, d)


def finalize(result: ExperimentResult, spec: ExperimentSpec, out: Path, data: PreparedDataset | None = None) -> dict:
    """Write the merged CSV, summary and manifest for a results directory."""
    _write_json(out / "spec.json", spec.to_dict())
    if data is not None:
        _write_json(out / "dataset_provenance.json", data.provenance)
    csv_text, summary = emit_results(result.matrix(), result.selections)
    (out / "results.csv").write_text(csv_text)
    _write_json(out / "summary.json", summary)
    return write_manifest(out, result)


def write_manifest(out: Path, result: ExperimentResult) -> dict:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
        "failed": [
            {k: r.get(k) for k in ("sim", "method", "repeat", "error")} for r in result.failed
        ],
        "n_cells": len(result.cells),
        "n_selection": len(result.selections),
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def verify_manifest(out) -> list[str]:
    """Files whose hash no longer matches the manifest (or that vanished)."""
    out = Path(out)
    manifest = json.loads((out / "manifest.json").read_text())
    bad = []
    for name, digest in manifest["files"].items():
        p = out / name
        if not p.exists() or _sha256(p) != digest:
            bad.append(name)
    return bad


# --------------------------------------------------------------------------
# Emission
# --------------------------------------------------------------------------


def emit_results(matrix, selections=()) -> tuple[str, dict]:
    """Long CSV ``sim,method,repeat,ndcg10`` and a summary with means, std and paired p-values."""
    rows = sorted(matrix, key=lambda r: (r[0], r[1], r[2]))
    if not rows:
        raise ValueError("no successful cells to emit")
    lines = ["sim,method,repeat,ndcg10"] + [f"{s},{m},{r},{v:.6f}" for s, m, r, v in rows]
    by_sim: dict = {}
    for s, m, r, v in rows:
        by_sim.setdefault(s, {}).setdefault(m, {})[r] = float(f"{v:.6f}")
    summary = {"means": {}, "std": {}, "n": {}, "p_values": {}}
    for s, methods in by_sim.items():
        summary["means"][s] = {m: float(np.mean(list(v.values()))) for m, v in methods.items()}
        summary["std"][s] = {m: float(np.std(list(v.values()), ddof=1)) if len(v) > 1 else 0.0
                             for m, v in methods.items()}
        summary["n"][s] = {m: len(v) for m, v in methods.items()}
        pv: dict = {}
        for a, b in itertools.combinations(sorted(methods), 2):
            common = sorted(set(methods[a]) & set(methods[b]))
            if len(common) < 2:
                continue
            p = paired_t_test([methods[a][r] for r in common], [methods[b][r] for r in common])
            pv.setdefault(a, {})[b] = p
            pv.setdefault(b, {})[a] = p
        summary["p_values"][s] = pv
    if selections:
        chosen: dict = {}
        for sel in selections:
            if sel.get("status") != "ok":
                continue
            for key, val in sel.items():
                if isinstance(val, dict) and "chosen" in val:
                    chosen.setdefault(sel["sim"], {}).setdefault(key, []).append(val["chosen"])
        summary["selection"] = chosen
    return "\n".join(lines) + "\n", summary
