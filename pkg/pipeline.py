"""Stage orchestration: LTI fit, initial RCI set, qLPV fit, reduction, concurrent fit, control demo.

Every stage reads its predecessors from memory or from the model files in the
output directory, writes its own model file and appends one metrics row.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from invariance.control import closed_loop, reference_schedule
from invariance.geometry import (
    ConstraintPolyhedron,
    TemplatePolytope,
    box_polyhedron,
    boundary_polyline,
    make_box_template,
)
from invariance.rci import RciSolution, RciSpec, recompute_q, solve_initial_rci
from sysid import model as qlpv
from sysid import plant as plants
from sysid.model import DisturbanceSet, QlpvModel, Scaler
from sysid.reduce import lump_constant_branches, reduce_matrices, reduced_model, refit_output_map, select_indices
from sysid.train import (
    count_nonzero_groups,
    fit_concurrent,
    fit_lti,
    fit_qlpv,
    fit_qlpv_with_rci,
    initial_qlpv,
    lti_residuals,
    prediction_disturbance,
)
from utils import storage
from utils.config import STAGES, config_hash
from utils.errors import ConfigError, InfeasibleError, RciSysidError
from utils.reports import (
    REDUCTION_FIELDS,
    SWEEP_FIELDS,
    TrainingLog,
    append_metrics,
    write_closed_loop,
    write_polyline,
    write_rows,
    write_trajectories,
)

logger = logging.getLogger(__name__)


@dataclass
class StageResult:
    stage: str
    model: QlpvModel
    disturbance: Optional[DisturbanceSet] = None
    template: Optional[TemplatePolytope] = None
    solution: Optional[RciSolution] = None
    metrics: Dict = field(default_factory=dict)

    @property
    def r_value(self):
        return self.solution.r_value if self.solution is not None else float("nan")

    @property
    def r_status(self):
        return self.solution.status.value if self.solution is not None else "skipped"


@dataclass
class Run:
    """Shared state of one pipeline run; datasets are in scaled units."""

    config: object
    out_dir: str
    seed: int
    train: qlpv.Dataset
    test: qlpv.Dataset
    scaler: Scaler
    U: ConstraintPolyhedron
    Y: ConstraintPolyhedron
    results: Dict[str, StageResult] = field(default_factory=dict)

    @property
    def config_hash(self):
        return config_hash(self.config)

    @property
    def metrics_path(self):
        return os.path.join(self.out_dir, "metrics.csv")

    @property
    def train_log_path(self):
        return os.path.join(self.out_dir, "train_log.csv")

    def section_seed(self, section):
        """Seed of one training section; falls back to the run seed."""
        return self.seed if section.seed is None else section.seed

    def spec(self, template):
        cfg = self.config.rci
        return RciSpec(template, self.U, self.Y, cfg.horizon, cfg.kappa, cfg.size_function)


def load_datasets(config, seed, data_path=None, test_path=None, out_dir=None):
    """Physical-unit (train, test): explicit CSVs, then CSVs in out_dir, then the configured plant."""
    if data_path is not None:
        train = plants.load_csv(data_path)
        return train, plants.load_csv(test_path) if test_path is not None else train
    if out_dir is not None:
        train_csv, test_csv = os.path.join(out_dir, "train.csv"), os.path.join(out_dir, "test.csv")
        if os.path.exists(train_csv) and os.path.exists(test_csv):
            return plants.load_csv(train_csv), plants.load_csv(test_csv)
    return plants.generate(config.data, seed)


def constraint_sets(cfg, train, scaler):
    """U and Y in scaled units; missing bounds come from the training data.

    U spans the observed input range, Y is centered on the observed output
    range which fills `y_fraction` of it.
    """
    u_lo = np.asarray(cfg.u_lower if cfg.u_lower is not None else train.u.min(axis=0), dtype=float)
    u_hi = np.asarray(cfg.u_upper if cfg.u_upper is not None else train.u.max(axis=0), dtype=float)
    if cfg.y_lower is not None and cfg.y_upper is not None:
        y_lo, y_hi = np.asarray(cfg.y_lower, dtype=float), np.asarray(cfg.y_upper, dtype=float)
    else:
        mid = 0.5 * (train.y.max(axis=0) + train.y.min(axis=0))
        half = 0.5 * (train.y.max(axis=0) - train.y.min(axis=0)) / cfg.y_fraction
        y_lo, y_hi = mid - half, mid + half
    try:
        U = box_polyhedron(u_lo, u_hi).to_scaled(scaler.u_mean, scaler.u_std)
        Y = box_polyhedron(y_lo, y_hi).to_scaled(scaler.y_mean, scaler.y_std)
    except ValueError as e:
        raise ConfigError(f"invalid constraint box: {e}")
    if U.dim != train.n_u or Y.dim != train.n_y:
        raise ConfigError(f"constraint boxes have dims ({U.dim}, {Y.dim}), data has ({train.n_u}, {train.n_y})")
    return U, Y


def prepare_run(config, out_dir, seed=None, data_path=None, test_path=None):
    seed = config.seed if seed is None else seed
    os.makedirs(out_dir, exist_ok=True)
    train, test = load_datasets(config, seed, data_path, test_path, out_dir)
    scaler = Scaler.fit(train.u, train.y)
    U, Y = constraint_sets(config.rci, train, scaler)
    run = Run(config=config, out_dir=out_dir, seed=seed, train=train.scale(scaler), test=test.scale(scaler),
              scaler=scaler, U=U, Y=Y)
    write_manifest(run, data_path or config.data.kind)
    return run


def write_manifest(run, source):
    """Config, seed, data source and the derived constraint boxes of a run."""
    scaler = run.scaler
    manifest = {
        "version": storage.FORMAT_VERSION,
        "config_hash": run.config_hash,
        "seed": run.seed,
        "data": {"source": source, "n_train": run.train.n, "n_test": run.test.n},
        "constraints_physical": {
            "U": [list(scaler.unscale_u(v)) for v in (run.U.vertices.min(axis=0), run.U.vertices.max(axis=0))],
            "Y": [list(scaler.unscale_y(v)) for v in (run.Y.vertices.min(axis=0), run.Y.vertices.max(axis=0))],
        },
        "config": run.config.model_dump(mode="json"),
    }
    if run.config.data.kind == "msd_chain":
        manifest["multisine"] = {"tones": run.config.data.multisine_tones, "phases": "uniform random"}
    storage.save_data(manifest, os.path.join(run.out_dir, "manifest.json"))
    return manifest


def evaluate(m, train, test):
    """Prediction and observer BFR on both datasets, in physical units."""
    metrics = {}
    for name, data in (("train", train), ("test", test)):
        phys = data.physical()
        for mode, suffix in (("prediction", ""), ("observer", "_observer")):
            y_hat = qlpv.simulate(m, data, mode).y
            if data.scaler is not None:
                y_hat = data.scaler.unscale_y(y_hat)
            metrics[f"bfr_{name}{suffix}"] = qlpv.bfr(phys.y, y_hat)
    return metrics


def _record(run, result, **extra):
    metrics = evaluate(result.model, run.train, run.test)
    metrics.update(extra)
    result.metrics = metrics
    row = {
        "stage": result.stage,
        "config_hash": run.config_hash,
        "seed": run.seed,
        "n_x": result.model.n_x,
        "n_p": result.model.n_p,
        "r_value": result.r_value,
        "r_status": result.r_status,
        "nonzero_groups": count_nonzero_groups(result.model, run.config.qlpv.zero_group_threshold),
    }
    row.update(metrics)
    append_metrics(run.metrics_path, row)
    logger.info("%s: train BFR %.3f, test BFR %.3f, r = %.6g (%s)", result.stage, metrics["bfr_train"],
                metrics["bfr_test"], result.r_value, result.r_status)


def _save(run, result):
    payload = {
        "dims": {"n_x": result.model.n_x, "n_u": result.model.n_u, "n_y": result.model.n_y,
                 "n_p": result.model.n_p},
        "model": result.model.to_dict(),
        "scaler": run.scaler.to_dict(),
        "disturbance": None if result.disturbance is None else result.disturbance.to_dict(),
        "template": None if result.template is None else result.template.to_dict(),
        "rci": None if result.solution is None else result.solution.to_dict(),
        "constraints": {"U": run.U.to_dict(), "Y": run.Y.to_dict()},
        "metrics": result.metrics,
    }
    storage.save_artifact(storage.artifact_path(run.out_dir, result.stage), result.stage, payload,
                          run.config_hash, run.seed)
    if result.solution is not None and result.solution.states.size:
        write_trajectories(os.path.join(run.out_dir, f"trajectories_{result.stage}.csv"), result.solution)
    if result.solution is not None and result.solution.optimal:
        polyline = boundary_polyline(result.template, result.solution.q)
        write_polyline(os.path.join(run.out_dir, f"rci_set_{result.stage}.csv"), polyline)


def load_stage(path, stage=None):
    """StageResult from a model file."""
    artifact = storage.load_artifact(path, stage)
    return StageResult(
        stage=artifact["stage"],
        model=QlpvModel.from_dict(artifact["model"]),
        disturbance=None if artifact.get("disturbance") is None else DisturbanceSet.from_dict(artifact["disturbance"]),
        template=None if artifact.get("template") is None else TemplatePolytope.from_dict(artifact["template"]),
        solution=None if artifact.get("rci") is None else RciSolution.from_dict(artifact["rci"]),
        metrics=artifact.get("metrics", {}),
    )


def _require(run, *stages):
    """Most recent result among `stages`: this run's results first, then model files of enabled stages."""
    for stage in stages:
        if stage in run.results:
            return run.results[stage]
    enabled = [s for s in stages if run.config.stage_enabled(s)]
    for stage in enabled or stages:
        path = storage.artifact_path(run.out_dir, stage)
        if os.path.exists(path):
            run.results[stage] = load_stage(path, stage)
            return run.results[stage]
    raise ConfigError(f"no {' or '.join(stages)} result found in {run.out_dir}; run that stage first")


def _optional(run, stage):
    """Result of `stage` if this run produced it or the stage is enabled and on disk."""
    if stage not in run.results and not run.config.stage_enabled(stage):
        return None
    try:
        return _require(run, stage)
    except ConfigError:
        return None


def _latest_model(run, before):
    order = [s for s in ("fit_concurrent", "reduce", "fit_qlpv") if STAGES.index(s) < STAGES.index(before)]
    return _require(run, *order)


def stage_fit_lti(run):
    cfg = run.config
    with TrainingLog(run.train_log_path, "fit_lti") as log:
        fit = fit_lti(run.train, cfg.model.nx_hat, cfg.lti, seed=run.section_seed(cfg.lti), log=log)
    if fit.n_x == 0:
        raise ConfigError("group Lasso removed every state; lower lti.kappa_x")
    w = qlpv.estimate_disturbance(lti_residuals(fit, run.train), cfg.rci.kappa)
    result = StageResult("fit_lti", fit.model(), disturbance=w)
    _record(run, result)
    _save(run, result)
    return result


def stage_init_rci(run):
    lti = _require(run, "fit_lti")
    m = lti.model
    A, B, C = m.A[0], m.B[0], m.C
    radius = float(np.max(np.abs(qlpv.simulate(m, run.train).x))) or 1.0
    base = run.spec(make_box_template(m.n_x))
    init = solve_initial_rci((A, B, C), lti.disturbance, base, run.config.rci, state_radius=radius)
    result = StageResult("init_rci", m, disturbance=lti.disturbance, template=init.template, solution=init.solution)
    _record(run, result)
    _save(run, result)
    return result


def stage_fit_qlpv(run):
    cfg = run.config
    lti = _require(run, "fit_lti")
    start = initial_qlpv((lti.model.A[0], lti.model.B[0], lti.model.C), cfg.model.np_hat, cfg.model,
                         run.section_seed(cfg.qlpv))
    with TrainingLog(run.train_log_path, "fit_qlpv") as log:
        init = _optional(run, "init_rci")
        if init is not None:
            spec = run.spec(init.template)
            m, _, report = fit_qlpv_with_rci(run.train, start, init.solution.vertex_inputs, lti.disturbance, spec,
                                             cfg.qlpv, log)
        else:
            logger.warning("No initial RCI set; fitting the qLPV model without invariance constraints")
            m, report = fit_qlpv(run.train, start, cfg.qlpv, log)
    m = lump_constant_branches(m, cfg.qlpv.zero_group_threshold)
    w = prediction_disturbance(m, run.train, cfg.rci.kappa)
    solution = template = None
    if init is not None:
        template = init.template
        solution = _recompute(run, m, w, template)
        if not solution.optimal:
            raise InfeasibleError("no RCI set exists for the qLPV model; raise qlpv.penalty_weight",
                                  status=solution.status.value)
    result = StageResult("fit_qlpv", m, disturbance=w, template=template, solution=solution)
    _record(run, result, kappa_p=cfg.qlpv.kappa_p)
    _save(run, result)
    return result


def _recompute(run, m, w, template):
    cfg = run.config.rci
    return recompute_q(m, w, run.spec(template), cfg.regularization, cfg.qp_tol, cfg.qp_max_iter)


def stage_reduce(run):
    cfg = run.config
    prev = _require(run, "fit_qlpv")
    target = cfg.reduce.target_np or prev.model.n_p
    plan = select_indices(prev.model, run.train, target, cfg.reduce.max_combinations, cfg.reduce.workers)
    invariant = prev.solution is not None and prev.solution.optimal
    q = prev.solution.q if invariant else None
    vertex_inputs = prev.solution.vertex_inputs if invariant else None
    reduced = reduce_matrices(plan, prev.model, q, vertex_inputs, prev.template, enforce_invariance=invariant,
                              regularization=cfg.rci.regularization)
    m = reduced_model(plan, prev.model, reduced)
    refit = refit_output_map(m, run.train, cfg.rci.kappa, tol=cfg.rci.qp_tol)
    m = m.replace(C=refit.C)
    solution = None
    if prev.template is not None:
        solution = _recompute(run, m, refit.disturbance, prev.template)
        if not solution.optimal:
            logger.warning("Reduced model (n_p = %d) admits no RCI set of the current template", m.n_p)
    result = StageResult("reduce", m, disturbance=refit.disturbance, template=prev.template, solution=solution)
    _record(run, result)
    _save(run, result)
    write_rows(os.path.join(run.out_dir, "reduction.csv"), REDUCTION_FIELDS, [{
        "n_p": m.n_p, "indices": list(plan.indices), "bfr_train": result.metrics["bfr_train"],
        "bfr_test": result.metrics["bfr_test"], "r_status": result.r_status, "r_value": result.r_value,
    }], append=True)
    return result


def _concurrent(run, prev, train_cfg, log=None):
    cfg = run.config.rci
    if prev.template is None or prev.solution is None:
        raise ConfigError("the concurrent fit needs an RCI template; enable init_rci")
    spec = run.spec(prev.template)
    m, w, report = fit_concurrent(run.train, prev.model, spec, train_cfg, log, cfg.regularization, cfg.qp_tol,
                                  cfg.qp_max_iter)
    solution = _recompute(run, m, w, prev.template)
    return StageResult("fit_concurrent", m, disturbance=w, template=prev.template, solution=solution)


def stage_fit_concurrent(run):
    prev = _latest_model(run, "fit_concurrent")
    with TrainingLog(run.train_log_path, "fit_concurrent") as log:
        result = _concurrent(run, prev, run.config.concurrent, log)
    _record(run, result, tau=run.config.concurrent.tau)
    _save(run, result)
    return result


def stage_control_sim(run):
    cfg = run.config
    prev = _require(run, "fit_concurrent", "reduce", "fit_qlpv")
    if prev.solution is None or not prev.solution.optimal:
        raise InfeasibleError(f"the {prev.stage} model has no RCI set to filter against")
    try:
        plant = plants.make_plant(cfg.data, run.seed)
    except ValueError as e:
        raise ConfigError(f"closed-loop simulation needs a simulated plant: {e}")
    y_ref = reference_schedule(cfg.control.reference_levels, cfg.control.step_length, cfg.control.steps,
                               prev.model.n_y)
    log = closed_loop(plant, prev.model, prev.solution.q, run.spec(prev.template), run.scaler, y_ref, cfg.control)
    write_closed_loop(os.path.join(run.out_dir, "closed_loop.csv"), log)
    interval = run.scaler.unscale_y(boundary_polyline(prev.template, prev.solution.q, prev.model.C))
    write_polyline(os.path.join(run.out_dir, "output_set.csv"), interval)
    if log.fallbacks:
        logger.warning("LQR fell back to zero input in %d of %d steps", log.fallbacks, log.steps)
    return log


STAGE_FUNCTIONS = {
    "fit_lti": stage_fit_lti,
    "init_rci": stage_init_rci,
    "fit_qlpv": stage_fit_qlpv,
    "reduce": stage_reduce,
    "fit_concurrent": stage_fit_concurrent,
    "control_sim": stage_control_sim,
}


def run_stage(run, stage):
    """One stage, with failures tagged by stage name."""
    logger.info("Stage %s", stage)
    try:
        outcome = STAGE_FUNCTIONS[stage](run)
    except RciSysidError as e:
        raise e.with_stage(stage)
    if isinstance(outcome, StageResult):
        run.results[stage] = outcome
    return outcome


def run_pipeline(config, out_dir, seed=None, data_path=None, test_path=None):
    """All enabled stages in order; disabled stages are skipped."""
    run = prepare_run(config, out_dir, seed, data_path, test_path)
    for stage in STAGES:
        if not config.stage_enabled(stage):
            logger.info("Stage %s disabled", stage)
            continue
        run_stage(run, stage)
    return run


def _parallel_map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def sweep_tau(run):
    """Concurrent fits over the tau grid, all started from the same qLPV model."""
    cfg = run.config
    prev = _latest_model(run, "fit_concurrent")

    def one(tau):
        result = _concurrent(run, prev, cfg.concurrent.model_copy(update={"tau": tau}))
        metrics = evaluate(result.model, run.train, run.test)
        return {"tau": tau, "nonzero_groups": count_nonzero_groups(result.model, cfg.concurrent.zero_group_threshold),
                "bfr_train": metrics["bfr_train"], "bfr_test": metrics["bfr_test"],
                "r_value": result.r_value, "r_status": result.r_status}

    rows = _parallel_map(one, list(cfg.tau_grid), cfg.workers)
    write_rows(os.path.join(run.out_dir, "sweep_tau.csv"), SWEEP_FIELDS, rows)
    return rows


def sweep_kp(run):
    """Plain qLPV fits over the kappa_p grid from the same LTI initialization."""
    cfg = run.config
    lti = _require(run, "fit_lti")
    start = initial_qlpv((lti.model.A[0], lti.model.B[0], lti.model.C), cfg.model.np_hat, cfg.model,
                         run.section_seed(cfg.qlpv))

    def one(kappa_p):
        m, _ = fit_qlpv(run.train, start, cfg.qlpv.model_copy(update={"kappa_p": kappa_p}))
        metrics = evaluate(m, run.train, run.test)
        return {"kappa_p": kappa_p, "nonzero_groups": count_nonzero_groups(m, cfg.qlpv.zero_group_threshold),
                "bfr_train": metrics["bfr_train"], "bfr_test": metrics["bfr_test"], "r_status": "skipped"}

    rows = _parallel_map(one, list(cfg.kp_grid), cfg.workers)
    write_rows(os.path.join(run.out_dir, "sweep_kp.csv"), SWEEP_FIELDS, rows)
    return rows
