"""Configured experiment runs.

A run is described by one JSON document (schema-validated, unknown keys
rejected), executes deterministically given its seeds, and leaves three kinds
of artifacts in the output directory: ``metrics.jsonl`` (one record per
checkpoint, no wall-clock fields, so identical configs produce identical
bytes), a model file, and ``summary.json``.

Training metrics report distance to the minimizer of the *sum of node
objectives*: with K nodes each applying the full penalty lam per contact,
that is the pooled loss plus K*lam times the penalty, so the oracle solves
the pooled problem with coefficient K*lam.
"""

from __future__ import annotations

import json
import os

import jsonschema
import numpy as np

from . import clustering, coordinator, data, gp, learners, transport
from .errors import ConfigError, ParseError

TASKS = (
    "gen", "split", "paramserver", "aggregate-ls", "gp-committee",
    "kmeans", "kwindows", "distributed-kwindows",
)

_SEED = {"type": "integer", "minimum": 0}

_DATASET = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["regression", "clusters", "csv"]},
        "n_points": {"type": "integer", "minimum": 1},
        "dim": {"type": "integer", "minimum": 1},
        "weights": {"type": "array", "items": {"type": "number"}},
        "intercept": {"type": "number"},
        "noise_sigma": {"type": "number", "minimum": 0},
        "n_per_cluster": {"type": "integer", "minimum": 1},
        "centers": {"type": "array",
                    "items": {"type": "array", "items": {"type": "number"}}},
        "spread": {"type": "number", "exclusiveMinimum": 0},
        "shape": {"enum": ["gaussian", "uniform-box"]},
        "path": {"type": "string"},
        "seed": _SEED,
    },
}

_SPLIT = {
    "type": "object",
    "required": ["mode", "k"],
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": list(data.SPLIT_MODES)},
        "k": {"type": "integer", "minimum": 1},
        "seed": _SEED,
    },
}

_OBJECTIVE = {
    "type": "object",
    "required": ["loss"],
    "additionalProperties": False,
    "properties": {
        "loss": {"enum": list(learners.LOSS_KINDS)},
        "regularizer": {"enum": list(learners.REGULARIZERS)},
        "lambda": {"type": "number", "minimum": 0},
    },
}

_POLICY = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "step_size": {"oneOf": [{"const": "auto"},
                                {"type": "number", "exclusiveMinimum": 0}]},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"oneOf": [{"const": "full"},
                                 {"type": "integer", "minimum": 1}]},
        "mode": {"enum": list(learners.UPDATE_MODES)},
        "seed": _SEED,
    },
}

_SCHEDULE = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": list(coordinator.SCHEDULE_KINDS)},
        "probs": {"type": "array", "items": {"type": "number"}},
        "seed": _SEED,
    },
}

_MODE = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": list(coordinator.MODE_KINDS)},
        "delays": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(coordinator.DELAY_KINDS)},
                "value": {"type": "number", "minimum": 0},
                "low": {"type": "number", "minimum": 0},
                "high": {"type": "number", "minimum": 0},
                "seed": _SEED,
            },
        },
    },
}

_TRANSPORT = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["inprocess", "tcp"]},
        "host": {"type": "string"},
        "port": {"type": "integer", "minimum": 0, "maximum": 65535},
    },
}

_KERNEL = {
    "type": "object",
    "required": ["lengthscale", "signal_variance"],
    "additionalProperties": False,
    "properties": {
        "lengthscale": {"type": "number", "exclusiveMinimum": 0},
        "signal_variance": {"type": "number", "exclusiveMinimum": 0},
        "noise_variance": {"type": "number", "minimum": 0},
        "mean": {"type": "number"},
    },
}

_RULE = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": list(gp.COMBINATION_KINDS)},
        "betas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "prior_var": {"type": "number", "exclusiveMinimum": 0},
    },
}

_KWINDOWS = {
    "type": "object",
    "required": ["k_init", "radius"],
    "additionalProperties": False,
    "properties": {
        "k_init": {"type": "integer", "minimum": 1},
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "enlarge_step": {"type": "number", "exclusiveMinimum": 0},
        "enlarge_threshold": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "center_tol": {"type": "number", "exclusiveMinimum": 0},
        "merge_overlap_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "max_iters": {"type": "integer", "minimum": 1},
    },
}

_TEST_GRID = {
    "type": "object",
    "additionalProperties": False,
    "properties": {"count": {"type": "integer", "minimum": 1}, "seed": _SEED},
}


def _task_schema(required, properties):
    props = {"task": {"enum": list(TASKS)}, "seed": _SEED}
    props.update(properties)
    return {
        "type": "object",
        "required": ["task"] + required,
        "additionalProperties": False,
        "properties": props,
    }


_SCHEMAS = {
    "gen": _task_schema(["dataset"], {"dataset": _DATASET}),
    "split": _task_schema(["dataset", "split"],
                          {"dataset": _DATASET, "split": _SPLIT}),
    "paramserver": _task_schema(
        ["dataset", "split", "objective", "total_contacts"],
        {"dataset": _DATASET, "split": _SPLIT, "objective": _OBJECTIVE,
         "policy": _POLICY, "schedule": _SCHEDULE, "mode": _MODE,
         "transport": _TRANSPORT,
         "total_contacts": {"type": "integer", "minimum": 1}},
    ),
    "aggregate-ls": _task_schema(["dataset", "split"],
                                 {"dataset": _DATASET, "split": _SPLIT}),
    "gp-committee": _task_schema(
        ["dataset", "split", "kernel_grid"],
        {"dataset": _DATASET, "split": _SPLIT,
         "kernel_grid": {"type": "array", "minItems": 1, "items": _KERNEL},
         "rule": _RULE, "test_grid": _TEST_GRID},
    ),
    "kmeans": _task_schema(
        ["dataset", "n_clusters"],
        {"dataset": _DATASET,
         "n_clusters": {"type": "integer", "minimum": 1},
         "norm": {"enum": list(clustering.KMEANS_NORMS)},
         "max_iters": {"type": "integer", "minimum": 1}},
    ),
    "kwindows": _task_schema(["dataset", "kwindows"],
                             {"dataset": _DATASET, "kwindows": _KWINDOWS}),
    "distributed-kwindows": _task_schema(
        ["dataset", "split", "kwindows"],
        {"dataset": _DATASET, "split": _SPLIT, "kwindows": _KWINDOWS},
    ),
}


def validate_config(cfg) -> dict:
    """Schema-check a config; raises ConfigError naming the offending key."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object", path="<root>")
    task = cfg.get("task")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {', '.join(TASKS)}", path="task")
    validator = jsonschema.Draft202012Validator(_SCHEMAS[task])
    errors = sorted(validator.iter_errors(cfg),
                    key=lambda e: (-len(e.absolute_path), str(e.absolute_path)))
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(err.message, path=path)
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", path="<root>") from None
    return validate_config(cfg)


def _seed_of(cfg, section) -> int:
    return section.get("seed", cfg.get("seed", 0))


def _build_dataset(cfg) -> data.Dataset:
    d = cfg["dataset"]
    kind = d["kind"]
    if kind == "regression":
        for key in ("n_points", "dim", "weights"):
            if key not in d:
                raise ConfigError(f"regression dataset requires {key}",
                                  path=f"dataset.{key}")
        if len(d["weights"]) != d["dim"]:
            raise ConfigError("weights length must equal dim", path="dataset.weights")
        return data.generate_regression(
            d["n_points"], d["dim"], d["weights"], d.get("intercept", 0.0),
            d.get("noise_sigma", 0.0), _seed_of(cfg, d))
    if kind == "clusters":
        for key in ("n_per_cluster", "centers", "spread"):
            if key not in d:
                raise ConfigError(f"clusters dataset requires {key}",
                                  path=f"dataset.{key}")
        return data.generate_clusters(
            d["n_per_cluster"], d["centers"], d["spread"],
            d.get("shape", "gaussian"), _seed_of(cfg, d))
    if "path" not in d:
        raise ConfigError("csv dataset requires path", path="dataset.path")
    return data.load_csv(d["path"])


def _build_partition(cfg, dataset) -> data.Partition:
    s = cfg["split"]
    spec = data.SplitSpec(s["mode"], s["k"], _seed_of(cfg, s))
    return data.partition(dataset, spec)


def _build_objective(cfg) -> learners.Objective:
    o = cfg["objective"]
    return learners.Objective(o["loss"], o.get("regularizer", "none"),
                              o.get("lambda", 0.0))


def _build_policy(cfg, objective, dataset) -> learners.UpdatePolicy:
    p = cfg.get("policy", {})
    step = p.get("step_size", "auto")
    if step == "auto":
        step = learners.default_step_size(objective, dataset)
    batch = p.get("batch_size", "full")
    return learners.UpdatePolicy(
        step_size=step, epochs=p.get("epochs", 1),
        batch_size=None if batch == "full" else batch,
        mode=p.get("mode", "deterministic-full-gradient"),
        seed=_seed_of(cfg, p))


def _build_schedule(cfg, k) -> coordinator.Schedule:
    s = cfg.get("schedule", {"kind": "round-robin"})
    probs = s.get("probs")
    if s["kind"] == "async-random" and probs is not None and len(probs) != k:
        raise ConfigError(f"probs must have length {k}", path="schedule.probs")
    return coordinator.Schedule(s["kind"], k, probs, _seed_of(cfg, s))


def _build_mode(cfg) -> coordinator.ExecutionMode:
    m = cfg.get("mode", {"kind": "serialized"})
    d = m.get("delays")
    if d is None:
        delays = coordinator.DelayModel()
    elif d["kind"] == "constant":
        delays = coordinator.DelayModel("constant", value=d.get("value", 1.0))
    else:
        delays = coordinator.DelayModel("uniform", low=d.get("low", 0.0),
                                        high=d.get("high", 1.0),
                                        seed=_seed_of(cfg, d))
    return coordinator.ExecutionMode(m["kind"], delays)


def _json_line(record) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _theta_list(theta) -> list:
    return [float(v) for v in theta.vector]


def _effective_objective(objective, k) -> learners.Objective:
    # Sum of node objectives = pooled loss + k*lam * penalty.
    if objective.regularizer == "none":
        return objective
    return learners.Objective(objective.loss_kind, objective.regularizer,
                              objective.lam * k)


def _training_oracle(objective, pooled, k) -> learners.Theta:
    return learners.centralized_oracle(_effective_objective(objective, k), pooled)


def _run_paramserver(cfg, out_dir):
    dataset = _build_dataset(cfg)
    part = _build_partition(cfg, dataset)
    objective = _build_objective(cfg)
    policy = _build_policy(cfg, objective, dataset)
    schedule = _build_schedule(cfg, part.k)
    mode = _build_mode(cfg)
    total = cfg["total_contacts"]
    theta_init = learners.Theta.zeros(dataset.dim)

    tcp = cfg.get("transport", {"kind": "inprocess"})["kind"] == "tcp"
    if tcp:
        host = cfg["transport"].get("host", "127.0.0.1")
        inner = coordinator.ParameterServer(theta_init)
        with transport.SwapServer(inner, host) as srv:
            with transport.SwapClient(srv.address) as client:
                trace = coordinator.run_schedule(
                    part, objective, policy, schedule, mode, total,
                    theta_init=theta_init, server=client)
    else:
        trace = coordinator.run_schedule(part, objective, policy, schedule,
                                         mode, total, theta_init=theta_init)

    oracle = _training_oracle(objective, dataset, part.k)
    eff = _effective_objective(objective, part.k)
    stride = max(1, total // 100)
    cumulative = 0
    lines = []
    for record in trace.records:
        cumulative += record.bytes_sent
        if record.t % stride and record is not trace.records[-1]:
            continue
        lines.append(_json_line({
            "t": record.t,
            "node_id": record.node_id,
            "objective": learners.loss(eff, record.theta_pushed, dataset),
            "dist_to_oracle": float(np.linalg.norm(
                record.theta_pushed.vector - oracle.vector)),
            "simulated_time": record.simulated_time,
            "bytes_on_wire": cumulative,
            "theta": _theta_list(record.theta_pushed),
        }))
    with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    final = trace.final_theta
    contacts_per_node = {str(n): 0 for n in range(part.k)}
    for record in trace.records:
        contacts_per_node[str(record.node_id)] += 1
    _write_json(os.path.join(out_dir, "model.json"),
                {"theta": _theta_list(final)})
    summary = {
        "task": "paramserver",
        "final_objective": learners.loss(eff, final, dataset),
        "oracle_gap": float(np.linalg.norm(final.vector - oracle.vector)),
        "total_bytes": trace.total_bytes,
        "pushes_per_node": contacts_per_node,
        "t_final": trace.records[-1].t if trace.records else 0,
    }
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def _run_aggregate(cfg, out_dir):
    dataset = _build_dataset(cfg)
    part = _build_partition(cfg, dataset)
    channel = []
    theta = coordinator.aggregate_second_order(part, channel=channel)
    oracle = learners.solve_penalized_normal_equations(dataset, 0.0)
    gap = float(np.max(np.abs(theta.vector - oracle.vector)))
    objective = learners.Objective("squared")
    with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(_json_line({
            "t": 1, "node_id": -1,
            "objective": learners.loss(objective, theta, dataset),
            "dist_to_oracle": gap, "simulated_time": 1.0,
            "bytes_on_wire": sum(m.gram.size + m.moment.size + 1
                                 for m in channel) * 8,
            "theta": _theta_list(theta),
        }))
    _write_json(os.path.join(out_dir, "model.json"), {"theta": _theta_list(theta)})
    summary = {
        "task": "aggregate-ls",
        "final_objective": learners.loss(objective, theta, dataset),
        "oracle_gap": gap,
        "reals_per_node": (dataset.dim + 1) ** 2 + dataset.dim + 1,
        "nodes": part.k,
    }
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def _run_gp(cfg, out_dir):
    dataset = _build_dataset(cfg)
    if not dataset.has_labels:
        raise ConfigError("gp-committee requires a labeled dataset", path="dataset")
    part = _build_partition(cfg, dataset)
    grid = [gp.Kernel(k["lengthscale"], k["signal_variance"],
                      k.get("noise_variance", 0.0), k.get("mean", 0.0))
            for k in cfg["kernel_grid"]]
    models, kernel = gp.fit_experts(part, grid)
    r = cfg.get("rule", {"kind": "gpoe"})
    rule = gp.CombinationRule(r["kind"], r.get("betas"), r.get("prior_var"))

    tg = cfg.get("test_grid", {})
    count = tg.get("count", 50)
    rng = np.random.default_rng(tg.get("seed", cfg.get("seed", 0)))
    lo, hi = dataset.points.min(axis=0), dataset.points.max(axis=0)
    test_points = rng.uniform(lo, hi, size=(count, dataset.dim))

    rows = []
    for x in test_points:
        p = gp.committee_predict(models, rule, x)
        rows.append((x, p))
    with open(os.path.join(out_dir, "predictions.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(",".join([f"f{j}" for j in range(dataset.dim)] + ["mu", "var"]) + "\n")
        for x, p in rows:
            fh.write(",".join([repr(float(v)) for v in x]
                              + [repr(p.mu), repr(p.var)]) + "\n")

    pooled = gp.gp_fit(dataset.points, dataset.labels, kernel)
    pooled_mu, _ = gp.gp_predict_batch(pooled, test_points)
    committee_mu = np.array([p.mu for _, p in rows])
    summary = {
        "task": "gp-committee",
        "kernel": {"lengthscale": kernel.lengthscale,
                   "signal_variance": kernel.signal_variance,
                   "noise_variance": kernel.noise_variance,
                   "mean": kernel.mean},
        "sum_local_lml": sum(gp.log_marginal_likelihood(m) for m in models),
        "pooled_lml": gp.log_marginal_likelihood(pooled),
        "rmse_vs_pooled_gp": float(np.sqrt(np.mean((committee_mu - pooled_mu) ** 2))),
        "rule": rule.kind,
    }
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def _window_payload(model):
    return [{"center": [float(v) for v in w.center],
             "weights": [float(v) for v in w.weights],
             "r": w.base_radius,
             "cardinality": w.cardinality} for w in model.windows]


def _run_cluster(cfg, out_dir):
    dataset = _build_dataset(cfg)
    task = cfg["task"]
    if task == "kmeans":
        model = clustering.kmeans(dataset, cfg["n_clusters"],
                                  cfg.get("norm", "l2"), seed=cfg.get("seed", 0),
                                  max_iters=cfg.get("max_iters", 100))
        payload = {"windows": None,
                   "centers": [[float(v) for v in c] for c in model.centers]}
    else:
        kw = cfg["kwindows"]
        config = clustering.KWindowsConfig(
            kw["k_init"], kw["radius"], kw.get("enlarge_step", 0.1),
            kw.get("enlarge_threshold", 0.8), kw.get("center_tol", 1e-3),
            kw.get("merge_overlap_ratio", 0.2), kw.get("max_iters", 50))
        if task == "kwindows":
            model = clustering.kwindows(dataset, config, seed=cfg.get("seed", 0))
        else:
            part = _build_partition(cfg, dataset)
            model = clustering.distributed_kwindows(part, config,
                                                    seed=cfg.get("seed", 0))
        payload = {"windows": _window_payload(model)}
    payload["assignment"] = [int(a) for a in model.assignment]
    payload["objective"] = model.objective
    _write_json(os.path.join(out_dir, "clusters.json"), payload)
    summary = {"task": task, "objective": model.objective,
               "n_clusters": (len(model.windows) if model.windows is not None
                              else len(model.centers)),
               "n_unassigned": int(np.sum(model.assignment == clustering.UNASSIGNED))}
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def _run_gen(cfg, out_dir):
    dataset = _build_dataset(cfg)
    path = os.path.join(out_dir, "dataset.csv")
    data.save_csv(dataset, path)
    summary = {"task": "gen", "rows": dataset.n_points, "dim": dataset.dim,
               "labeled": dataset.has_labels, "path": path}
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def _run_split(cfg, out_dir):
    dataset = _build_dataset(cfg)
    part = _build_partition(cfg, dataset)
    paths = []
    for i, shard in enumerate(part.shards):
        path = os.path.join(out_dir, f"shard_{i:02d}.csv")
        data.save_csv(shard, path)
        paths.append(path)
    _write_json(os.path.join(out_dir, "provenance.json"),
                {"sources": [[int(j) for j in p] for p in part.provenance]})
    summary = {"task": "split", "k": part.k,
               "shard_sizes": [s.n_points for s in part.shards], "paths": paths}
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


_RUNNERS = {
    "gen": _run_gen,
    "split": _run_split,
    "paramserver": _run_paramserver,
    "aggregate-ls": _run_aggregate,
    "gp-committee": _run_gp,
    "kmeans": _run_cluster,
    "kwindows": _run_cluster,
    "distributed-kwindows": _run_cluster,
}


def run_experiment(cfg: dict, out_dir: str) -> dict:
    """Validate, run, and write artifacts; returns the summary dict."""
    validate_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    return _RUNNERS[cfg["task"]](cfg, out_dir)


def load_metrics(path) -> list[dict]:
    """Parse a metrics JSON-lines file; line numbers on any failure."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad metrics record: {exc.msg}", line=lineno) from None
            if not isinstance(rec, dict) or "t" not in rec:
                raise ParseError("metrics record missing 't'", line=lineno)
            records.append(rec)
    if not records:
        raise ParseError("no records")
    return records


def report(metrics_path, out_dir=None) -> str:
    """Print a convergence table and write report.csv next to the metrics.

    Returns the CSV path. One CSV row per record: t, objective,
    dist_to_oracle.
    """
    records = load_metrics(metrics_path)
    header = f"{'t':>10}  {'objective':>16}  {'dist_to_oracle':>16}"
    print(header)
    print("-" * len(header))
    for rec in records:
        print(f"{rec['t']:>10}  {rec.get('objective', float('nan')):>16.8g}  "
              f"{rec.get('dist_to_oracle', float('nan')):>16.8g}")
    target_dir = out_dir if out_dir is not None else os.path.dirname(metrics_path)
    os.makedirs(target_dir or ".", exist_ok=True)
    csv_path = os.path.join(target_dir or ".", "report.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,objective,dist_to_oracle\n")
        for rec in records:
            fh.write(f"{rec['t']},{rec.get('objective')},{rec.get('dist_to_oracle')}\n")
    return csv_path
