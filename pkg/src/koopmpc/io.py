"""CSV and JSON serialization for trajectories, samples, models, and chains.

CSV schemas are fixed: every writer emits the same header in the same column
order on every run. Times are in the plant's time unit, states and inputs in
plant units. JSON files are written with sorted keys so identical objects
produce identical bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .dynamics import SampleSet, Trajectory
from .errors import InvalidInputError
from .observables import (
    DelaySpec,
    Dictionary,
    Monomial,
    MonomialGradient,
    monomial_label,
    recovery_matrix,
)
from .sysid import DelayCoordinates, LinearControlModel, ParametrizedFamily
from .transfer import BoxPartition, ControlledChain, TransitionMatrix


def jsonify(obj):
    """Recursively convert numpy containers into plain JSON-ready values."""
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [jsonify(v) for v in obj.tolist()] if obj.ndim > 0 else obj.item()
    if isinstance(obj, dict):
        return {str(k): jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonify(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(jsonify(obj), fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _state_header(n, q):
    return ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(q)]


def trajectory_to_csv(traj, path):
    """One row per snapshot: t, states, inputs.

    The input is a zero-order hold over each step; the final row repeats the
    last held input so the schema stays rectangular.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, q = traj.state_dim, traj.input_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_state_header(n, q))
        for k in range(traj.times.size):
            uk = traj.inputs[:, min(k, traj.n_steps - 1)] if traj.n_steps else np.zeros(q)
            writer.writerow(
                [repr(float(traj.times[k]))]
                + [repr(float(v)) for v in traj.states[:, k]]
                + [repr(float(v)) for v in uk]
            )


def trajectory_from_csv(path, state_dim, input_dim):
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    data = np.atleast_2d(data)
    times = data[:, 0]
    states = data[:, 1 : 1 + state_dim].T
    inputs = data[:-1, 1 + state_dim : 1 + state_dim + input_dim].T
    return Trajectory(times=times, states=states, inputs=inputs)


def trajectories_to_csv(trajectories, path):
    """Several trajectories in one file, tagged by a leading traj column."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    first = trajectories[0]
    n, q = first.state_dim, first.input_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["traj"] + _state_header(n, q))
        for idx, traj in enumerate(trajectories):
            for k in range(traj.times.size):
                uk = traj.inputs[:, min(k, traj.n_steps - 1)] if traj.n_steps else np.zeros(q)
                writer.writerow(
                    [idx, repr(float(traj.times[k]))]
                    + [repr(float(v)) for v in traj.states[:, k]]
                    + [repr(float(v)) for v in uk]
                )


def trajectories_from_csv(path, state_dim, input_dim):
    data = np.atleast_2d(np.genfromtxt(path, delimiter=",", skip_header=1))
    out = []
    for idx in np.unique(data[:, 0]).astype(int):
        rows = data[data[:, 0] == idx]
        times = rows[:, 1]
        states = rows[:, 2 : 2 + state_dim].T
        inputs = rows[:-1, 2 + state_dim : 2 + state_dim + input_dim].T
        out.append(Trajectory(times=times, states=states, inputs=inputs))
    return out


def sampleset_to_csv(data, path):
    """One row per snapshot pair: t, x, u, and the shifted state x'."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, q = data.state_dim, data.input_dim
    header = _state_header(n, q) + [f"xp{i + 1}" for i in range(n)]
    t = data.t if data.t is not None else np.arange(data.n_samples) * data.dt
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(data.n_samples):
            writer.writerow(
                [repr(float(t[k]))]
                + [repr(float(v)) for v in data.x[:, k]]
                + [repr(float(v)) for v in data.u[:, k]]
                + [repr(float(v)) for v in data.xp[:, k]]
            )


def sampleset_manifest(data):
    return {
        "state_dim": data.state_dim,
        "input_dim": data.input_dim,
        "n_samples": data.n_samples,
        "dt": data.dt,
        "seed": data.meta.get("seed"),
        "n_trajectories": data.meta.get("n_trajectories"),
        "n_divergent": data.meta.get("n_divergent"),
        "t_end": data.meta.get("t_end"),
        "box": data.meta.get("box"),
    }


def sampleset_to_dir(data, out_dir, stem="samples"):
    out_dir = Path(out_dir)
    sampleset_to_csv(data, out_dir / f"{stem}.csv")
    write_json(sampleset_manifest(data), out_dir / f"{stem}.json")


def sampleset_from_csv(path, manifest_path):
    man = read_json(manifest_path)
    n, q = int(man["state_dim"]), int(man["input_dim"])
    rows = np.atleast_2d(np.genfromtxt(path, delimiter=",", skip_header=1))
    meta = {k: man.get(k) for k in ("seed", "n_trajectories", "n_divergent", "t_end", "box")}
    return SampleSet(
        x=rows[:, 1 : 1 + n].T,
        xp=rows[:, 1 + n + q : 1 + 2 * n + q].T,
        u=rows[:, 1 + n : 1 + n + q].T,
        dt=float(man["dt"]),
        t=rows[:, 0],
        meta=meta,
    )


def _lifting_descriptor(lifting):
    if isinstance(lifting, DelayCoordinates):
        return {
            "type": "delay",
            "d1": lifting.spec.d1,
            "d2": lifting.spec.d2,
            "tau_steps": lifting.spec.tau_steps,
            "coords": list(lifting.coords),
            "state_dim": lifting.state_dim,
            "input_dim": lifting.input_dim,
        }
    if isinstance(lifting, Dictionary):
        if not all(isinstance(f, Monomial) for f in lifting.funcs):
            raise InvalidInputError(
                "only monomial dictionaries can be serialized; custom observables "
                "must be reconstructed in code"
            )
        return {
            "type": "monomials",
            "n_in": lifting.n_in,
            "exponents": [list(f.exponents) for f in lifting.funcs],
            "labels": list(lifting.labels),
        }
    raise InvalidInputError(f"cannot serialize lifting of type {type(lifting)!r}")


def _lifting_from_descriptor(desc):
    if desc["type"] == "delay":
        return DelayCoordinates(
            spec=DelaySpec(d1=desc["d1"], d2=desc["d2"], tau_steps=desc["tau_steps"]),
            coords=tuple(desc["coords"]),
            state_dim=desc["state_dim"],
            input_dim=desc["input_dim"],
        )
    if desc["type"] == "monomials":
        exps = [tuple(e) for e in desc["exponents"]]
        return Dictionary(
            n_in=desc["n_in"],
            funcs=tuple(Monomial(e) for e in exps),
            grads=tuple(MonomialGradient(e) for e in exps),
            labels=tuple(monomial_label(e) for e in exps),
        )
    raise InvalidInputError(f"unknown lifting descriptor type {desc.get('type')!r}")


def model_to_json(model, path):
    payload = {
        "a": model.a,
        "b": model.b,
        "c": model.c,
        "dims": {
            "lifted": model.lifted_dim,
            "input": model.input_dim,
            "recovered": model.recovered_dim,
        },
        "dt": model.dt,
        "fit_residual": model.fit_residual,
        "kind": model.kind,
        "lifting": _lifting_descriptor(model.lifting),
        "training_hash": model.training_hash,
    }
    write_json(payload, path)


def model_from_json(path):
    raw = read_json(path)
    return LinearControlModel(
        a=np.asarray(raw["a"], dtype=float),
        b=np.asarray(raw["b"], dtype=float),
        c=np.asarray(raw["c"], dtype=float),
        lifting=_lifting_from_descriptor(raw["lifting"]),
        dt=float(raw["dt"]),
        kind=raw["kind"],
        fit_residual=float(raw["fit_residual"]) if raw.get("fit_residual") is not None else float("nan"),
        training_hash=raw.get("training_hash"),
    )


def family_to_json(family, path):
    write_json(
        {
            "levels": [lv for lv in family.levels],
            "mats": [m for m in family.mats],
            "dt": family.dt,
            "fit_residuals": list(family.fit_residuals),
            "lifting": _lifting_descriptor(family.lifting),
        },
        path,
    )


def family_from_json(path):
    raw = read_json(path)
    lifting = _lifting_from_descriptor(raw["lifting"])
    return ParametrizedFamily(
        levels=tuple(np.asarray(lv, dtype=float).reshape(-1) for lv in raw["levels"]),
        mats=tuple(np.asarray(m, dtype=float) for m in raw["mats"]),
        lifting=lifting,
        c=recovery_matrix(lifting),
        dt=float(raw["dt"]),
        fit_residuals=tuple(raw.get("fit_residuals", ())),
    )


def matrix_to_csv(mat, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(mat, dtype=float), delimiter=",")


def chain_to_json(chain, path):
    write_json(
        {
            "partition": {
                "lows": chain.partition.lows,
                "highs": chain.partition.highs,
                "counts": chain.partition.counts,
            },
            "levels": [lv for lv in chain.levels],
            "tau": chain.mats[0].tau,
            "matrices": [m.p for m in chain.mats],
            "counts": [m.counts for m in chain.mats],
            "full_escape": [list(m.full_escape) for m in chain.mats],
        },
        path,
    )


def chain_from_json(path):
    raw = read_json(path)
    part = BoxPartition(
        lows=raw["partition"]["lows"],
        highs=raw["partition"]["highs"],
        counts=raw["partition"]["counts"],
    )
    mats = tuple(
        TransitionMatrix(
            p=np.asarray(m, dtype=float),
            tau=float(raw["tau"]),
            counts=None if cnt is None else np.asarray(cnt, dtype=float),
            outside=True,
            full_escape=tuple(esc),
        )
        for m, cnt, esc in zip(raw["matrices"], raw["counts"], raw["full_escape"])
    )
    levels = tuple(np.asarray(lv, dtype=float).reshape(-1) for lv in raw["levels"])
    return ControlledChain(levels=levels, mats=mats, partition=part)


def closed_loop_to_csv(result, path):
    """Per-step rows: t, state, applied input, stage cost, running cost.

    The final row carries the terminal state with the last held input; its
    stage cost is written as nan and the running cost repeats the total.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    traj = result.trajectory
    n, q = traj.state_dim, traj.input_dim
    header = _state_header(n, q) + ["stage_cost", "cumulative_cost"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(traj.times.size):
            last = k >= traj.n_steps
            uk = traj.inputs[:, min(k, traj.n_steps - 1)] if traj.n_steps else np.zeros(q)
            stage = float("nan") if last else float(result.stage_costs[k])
            cum = result.total_cost if last else float(result.cumulative_cost[k])
            writer.writerow(
                [repr(float(traj.times[k]))]
                + [repr(float(v)) for v in traj.states[:, k]]
                + [repr(float(v)) for v in uk]
                + [repr(stage), repr(cum)]
            )


def closed_loop_summary(result, success_threshold=None):
    final_norm = float(np.linalg.norm(result.final_state))
    out = {
        "total_cost": result.total_cost,
        "final_state": result.final_state,
        "final_state_norm": final_norm,
        "n_steps": result.trajectory.n_steps,
        "warmup_steps": result.warmup_steps,
        "qp_iterations_total": int(result.solve_stats["iterations"].sum()),
        "qp_max_kkt_residual": float(np.nanmax(result.solve_stats["kkt_residual"]))
        if np.any(np.isfinite(result.solve_stats["kkt_residual"]))
        else None,
    }
    if success_threshold is not None:
        out["stabilized"] = bool(final_norm < success_threshold)
    return out
