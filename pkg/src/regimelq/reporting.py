"""Deterministic CSV/JSON export of solver artifacts.

Numeric CSV cells carry 17 significant digits (lossless double round-trip),
comma separators, '.' decimal, one header row. JSON documents are written
with sorted keys and no volatile fields, so identical runs produce
byte-identical bundles.
"""

from __future__ import annotations

import json
import os

import numpy as np


def fmt(x) -> str:
    return f"{float(x):.17g}"


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _block_headers(prefix, shape):
    if len(shape) == 1:
        return [f"{prefix}_{i}" for i in range(shape[0])]
    return [
        f"{prefix}_{i}_{j}" for i in range(shape[0]) for j in range(shape[1])
    ]


def write_riccati_csv(sol, path):
    """(s, regime, P..., Shat..., Rhat...) rows; regime labels are 1-based."""
    num, d = sol.P.shape[:2]
    header = (
        ["s", "regime"]
        + _block_headers("P", sol.P.shape[2:])
        + _block_headers("Shat", sol.S_hat.shape[2:])
        + _block_headers("Rhat", sol.R_hat.shape[2:])
    )
    rows = []
    for k in range(num):
        s = sol.grid.nodes[k]
        for i in range(d):
            cells = [fmt(s), str(i + 1)]
            cells += [fmt(v) for v in sol.P[k, i].ravel()]
            cells += [fmt(v) for v in sol.S_hat[k, i].ravel()]
            cells += [fmt(v) for v in sol.R_hat[k, i].ravel()]
            rows.append(cells)
    _write_rows(path, header, rows)


def write_strategy_csv(strategy, path, offset_sample: int = 32):
    """Gain table plus offsets; per-scenario offsets go to a sample side file."""
    num, d = strategy.theta.shape[:2]
    header = ["s", "regime"] + _block_headers("theta", strategy.theta.shape[2:])
    table_offsets = strategy.offset_kind == "table"
    if table_offsets:
        header += _block_headers("v", strategy.v.shape[2:])
    else:
        header += ["v_ref"]
        side = os.path.splitext(path)[0] + "_offset_sample.csv"
    rows = []
    for k in range(num):
        s = strategy.grid.nodes[k]
        for i in range(d):
            cells = [fmt(s), str(i + 1)]
            cells += [fmt(v) for v in strategy.theta[k, i].ravel()]
            if table_offsets:
                cells += [fmt(v) for v in strategy.v[k, i].ravel()]
            else:
                cells += [os.path.basename(side)]
            rows.append(cells)
    _write_rows(path, header, rows)
    if not table_offsets:
        sample = min(offset_sample, strategy.v.shape[0])
        side_header = ["path", "s"] + _block_headers("v", strategy.v.shape[2:])
        side_rows = []
        for p in range(sample):
            for k in range(num):
                side_rows.append(
                    [str(p), fmt(strategy.grid.nodes[k])]
                    + [fmt(v) for v in strategy.v[p, k].ravel()]
                )
        _write_rows(side, side_header, side_rows)


def write_adjoint_csv(adjoint, path, sample_paths: int = 32):
    """ODE backend: (s, regime, value...); regression: a per-scenario sample."""
    nodes = adjoint.grid.nodes
    if adjoint.backend == "ode":
        n = adjoint.y.shape[2]
        header = ["s", "regime"] + [f"eta_{i}" for i in range(n)]
        rows = []
        for k, s in enumerate(nodes):
            for i in range(adjoint.y.shape[1]):
                rows.append([fmt(s), str(i + 1)]
                            + [fmt(v) for v in adjoint.y[k, i]])
        _write_rows(path, header, rows)
        return
    n = adjoint.y_paths.shape[2]
    header = (["path", "s"] + [f"eta_{i}" for i in range(n)]
              + [f"zeta_{i}" for i in range(n)])
    rows = []
    for p in range(min(sample_paths, adjoint.y_paths.shape[0])):
        for k, s in enumerate(nodes):
            rows.append(
                [str(p), fmt(s)]
                + [fmt(v) for v in adjoint.y_paths[p, k]]
                + [fmt(v) for v in adjoint.z_paths[p, k]]
            )
    _write_rows(path, header, rows)


def write_ensemble_csv(ens, path, max_paths=None):
    """Long-format per-path state/control trajectories."""
    count, num, n = ens.x_paths.shape
    m = ens.u_paths.shape[2]
    if max_paths is not None:
        count = min(count, max_paths)
    header = (["path", "s"] + [f"x_{i}" for i in range(n)]
              + [f"u_{j}" for j in range(m)])
    rows = []
    nodes = ens.scenarios.grid.nodes
    for p in range(count):
        for k in range(num):
            rows.append(
                [str(p), fmt(nodes[k])]
                + [fmt(v) for v in ens.x_paths[p, k]]
                + [fmt(v) for v in ens.u_paths[p, k]]
            )
    _write_rows(path, header, rows)


def write_matrix_csv(matrix, labels, path, corner=""):
    header = [corner] + [str(lbl) for lbl in labels]
    rows = []
    for lbl, row in zip(labels, np.asarray(matrix)):
        rows.append([str(lbl)] + [fmt(v) for v in row])
    _write_rows(path, header, rows)


def dump_json(doc, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def append_jsonl(doc, path):
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(doc, sort_keys=True) + "\n")


def write_sweep_bundle(report, outdir):
    """report.json plus CSV side tables for an epsilon sweep."""
    os.makedirs(outdir, exist_ok=True)
    labels = [fmt(e) for e in report.epsilons]
    write_matrix_csv(report.cauchy_u, labels,
                     os.path.join(outdir, "cauchy_u.csv"), "eps")
    write_matrix_csv(report.cauchy_theta, labels,
                     os.path.join(outdir, "cauchy_theta.csv"), "eps")
    write_matrix_csv(report.cauchy_v, labels,
                     os.path.join(outdir, "cauchy_v.csv"), "eps")
    norm_header = ["epsilon", "control_l2", "control_l2_se", "value",
                   "value_se", "escaped"]
    rows = []
    for rec in report.records:
        rows.append([
            fmt(rec["epsilon"]), fmt(rec["control_l2"]),
            fmt(rec["control_l2_se"]), fmt(rec["value"]),
            fmt(rec["value_se"]), str(int(rec.get("escaped", False))),
        ])
    _write_rows(os.path.join(outdir, "norms.csv"), norm_header, rows)
    if report.limit is not None:
        write_strategy_csv(report.limit,
                           os.path.join(outdir, "limit_strategy.csv"))
    doc = {
        "verdict": report.verdict,
        "epsilons": report.epsilons,
        "t_prime": report.t_prime,
        "x0": report.x0.tolist(),
        "i0": report.i0,
        "records": [
            {k: v for k, v in rec.items()} for rec in report.records
        ],
        "escapes": {fmt(k): v for k, v in report.escapes.items()},
        "cauchy_node_stride": report.cauchy_node_stride,
        "scenario_seed": report.scenario_seed,
        "scenario_count": report.scenario_count,
        "limit_square_integrable":
            None if report.limit is None else report.limit.square_integrable,
    }
    dump_json(doc, os.path.join(outdir, "report.json"))
