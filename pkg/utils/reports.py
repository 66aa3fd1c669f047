"""CSV writers for metrics, training logs, closed-loop logs and plot data."""
import csv
import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

METRICS_FIELDS = [
    "stage", "config_hash", "seed", "n_x", "n_p",
    "bfr_train", "bfr_test", "bfr_train_observer", "bfr_test_observer",
    "r_value", "r_status", "nonzero_groups", "tau", "kappa_p",
]
TRAIN_LOG_FIELDS = ["stage", "iter", "optimizer", "total", "mse", "reg_groups", "rci_penalty", "r_value"]
REDUCTION_FIELDS = ["n_p", "indices", "bfr_train", "bfr_test", "r_status", "r_value"]
SWEEP_FIELDS = ["tau", "kappa_p", "nonzero_groups", "bfr_train", "bfr_test", "r_value", "r_status"]


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple, np.ndarray)):
        return " ".join(_fmt(v) for v in value)
    return "" if value is None else str(value)


def _open_writer(path, fields, append):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    exists = os.path.exists(path) and os.path.getsize(path) > 0
    f = open(path, "a" if append else "w", newline="")
    writer = csv.writer(f)
    if not (append and exists):
        writer.writerow(fields)
    return f, writer


def write_rows(path, fields, rows, append=False):
    """Write dict rows under a fixed header; missing keys become empty cells."""
    f, writer = _open_writer(path, fields, append)
    with f:
        for row in rows:
            writer.writerow([_fmt(row.get(name)) for name in fields])
    return path


def append_metrics(path, row):
    return write_rows(path, METRICS_FIELDS, [row], append=True)


class TrainingLog:
    """Line-oriented training records, flushed per row."""

    def __init__(self, path=None, stage=""):
        self.path = path
        self.stage = stage
        self.rows = []
        self._file = None
        self._writer = None
        if path is not None:
            self._file, self._writer = _open_writer(path, TRAIN_LOG_FIELDS, append=True)

    def record(self, iteration, optimizer, report):
        row = {"stage": self.stage, "iter": iteration, "optimizer": optimizer}
        row.update(report.as_row() if hasattr(report, "as_row") else report)
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow([_fmt(row.get(name)) for name in TRAIN_LOG_FIELDS])
            self._file.flush()

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_closed_loop(path, log):
    n_x = log.x.shape[1]
    n_y = log.y.shape[1]
    n_u = log.u.shape[1]
    fields = (["t"] + [f"y{i + 1}" for i in range(n_y)] + [f"y_ref{i + 1}" for i in range(n_y)]
              + [f"u{i + 1}" for i in range(n_u)] + [f"u_des{i + 1}" for i in range(n_u)]
              + ["filter_active", "in_set"] + [f"x{i + 1}" for i in range(n_x)])
    rows = []
    for t in range(log.y.shape[0]):
        values = ([t] + list(log.y[t]) + list(log.y_ref[t]) + list(log.u[t]) + list(log.u_des[t])
                  + [int(log.filter_active[t]), int(log.in_set[t])] + list(log.x[t]))
        rows.append(dict(zip(fields, values)))
    return write_rows(path, fields, rows)


def write_polyline(path, points):
    """Set boundary vertices, one point per row."""
    points = np.atleast_2d(points)
    fields = [f"c{i + 1}" for i in range(points.shape[1])]
    return write_rows(path, fields, [dict(zip(fields, p)) for p in points])


def write_trajectories(path, solution):
    """Per-Y-vertex tracking trajectories of an RCI solution."""
    fields = ["vertex", "t", "state", "input"]
    rows = []
    for j, (xs, us) in enumerate(zip(solution.states, solution.inputs)):
        for t in range(len(us)):
            rows.append({"vertex": j, "t": t, "state": xs[t], "input": us[t]})
    return write_rows(path, fields, rows)
