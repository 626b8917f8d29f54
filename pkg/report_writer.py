import csv
import json
import os
import sys
from typing import Any, Iterable, TextIO

import numpy as np


def _fmt(value: float) -> str:
    # shortest text that reads back to the same double
    return format(float(value), ".17g")


class ReportWriter:
    """
    Writes the results of a run: CSV tables, JSON reports and gnuplot scripts.
    With no output path everything goes to standard output.
    """

    def __init__(self, out_path: str | None = None):
        self.out_path: str | None = out_path
        self.written: list[str] = []

    # ==================================================================
    # LOW-LEVEL OUTPUT
    # ==================================================================

    def _open(self, path: str | None) -> TextIO:
        if path is None:
            return sys.stdout
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.written.append(path)
        return open(path, "w", encoding="utf-8", newline="")

    def _sibling(self, suffix: str) -> str | None:
        """out.csv -> out.<suffix>.csv; None when writing to standard output."""
        if self.out_path is None:
            return None
        stem, ext = os.path.splitext(self.out_path)
        return f"{stem}.{suffix}{ext or '.csv'}"

    def write_csv(self, header: list[str], rows: Iterable[Iterable[float]], path: str | None = None) -> None:
        handle = self._open(path)
        try:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
        finally:
            if handle is not sys.stdout:
                handle.close()

    def write_json(self, payload: dict[str, Any], path: str | None = None) -> None:
        handle = self._open(path)
        try:
            json.dump(payload, handle, indent=2, sort_keys=True, allow_nan=True)
            handle.write("\n")
        finally:
            if handle is not sys.stdout:
                handle.close()

    # ==================================================================
    # TABLES
    # ==================================================================

    def resolvent(self, times: np.ndarray, values: np.ndarray) -> None:
        n = values.shape[1]
        header = ["t"] + [f"r_{i + 1}{j + 1}" for i in range(n) for j in range(n)]
        rows = (np.concatenate([[t], v.ravel()]) for t, v in zip(times, values))
        self.write_csv(header, rows, self.out_path)

    def trajectory(self, times: np.ndarray, values: np.ndarray, path: str | None = None) -> None:
        header = ["t"] + [f"x_{i + 1}" for i in range(values.shape[1])]
        rows = (np.concatenate([[t], v]) for t, v in zip(times, values))
        self.write_csv(header, rows, path if path is not None else self.out_path)

    def series(self, times: Iterable[float], values: Iterable[float], column: str = "dist") -> None:
        self.write_csv(["t", column], zip(times, values), self.out_path)

    def report(self, payload: dict[str, Any]) -> None:
        self.write_json(payload, self.out_path)

    def synchronization(self, first, second, distances: np.ndarray) -> tuple[str | None, str | None]:
        """
        Two trajectories and their distance. With an output path the
        trajectories go to <out>.xi.csv and <out>.eta.csv, the distance to <out>.
        """
        xi_path, eta_path = self._sibling("xi"), self._sibling("eta")
        if xi_path is not None:
            self.trajectory(first.times, first.values, xi_path)
            self.trajectory(second.times, second.values, eta_path)
            self.series(first.times, distances)
            return (xi_path, eta_path)

        # one table on standard output
        n = first.values.shape[1]
        header = ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"y_{i + 1}" for i in range(n)] + ["dist"]
        rows = (
            np.concatenate([[t], a, b, [d]])
            for t, a, b, d in zip(first.times, first.values, second.values, distances)
        )
        self.write_csv(header, rows)
        return (None, None)

    # ==================================================================
    # GNUPLOT
    # ==================================================================

    def gnuplot_synchronization(self, script_path: str, xi_csv: str, eta_csv: str, distance_csv: str) -> None:
        """Two panels: both solutions over time, and their distance on a log scale."""
        base = os.path.dirname(script_path)

        def rel(path: str) -> str:
            return os.path.relpath(path, base or ".")

        lines = [
            "set datafile separator ','",
            "set terminal pngcairo size 900,700",
            f"set output '{os.path.splitext(os.path.basename(script_path))[0]}.png'",
            "set multiplot layout 2,1",
            "set xlabel 't'",
            "set ylabel 'x(t)'",
            f"plot '{rel(xi_csv)}' using 1:2 skip 1 with lines title 'x(t, xi)', \\",
            f"     '{rel(eta_csv)}' using 1:2 skip 1 with lines title 'x(t, eta)'",
            "set logscale y",
            "set ylabel '|x(t, xi) - x(t, eta)|'",
            f"plot '{rel(distance_csv)}' using 1:2 skip 1 with lines title 'distance'",
            "unset multiplot",
        ]
        handle = self._open(script_path)
        try:
            handle.write("\n".join(lines) + "\n")
        finally:
            handle.close()
