# benchmark report files: CSV, JSON, per-step episode log, text table and plots
import csv
import io
import json
import logging
import math
import os
import time
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from analysis.benchmark import AblationTable, BenchmarkReport, LevelAggregate, format_value
from servo_trainer.simulation import trajectory_records

try:
    import psutil
except Exception:
    psutil = None

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except Exception:
    plt = None

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["controller", "level", "runs", "successes", "sr", "te", "re", "ts", "mtt"]
TABLE_HEADER = ["Method", "Level", "SR(%)", "TE(m)", "RE(deg)", "TS(0.04s)", "mTT(s)"]


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


def _csv_value(value: Any) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(value)


def provenance_header(kind: str, seed: Optional[int], config: Mapping[str, Any]) -> List[str]:
    """'#'-comment lines naming the producing command, its seed and the resolved config."""
    return [
        f"# {kind}",
        f"# seed: {seed}",
        "# config: " + json.dumps(config, sort_keys=True, separators=(",", ":"), default=_json_default),
    ]


def render_csv(columns: Sequence[str], rows: Iterable[Mapping[str, Any]], header: Sequence[str] = ()) -> str:
    """CSV text with an optional comment header; floats use a fixed format so reruns are byte-identical."""
    buf = io.StringIO()
    for line in header:
        buf.write(line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_csv_value(row.get(c)) for c in columns])
    return buf.getvalue()


def format_table(rows: Sequence[LevelAggregate]) -> str:
    """Czytelna tabela z jednym wierszem na (kontroler, poziom)."""
    body = [[r.controller, r.level, f"{r.sr:.2f}", format_value(r.te), format_value(r.re),
             "-" if math.isnan(r.ts) else f"{r.ts:.1f}", format_value(r.mtt)] for r in rows]
    return _align([TABLE_HEADER] + body)


def format_ablation(table: AblationTable) -> str:
    lines = [table.title, _align([table.columns] + [[format_value(r.get(c)) for c in table.columns]
                                                    for r in table.rows])]
    lines.extend(f"note: {n}" for n in table.notes)
    return "\n".join(lines)


def _align(grid: List[List[str]]) -> str:
    widths = [max(len(row[i]) for row in grid) for i in range(len(grid[0]))]
    out = []
    for k, row in enumerate(grid):
        out.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if k == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def report_to_dict(report: BenchmarkReport, seed: Optional[int]) -> Dict[str, Any]:
    return {
        "seed": seed,
        "config": report.config,
        "controllers": report.controllers,
        "rows": [r.__dict__ for r in report.rows],
        "seeds": report.seeds,
        "skipped": report.skipped,
        "episodes": [e.to_row() for e in report.episodes],
    }


def rows_from_dict(data: Mapping[str, Any]) -> List[LevelAggregate]:
    """Odtwarza wiersze tabeli z zapisanego report.json; JSON null oznacza nan."""
    rows = []
    for r in data.get("rows", []):
        clean = {k: (float("nan") if v is None else v) for k, v in r.items()}
        rows.append(LevelAggregate(**clean))
    return rows


def _nan_to_none(obj: Any) -> Any:
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


class BenchmarkReporter:
    """
    Zapisuje pliki jednego przebiegu benchmarku lub ablacji do ``outdir``:

      report.csv     wiersz na (kontroler, poziom), nagłówek z pochodzeniem, bez kolumn czasowych
      report.json    wiersze, ziarna, pominięte ziarna, wyniki epizodów i zasoby procesu
      episodes.jsonl jeden rekord na krok sterowania
      report.txt     wyrównana tabela tekstowa
      *.png          słupki SR i krzywe błędu cech (gdy dostępny jest matplotlib)
    """

    def __init__(self, outdir: str, plots: bool = True):
        self.outdir = outdir
        self.plots = plots
        os.makedirs(self.outdir, exist_ok=True)
        self.start_time = time.time()
        self.samples: List[Dict[str, Any]] = []

    def sample_system(self) -> Dict[str, Any]:
        info = {"ts": time.time(), "proc_rss_bytes": None, "sys_used_bytes": None}
        if psutil:
            try:
                p = psutil.Process()
                info["proc_rss_bytes"] = getattr(p.memory_info(), "rss", None)
                info["sys_used_bytes"] = getattr(psutil.virtual_memory(), "used", None)
            except Exception:
                pass
        self.samples.append(info)
        return info

    def _path(self, name: str) -> str:
        return os.path.join(self.outdir, name)

    def _write_text(self, name: str, text: str) -> str:
        path = self._path(name)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        return path

    def write_report(self, report: BenchmarkReport, seed: Optional[int], prefix: str = "") -> Dict[str, str]:
        """Zapisuje wszystkie pliki raportu; zwraca {rodzaj: ścieżka}."""
        self.sample_system()
        paths = {}
        header = provenance_header("depth-pc benchmark report", seed, report.config)
        paths["csv"] = self._write_text(f"{prefix}report.csv",
                                        render_csv(REPORT_COLUMNS, (r.__dict__ for r in report.rows), header))
        paths["table"] = self._write_text(f"{prefix}report.txt", format_table(report.rows))

        data = report_to_dict(report, seed)
        data["wall_time"] = report.wall_time
        data["resources"] = self.samples
        with open(self._path(f"{prefix}report.json"), "w", encoding="utf-8") as f:
            json.dump(_nan_to_none(data), f, default=_json_default, indent=2, sort_keys=True)
        paths["json"] = self._path(f"{prefix}report.json")

        paths["episodes"] = self._path(f"{prefix}episodes.jsonl")
        with open(paths["episodes"], "w", encoding="utf-8") as f:
            for episode in report.episodes:
                for record in trajectory_records(episode):
                    f.write(json.dumps(record, default=_json_default, sort_keys=True) + "\n")

        if self.plots:
            paths.update(self.make_plots(report, prefix))
        logger.info("report written to %s", self.outdir)
        return paths

    def write_ablation(self, table: AblationTable, seed: Optional[int], name: str) -> Dict[str, str]:
        """``<name>.csv`` and ``<name>.txt`` for the comparison table, plus the underlying battery report."""
        paths = {}
        config = table.report.config if table.report is not None else {}
        header = provenance_header(table.title, seed, config) + [f"# note: {n}" for n in table.notes]
        paths["csv"] = self._write_text(f"{name}.csv", render_csv(table.columns, table.rows, header))
        paths["table"] = self._write_text(f"{name}.txt", format_ablation(table))
        if table.report is not None:
            paths.update({f"battery_{k}": v for k, v in self.write_report(table.report, seed, f"{name}_").items()})
        return paths

    def make_plots(self, report: BenchmarkReport, prefix: str = "") -> Dict[str, str]:
        if plt is None:
            return {}
        paths = {}
        controllers = list(dict.fromkeys(r.controller for r in report.rows))
        levels = list(dict.fromkeys(r.level for r in report.rows))
        if controllers and levels:
            width = 0.8 / len(controllers)
            x = np.arange(len(levels))
            plt.figure(figsize=(6, 4))
            for k, name in enumerate(controllers):
                sr = [report.row(name, lv).sr for lv in levels]
                plt.bar(x + k * width, sr, width, label=name)
            plt.xticks(x + 0.4 - width / 2, levels)
            plt.ylabel("SR (%)")
            plt.ylim(0, 105)
            plt.title("Success rate per deviation level")
            plt.legend()
            plt.tight_layout()
            paths["sr_plot"] = self._path(f"{prefix}success_rate.png")
            plt.savefig(paths["sr_plot"])
            plt.close()

        with_traj = [e for e in report.episodes if e.trajectory]
        if with_traj:
            plt.figure(figsize=(8, 3))
            colors = {name: f"C{k % 10}" for k, name in enumerate(controllers)}
            for e in with_traj:
                errors = [s.feature_error for s in e.trajectory]
                plt.semilogy(np.arange(len(errors)), np.maximum(errors, 1e-6), color=colors.get(e.controller, "C0"),
                             alpha=0.3, linewidth=0.8)
            for name in controllers:
                plt.plot([], [], color=colors[name], label=name)
            plt.xlabel("step (0.04 s)")
            plt.ylabel("mean feature error")
            plt.title("Feature error convergence")
            plt.grid(True)
            plt.legend()
            plt.tight_layout()
            paths["error_plot"] = self._path(f"{prefix}feature_error.png")
            plt.savefig(paths["error_plot"])
            plt.close()
        return paths
