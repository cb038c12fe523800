# [file name]: report_service.py
"""Results table, entropy statistics and SVG figures rebuilt from stored cell records."""

import glob
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from ml_training.console import RunLog, status  # noqa: E402
from ml_training.metrics import CSV_COLUMNS, entropy_summary  # noqa: E402

# fixed ids and no timestamps keep the SVG output reproducible
matplotlib.rcParams["svg.hashsalt"] = "bdk-report"

RESULTS_CSV = "results.csv"
ENTROPY_CSV = "entropy_summary.csv"
ENTROPY_COLUMNS = ['model_family', 'n_labeled', 'mask_side', 'mask_rate', 'capacity_factor', 'seed',
                   'min', 'q1', 'median', 'q3', 'max', 'mean']
PLOTS = {
    "teacher_nll_vs_rate": "teacher_nll_vs_rate.svg",
    "delta_vs_rate": "delta_vs_rate.svg",
    "delta_vs_capacity": "delta_vs_capacity.svg",
    "entropy_boxplots": "entropy_boxplots.svg",
}
SORT_KEYS = ['model_family', 'n_labeled', 'mask_side', 'capacity_factor', 'replicate', 'seed']


class ReportService:
    def collect_records(self, out_dir):
        """record.json of every completed cell, in CSV order"""
        records = []
        for path in glob.glob(os.path.join(out_dir, "cells", "*", "record.json")):
            with open(path, 'r') as f:
                record = json.load(f)
            record["_dir"] = os.path.dirname(path)
            records.append(record)
        records.sort(key=lambda r: tuple(r.get(k, 0) for k in SORT_KEYS))
        return records

    def results_frame(self, records):
        return pd.DataFrame([{k: r[k] for k in CSV_COLUMNS} for r in records], columns=CSV_COLUMNS)

    def entropy_frame(self, records):
        rows = []
        for record in records:
            entropies = self._entropies(record)
            if entropies is None:
                continue
            row = {k: record[k] for k in ENTROPY_COLUMNS[:6]}
            row.update(entropy_summary(entropies).to_dict())
            rows.append(row)
        return pd.DataFrame(rows, columns=ENTROPY_COLUMNS)

    def _entropies(self, record):
        path = os.path.join(record["_dir"], "entropies.npy")
        return np.load(path) if os.path.exists(path) else None

    def write_report(self, out_dir):
        records = self.collect_records(out_dir)
        csv_path = os.path.join(out_dir, RESULTS_CSV)
        entropy_path = os.path.join(out_dir, ENTROPY_CSV)
        self.results_frame(records).to_csv(csv_path, index=False)
        self.entropy_frame(records).to_csv(entropy_path, index=False)

        plots = {}
        if records:
            plots = self.write_plots(records, out_dir)
        status(f"📊 Report: {len(records)} rows, {len(plots)} figures in {out_dir}")
        return {"status": "success", "csv": csv_path, "entropy_csv": entropy_path, "rows": len(records),
                "plots": plots}

    # ------------------------------------------------------------ figures

    def write_plots(self, records, out_dir):
        frame = pd.DataFrame(records)
        # replicates collapse to their median
        by_cell = (frame.groupby(['model_family', 'n_labeled', 'mask_side', 'mask_rate', 'capacity_factor'])
                   [['nll_teacher', 'delta']].median().reset_index())
        base = by_cell[by_cell['capacity_factor'] == by_cell['capacity_factor'].min()]

        paths = {}
        paths["teacher_nll_vs_rate"] = self._line_plot(
            base, x='mask_rate', y='nll_teacher', group='n_labeled',
            xlabel='masking rate r', ylabel='teacher test NLL (nats)', title='Teacher NLL vs masking rate',
            path=os.path.join(out_dir, PLOTS["teacher_nll_vs_rate"]), legend='N')
        paths["delta_vs_rate"] = self._line_plot(
            base, x='mask_rate', y='delta', group='n_labeled',
            xlabel='masking rate r', ylabel='student NLL - teacher NLL', title='Teacher-student gap vs masking rate',
            path=os.path.join(out_dir, PLOTS["delta_vs_rate"]), legend='N')
        paths["delta_vs_capacity"] = self._line_plot(
            by_cell, x='capacity_factor', y='delta', group='mask_side',
            xlabel='capacity factor', ylabel='student NLL - teacher NLL', title='Gap vs student capacity',
            path=os.path.join(out_dir, PLOTS["delta_vs_capacity"]), legend='m')
        boxes = self._entropy_boxes(records, out_dir)
        if boxes:
            paths["entropy_boxplots"] = boxes
        return paths

    def _line_plot(self, frame, x, y, group, xlabel, ylabel, title, path, legend):
        fig, ax = plt.subplots(figsize=(6, 4))
        for key, part in frame.groupby(group):
            part = part.sort_values(x)
            ax.plot(part[x], part[y], marker='o', label=f"{legend}={key}")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format='svg', metadata={'Date': None})
        plt.close(fig)
        return path

    def _entropy_boxes(self, records, out_dir):
        groups = {}
        for record in records:
            entropies = self._entropies(record)
            if entropies is None:
                continue
            key = (record['n_labeled'], record['mask_rate'])
            groups.setdefault(key, []).append(entropies)
        if not groups:
            return None

        keys = sorted(groups)
        fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(keys)), 4))
        # whiskers at the sample extremes
        ax.boxplot([np.concatenate(groups[k]) for k in keys], whis=(0, 100), showfliers=False)
        ax.set_xticks(range(1, len(keys) + 1))
        ax.set_xticklabels([f"N={n}\nr={r:.3f}" for n, r in keys], fontsize=7)
        ax.set_ylabel('teacher predictive entropy (nats)')
        ax.set_title('Predictive entropy on the test set (whiskers: min/max)')
        fig.tight_layout()
        path = os.path.join(out_dir, PLOTS["entropy_boxplots"])
        fig.savefig(path, format='svg', metadata={'Date': None})
        plt.close(fig)
        return path

    # ------------------------------------------------------------ read side (web API)

    def run_status(self, out_dir):
        manifest_path = os.path.join(out_dir, "manifest.json")
        manifest = None
        if os.path.exists(manifest_path):
            with open(manifest_path, 'r') as f:
                manifest = json.load(f)
        history = RunLog(out_dir).history() if os.path.exists(os.path.join(out_dir, "run_log.json")) else []
        checkpoints = glob.glob(os.path.join(out_dir, "cells", "*", "checkpoint.joblib"))
        return {
            "out_dir": out_dir,
            "config_hash": manifest["config_hash"] if manifest else None,
            "preset": manifest["config"]["preset"] if manifest else None,
            "completed_cells": len(self.collect_records(out_dir)),
            "in_flight_cells": len(checkpoints),
            "failed_cells": len([h for h in history if h.get("status") == "error"]),
            "history": history[-20:],
        }

    def records(self, out_dir):
        return [{k: v for k, v in r.items() if k != "_dir"} for r in self.collect_records(out_dir)]

    def entropy_rows(self, out_dir):
        return self.entropy_frame(self.collect_records(out_dir)).to_dict(orient='records')


report_service = ReportService()
