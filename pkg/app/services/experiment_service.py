# [file name]: experiment_service.py
"""
Grid driver: one SGLD teacher chain with interleaved distillation per cell.

Output directory layout:
    manifest.json                 config snapshot + config hash
    run_log.json                  per-cell outcomes (timestamps live here only)
    cells/<cell_id>/record.json   MetricRecord plus diagnostics
    cells/<cell_id>/entropies.npy teacher predictive entropies on the test set
    cells/<cell_id>/checkpoint.joblib   in-flight state, removed when the cell completes
"""

import json
import os
import traceback
from dataclasses import replace

import joblib
import numpy as np
from joblib import Parallel, delayed

from app.config import Cell, ExperimentConfig
from app.services.data_service import data_service
from ml_training.console import RunLog, progress, set_quiet, status
from ml_training.distiller import Distiller
from ml_training.errors import BDKError, CheckpointError, ConfigError
from ml_training.metrics import (MetricRecord, accuracy, mutual_information, nll,
                                 predictive_entropies)
from ml_training.nn_core import predict_probs, scale_cnn, scale_fcnn
from ml_training.seeding import cell_seed
from ml_training.sgld_sampler import PredictiveAccumulator, SGLDChain, accumulate_predictive

MANIFEST = "manifest.json"
CELLS_DIR = "cells"


def cell_dir(out_dir, cell):
    return os.path.join(out_dir, CELLS_DIR, cell.cell_id)


def build_specs(cfg, cell, input_shape, num_classes):
    """(teacher spec, student spec); the teacher is the unscaled family architecture without dropout"""
    dropout = cfg.student.dropout_rate if cfg.student.dropout_rate > 0 else None
    if cell.model_family == "cnn":
        if len(input_shape) != 3:
            raise ConfigError("the cnn family needs image inputs shaped (channels, rows, cols)")
        teacher = scale_cnn(1.0, input_shape=input_shape, num_classes=num_classes, dropout_rate=None)
        student = scale_cnn(cell.capacity_factor, input_shape=input_shape, num_classes=num_classes,
                            dropout_rate=dropout)
    else:
        teacher = scale_fcnn(1.0, input_shape=input_shape, base_width=cfg.base_width, num_classes=num_classes,
                             dropout_rate=None)
        student = scale_fcnn(cell.capacity_factor, input_shape=input_shape, base_width=cfg.base_width,
                             num_classes=num_classes, dropout_rate=dropout)
    return teacher, student


def _write_json(path, data):
    tmp = path + ".tmp"
    with open(tmp, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
    os.replace(tmp, path)


class CellRunner:
    """Teacher chain, student and predictive accumulator of one grid cell"""

    def __init__(self, cfg, cell, out_dir=None, config_hash=None):
        self.cfg = cfg
        self.cell = cell
        self.out_dir = out_dir
        self.config_hash = config_hash or cfg.config_hash
        self.data_seed = cell_seed(cfg.master_seed, cell.teacher_coordinates)
        self.seed = cell_seed(cfg.master_seed, cell.coordinates)

        self.data = data_service.build_cell_data(cfg, cell, self.data_seed)
        self.teacher_spec, self.student_spec = build_specs(cfg, cell, self.data.input_shape, self.data.num_classes)
        dtype = np.dtype(cfg.precision)

        teacher_cfg = replace(cfg.teacher, n_total=len(self.data.labeled), seed=self.data_seed)
        student_cfg = replace(cfg.student, seed=self.seed)
        self.chain = SGLDChain.for_dataset(self.teacher_spec, teacher_cfg, self.data.labeled, dtype=dtype)
        self.distiller = Distiller(self.teacher_spec, self.student_spec, student_cfg, self.data.pool,
                                   teacher_cfg.batch_size, dtype=dtype)
        self.accumulator = PredictiveAccumulator.empty(len(self.data.test), self.data.num_classes)

    @property
    def checkpoint_path(self):
        return os.path.join(cell_dir(self.out_dir, self.cell), "checkpoint.joblib") if self.out_dir else None

    def save_checkpoint(self):
        if not self.checkpoint_path:
            return
        os.makedirs(os.path.dirname(self.checkpoint_path), exist_ok=True)
        state = {
            "config_hash": self.config_hash,
            "cell": self.cell.to_dict(),
            "chain": self.chain.state_dict(),
            "distiller": self.distiller.state_dict(),
            "accumulator": self.accumulator.state_dict(),
        }
        tmp = self.checkpoint_path + ".tmp"
        joblib.dump(state, tmp)
        os.replace(tmp, self.checkpoint_path)

    def load_checkpoint(self):
        """Restore in-flight state if a checkpoint exists; returns the resumed iteration"""
        if not self.checkpoint_path or not os.path.exists(self.checkpoint_path):
            return 0
        try:
            state = joblib.load(self.checkpoint_path)
        except Exception as e:
            raise CheckpointError(f"unreadable checkpoint {self.checkpoint_path}: {e}") from e
        if state.get("config_hash") != self.config_hash:
            raise CheckpointError(f"checkpoint {self.checkpoint_path} was written under a different config")
        if Cell.from_dict(state["cell"]) != self.cell:
            raise CheckpointError(f"checkpoint {self.checkpoint_path} belongs to another cell")
        self.chain.load_state_dict(state["chain"])
        self.distiller.load_state_dict(state["distiller"])
        self.accumulator = PredictiveAccumulator.from_state(state["accumulator"])
        status(f"💾 Resuming {self.cell.cell_id} at iteration {self.chain.iteration}")
        return self.chain.iteration

    def run(self, stop_after=None):
        """
        Advance to total_iters and evaluate.

        stop_after=t checkpoints and returns None once iteration t is done
        (used to emulate an interrupted run).
        """
        total = self.cfg.teacher.total_iters
        every = self.cfg.checkpoint_every
        bar = progress(total, self.cell.cell_id, initial=self.chain.iteration)
        try:
            for sample in self.chain:
                if sample.retained:
                    accumulate_predictive(self.accumulator, self.chain.network, sample.theta, self.data.test.inputs)
                self.distiller.consume(sample)
                bar.update(1)
                if stop_after is not None and sample.iteration >= stop_after:
                    self.save_checkpoint()
                    return None
                if every and sample.iteration % every == 0 and sample.iteration < total:
                    self.save_checkpoint()
        finally:
            bar.close()
        return self.evaluate()

    def evaluate(self):
        test = self.data.test
        teacher_probs = self.accumulator.mean()
        student_probs = predict_probs(self.student_spec, self.distiller.omega, test.inputs)
        entropies = predictive_entropies(teacher_probs)
        information = mutual_information(teacher_probs, self.accumulator.mean_sample_entropy())

        record = MetricRecord.build(
            model_family=self.cell.model_family,
            n_labeled=self.cell.n_labeled,
            mask_side=self.cell.mask_side,
            capacity_factor=self.cell.capacity_factor,
            nll_teacher=nll(teacher_probs, test.labels),
            nll_student=nll(student_probs, test.labels),
            seed=self.seed,
        )
        diagnostics = {
            "cell_id": self.cell.cell_id,
            "replicate": self.cell.replicate,
            "data_seed": self.data_seed,
            "retained_samples": self.accumulator.sample_count,
            "teacher_accuracy": accuracy(teacher_probs, test.labels),
            "student_accuracy": accuracy(student_probs, test.labels),
            "teacher_mean_entropy": float(entropies.mean()),
            "teacher_mutual_information": float(information.mean()),
            "final_distillation_loss": self.distiller.last_loss,
        }
        if self.out_dir:
            directory = cell_dir(self.out_dir, self.cell)
            os.makedirs(directory, exist_ok=True)
            np.save(os.path.join(directory, "entropies.npy"), entropies)
            _write_json(os.path.join(directory, "record.json"), {**record.to_dict(), **diagnostics})
            if os.path.exists(self.checkpoint_path):
                os.remove(self.checkpoint_path)
        return record, diagnostics


def load_record(out_dir, cell):
    path = os.path.join(cell_dir(out_dir, cell), "record.json")
    if not os.path.exists(path):
        return None
    with open(path, 'r') as f:
        return json.load(f)


def _run_cell_job(config_dict, cell_dict, out_dir, config_hash, quiet):
    """Worker entry point; never raises so a failed cell leaves its siblings running"""
    set_quiet(quiet)
    cell = Cell.from_dict(cell_dict)
    try:
        cfg = ExperimentConfig.from_dict(config_dict)
        runner = CellRunner(cfg, cell, out_dir=out_dir, config_hash=config_hash)
        runner.load_checkpoint()
        record, diagnostics = runner.run()
        status(f"✅ {cell.cell_id}: teacher NLL {record.nll_teacher:.4f}, student NLL {record.nll_student:.4f}, "
               f"gap {record.delta:+.4f}")
        return {"status": "success", "cell_id": cell.cell_id, "record": record.to_dict(), **diagnostics}
    except Exception as e:
        status(f"❌ {cell.cell_id} failed: {e}")
        return {
            "status": "error",
            "cell_id": cell.cell_id,
            "error_type": type(e).__name__,
            "message": str(e),
            "traceback": traceback.format_exc() if not isinstance(e, BDKError) else None,
        }


class ExperimentService:
    def run_cell(self, cfg, cell, out_dir=None):
        """Run one cell in-process; returns the MetricRecord"""
        record, _ = CellRunner(cfg, cell, out_dir=out_dir).run()
        return record

    def prepare_output(self, cfg, out_dir=None):
        """Create the output directory and write or check its manifest before any compute"""
        out_dir = out_dir or cfg.out_dir
        try:
            os.makedirs(os.path.join(out_dir, CELLS_DIR), exist_ok=True)
            marker = os.path.join(out_dir, ".write-check")
            with open(marker, 'w') as f:
                f.write("ok")
            os.remove(marker)
        except OSError as e:
            raise ConfigError(f"output directory '{out_dir}' is not writable: {e}") from e

        manifest_path = os.path.join(out_dir, MANIFEST)
        if os.path.exists(manifest_path):
            manifest = self.read_manifest(out_dir)
            if manifest["config_hash"] != cfg.config_hash:
                raise CheckpointError(
                    f"'{out_dir}' holds results for config {manifest['config_hash'][:12]}, "
                    f"this run is {cfg.config_hash[:12]}; use a fresh --out directory")
        else:
            _write_json(manifest_path, {"config_hash": cfg.config_hash, "config": cfg.to_dict()})
        return out_dir

    def read_manifest(self, out_dir):
        manifest_path = os.path.join(out_dir, MANIFEST)
        if not os.path.exists(manifest_path):
            raise CheckpointError(f"no {MANIFEST} in '{out_dir}'; nothing to resume")
        try:
            with open(manifest_path, 'r') as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise CheckpointError(f"unreadable manifest in '{out_dir}': {e}") from e

    def run_grid(self, cfg, out_dir=None):
        """
        Run every pending cell, then re-emit the report.

        Completed cells (record.json present) are skipped, in-flight ones
        resume from their checkpoint.
        """
        from app.services.report_service import report_service

        set_quiet(cfg.quiet)
        data_service.check_available(cfg)
        out_dir = self.prepare_output(cfg, out_dir)
        config_hash = cfg.config_hash

        cells = cfg.cells()
        pending = [cell for cell in cells if load_record(out_dir, cell) is None]
        status(f"🚀 {len(cells)} cells, {len(cells) - len(pending)} already complete, "
               f"{len(pending)} to run on {cfg.jobs} worker(s)")

        results = []
        if pending:
            config_dict = cfg.to_dict()
            results = Parallel(n_jobs=min(cfg.jobs, len(pending)))(
                delayed(_run_cell_job)(config_dict, cell.to_dict(), out_dir, config_hash, cfg.quiet)
                for cell in pending
            )
            run_log = RunLog(out_dir)
            for result in results:
                run_log.append({k: v for k, v in result.items() if k != "traceback"})

        failed = [r for r in results if r["status"] != "success"]
        report = report_service.write_report(out_dir)
        if failed:
            status(f"❌ {len(failed)} of {len(pending)} cells failed")
        else:
            status(f"✅ Grid complete: {report['rows']} rows in {report['csv']}")
        return {
            "status": "error" if failed else "success",
            "out_dir": out_dir,
            "total_cells": len(cells),
            "ran": len(pending),
            "failed": [r["cell_id"] for r in failed],
            "results": results,
            "report": report,
        }

    def resume(self, out_dir, cfg=None, jobs=None, quiet=None):
        """Continue the grid stored in out_dir; a supplied config must hash to the stored one"""
        manifest = self.read_manifest(out_dir)
        stored = ExperimentConfig.from_dict(manifest["config"])
        if stored.config_hash != manifest["config_hash"]:
            raise CheckpointError(f"manifest in '{out_dir}' was edited after the run started")
        if cfg is not None and cfg.config_hash != manifest["config_hash"]:
            raise CheckpointError(f"config does not match the run stored in '{out_dir}'; refusing to resume")
        updates = {"out_dir": out_dir}
        if jobs is not None:
            updates["jobs"] = jobs
        if quiet is not None:
            updates["quiet"] = quiet
        return self.run_grid(replace(cfg or stored, **updates), out_dir=out_dir)


experiment_service = ExperimentService()
