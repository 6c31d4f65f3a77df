# services/logging_service.py

import json
import math
import sys
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional
import logging
from logging.handlers import RotatingFileHandler


class RunLogger:
    """
    Logging service for one command-line run (train, eval, predict, ...).

    Log file format: <command>-<run_id>-<HH-MM-SS>.log
    Folder structure: logs/2026-10-17/

    Besides the plain level methods it keeps a small statistics record
    (steps, epochs, best validation OA, warnings, errors) that is written
    as a JSON summary next to the log file when the run completes.
    """

    def __init__(self, logs_base_dir: Path):
        self.logs_base_dir = Path(logs_base_dir)
        self.current_logger: Optional[logging.Logger] = None
        self.current_log_file: Optional[Path] = None
        self.run_stats: Dict[str, Any] = self._fresh_stats(None, None)

    @staticmethod
    def _fresh_stats(command: Optional[str], run_id: Optional[str]) -> Dict[str, Any]:
        return {
            'command': command,
            'run_id': run_id,
            'start_time': datetime.now().isoformat(),
            'end_time': None,
            'epochs_run': 0,
            'best_val_oa': None,
            'steps': [],
            'warnings': [],
            'errors': [],
            'status': 'STARTING',
        }

    @property
    def active(self) -> bool:
        return self.current_logger is not None

    def start_run_logging(self, command: str, run_id: str = "adhoc") -> Path:
        """
        Initialize logging for one command invocation.
        Creates the date folder and the run-specific log file.

        Returns: Path to the created log file
        """
        today = datetime.now()
        log_dir = self.logs_base_dir / today.strftime("%Y-%m-%d")
        log_dir.mkdir(parents=True, exist_ok=True)

        timestamp = today.strftime("%H-%M-%S")
        self.current_log_file = log_dir / f"{command}-{run_id}-{timestamp}.log"
        self.current_logger = self._setup_logger(command, run_id, self.current_log_file)

        self.run_stats = self._fresh_stats(command, run_id)
        self.run_stats['status'] = 'RUNNING'

        self.log_info("=" * 72)
        self.log_info(f"SDMAMBA {command.upper()} STARTED")
        self.log_info("=" * 72)
        self.log_info(f"Run ID: {run_id}")
        self.log_info(f"Start Time: {self.run_stats['start_time']}")
        self.log_info(f"Log File: {self.current_log_file}")
        return self.current_log_file

    def _setup_logger(self, command: str, run_id: str, log_file: Path) -> logging.Logger:
        logger = logging.getLogger(f"sdmamba_{command}_{run_id}")
        for handler in logger.handlers[:]:
            logger.removeHandler(handler)
        logger.setLevel(logging.DEBUG)

        file_handler = RotatingFileHandler(
            filename=str(log_file),
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=5,
            encoding='utf-8'
        )
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s | %(levelname)-8s | %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        ))
        logger.addHandler(file_handler)

        # stdout carries command output (tables, paths); progress goes to stderr
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(logging.INFO)
        console_handler.setFormatter(logging.Formatter(
            '[%(asctime)s] %(levelname)s: %(message)s',
            datefmt='%H:%M:%S'
        ))
        logger.addHandler(console_handler)

        logger.propagate = False
        return logger

    def log_step(self, step_name: str, details: str = "", status: str = "IN_PROGRESS"):
        """Log a pipeline step with details."""
        self.run_stats['steps'].append({
            'step': step_name,
            'timestamp': datetime.now().isoformat(),
            'status': status,
            'details': details,
        })
        if status == "COMPLETED":
            self.log_info(f"STEP COMPLETED: {step_name}")
        elif status == "FAILED":
            self.log_error(f"STEP FAILED: {step_name}")
        else:
            self.log_info(f"STEP STARTED: {step_name}")
        if details:
            self.log_info(f"   Details: {details}")

    def log_epoch(self, epoch: int, loss: float, report=None):
        self.run_stats['epochs_run'] = max(self.run_stats['epochs_run'], epoch)
        if report is None:
            self.log_info(f"EPOCH {epoch}: loss={loss:.6f}")
            return
        best = self.run_stats['best_val_oa']
        if best is None or report.oa > best:
            self.run_stats['best_val_oa'] = float(report.oa)
        self.log_info(
            f"EPOCH {epoch}: loss={loss:.6f} val_oa={report.oa:.4f} "
            f"val_aa={report.aa:.4f} val_kappa={report.kappa:.4f}"
        )

    def log_eval_report(self, report, label: str = "test"):
        self.log_info(f"EVALUATION ({label}): {int(report.confusion.sum())} samples")
        self.log_info(f"   OA={report.oa:.4f} AA={report.aa:.4f} Kappa={report.kappa:.4f}")
        for cls, acc in enumerate(report.per_class_acc, 1):
            if not math.isnan(acc):
                self.log_debug(f"     - class {cls}: {acc:.4f}")

    def log_flops(self, sparse_flops: int, dense_flops: int, lam: Optional[float] = None):
        prefix = f"lambda={lam} " if lam is not None else ""
        ratio = sparse_flops / dense_flops if dense_flops else 0.0
        self.log_info(f"FLOPS: {prefix}sparse={sparse_flops:,} dense={dense_flops:,} ratio={ratio:.4f}")

    def log_config_load(self, source: str, status: str, details: str = ""):
        """Log configuration loading operations."""
        self.log_info(f"CONFIG: {source} - {status}")
        if details:
            self.log_info(f"   {details}")

    def log_file_operation(self, operation: str, file_path: str, details: str = ""):
        """Log file system operations."""
        self.log_info(f"FILE {operation.upper()}: {file_path}")
        if details:
            self.log_info(f"   {details}")

    def log_performance_metric(self, metric_name: str, value: float, unit: str = "ms"):
        self.log_info(f"PERFORMANCE: {metric_name} = {value} {unit}")

    def log_data_processing(self, operation: str, input_count: int, output_count: int, details: str = ""):
        """Log data processing operations."""
        self.log_info(f"DATA PROCESSING: {operation}")
        self.log_info(f"   Input: {input_count} items")
        self.log_info(f"   Output: {output_count} items")
        if details:
            self.log_info(f"   Details: {details}")

    def log_info(self, message: str):
        if self.current_logger:
            self.current_logger.info(message)

    def log_warning(self, message: str):
        if self.current_logger:
            self.current_logger.warning(message)
        self.run_stats['warnings'].append({
            'timestamp': datetime.now().isoformat(),
            'message': message
        })

    def log_error(self, message: str, exception: Exception = None):
        if self.current_logger:
            self.current_logger.error(message)
            if exception:
                self.current_logger.error(f"Exception details: {exception}")
        error_info = {
            'timestamp': datetime.now().isoformat(),
            'message': message
        }
        if exception:
            error_info['exception'] = str(exception)
            error_info['exception_type'] = type(exception).__name__
        self.run_stats['errors'].append(error_info)

    def log_debug(self, message: str):
        if self.current_logger:
            self.current_logger.debug(message)

    def complete_run_logging(self, status: str = "SUCCESS"):
        """
        Complete the logging session and write the final summary.

        Args:
            status: Final run status ("SUCCESS", "FAILED")
        """
        if not self.current_logger:
            return

        stats = self.run_stats
        stats['end_time'] = datetime.now().isoformat()
        stats['status'] = status
        duration = datetime.fromisoformat(stats['end_time']) - datetime.fromisoformat(stats['start_time'])

        self.log_info("=" * 72)
        self.log_info(f"RUN COMPLETED - STATUS: {status}")
        self.log_info("=" * 72)
        self.log_info(f"   Duration: {duration}")
        self.log_info(f"   Epochs run: {stats['epochs_run']}")
        if stats['best_val_oa'] is not None:
            self.log_info(f"   Best validation OA: {stats['best_val_oa']:.4f}")
        self.log_info(f"   Warnings: {len(stats['warnings'])}")
        self.log_info(f"   Errors: {len(stats['errors'])}")
        for step in stats['steps']:
            self.log_info(f"   - {step['step']} ({step['status']})")

        self._write_json_summary()
        self._cleanup_logger()

    def _write_json_summary(self):
        if not self.current_log_file:
            return
        json_file = self.current_log_file.with_suffix('.json')
        try:
            with open(json_file, 'w', encoding='utf-8') as f:
                json.dump(self.run_stats, f, indent=2, ensure_ascii=False)
        except OSError as e:
            self.log_warning(f"Failed to write JSON summary: {e}")

    def _cleanup_logger(self):
        if self.current_logger:
            for handler in self.current_logger.handlers[:]:
                handler.close()
                self.current_logger.removeHandler(handler)
            self.current_logger = None
        self.current_log_file = None

    @contextmanager
    def run_context(self, command: str, run_id: str = "adhoc"):
        """
        Context manager for run logging.

        Usage:
            with run_logger.run_context("train", run_id):
                ...
        """
        self.start_run_logging(command, run_id)
        try:
            yield self
        except Exception as e:
            self.log_error(f"Run failed: {e}", e)
            self.complete_run_logging("FAILED")
            raise
        else:
            self.complete_run_logging("SUCCESS")


# Global logger instance (initialized in config/settings.py)
run_logger: Optional[RunLogger] = None


def get_run_logger() -> RunLogger:
    if run_logger is None:
        raise RuntimeError("Run logger not initialized. Call initialize_logger() first.")
    return run_logger


def initialize_logger(logs_dir: Path) -> RunLogger:
    global run_logger
    run_logger = RunLogger(logs_dir)
    return run_logger
