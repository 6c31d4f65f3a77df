# services/evaluator.py

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn import metrics

from services.autograd import Tensor, no_grad
from services.cube_service import HsiCube, extract_batch
from services.flops_counter import count_flops
from services.sdmamba_model import SdmambaModel
from utils.error_handler import ContractError, DimensionError

try:
    from services.logging_service import get_run_logger
    _logger_available = True
except ImportError:
    _logger_available = False


def _log_if_available(func_name, *args, **kwargs):
    """Helper to log if logger is available."""
    if _logger_available:
        try:
            getattr(get_run_logger(), func_name)(*args, **kwargs)
        except Exception:
            pass


@dataclass
class EvalReport:
    """Confusion matrix (rows = truth, class k at index k-1) and the metrics derived from it."""

    confusion: np.ndarray
    oa: float
    aa: float
    kappa: float
    per_class_acc: np.ndarray
    flops_per_sample: int = 0
    class_names: Optional[List[str]] = field(default=None)

    @property
    def num_classes(self) -> int:
        return int(self.confusion.shape[0])

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if truth.shape != pred.shape:
        raise DimensionError("truth and predictions differ in length", shapes=(truth.shape, pred.shape))
    for name, values in (("truth", truth), ("predictions", pred)):
        if values.size and (values.min() < 1 or values.max() > num_classes):
            raise ContractError(f"{name} must hold labels in [1, {num_classes}]")
    if truth.size == 0:
        return np.zeros((num_classes, num_classes), dtype=np.int64)
    labels = np.arange(1, num_classes + 1)
    return metrics.confusion_matrix(truth, pred, labels=labels).astype(np.int64)


def _kappa(confusion: np.ndarray, oa: float) -> float:
    """Cohen's kappa of the agreement counted in `confusion`."""
    truth_idx, pred_idx = np.indices(confusion.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = metrics.cohen_kappa_score(
            truth_idx.ravel(), pred_idx.ravel(),
            labels=np.arange(confusion.shape[0]), sample_weight=confusion.ravel(),
        )
    if not np.isfinite(kappa):
        # chance agreement is total: a single class on both sides
        return 1.0 if oa == 1.0 else 0.0
    return float(kappa)


def report_from_confusion(confusion: np.ndarray, flops_per_sample: int = 0,
                          class_names: Optional[List[str]] = None) -> EvalReport:
    confusion = np.asarray(confusion, dtype=np.int64)
    total = int(confusion.sum())
    if total == 0:
        raise ContractError("cannot score an empty evaluation set")
    diag = np.diag(confusion).astype(np.float64)
    rows = confusion.sum(axis=1).astype(np.float64)

    oa = float(diag.sum() / total)
    per_class = np.full(confusion.shape[0], np.nan)
    present = rows > 0
    per_class[present] = diag[present] / rows[present]
    aa = float(per_class[present].mean())

    kappa = _kappa(confusion, oa)
    return EvalReport(
        confusion=confusion,
        oa=oa,
        aa=aa,
        kappa=float(kappa),
        per_class_acc=per_class,
        flops_per_sample=int(flops_per_sample),
        class_names=class_names,
    )


def report_from_predictions(truth, pred, num_classes: int, flops_per_sample: int = 0) -> EvalReport:
    return report_from_confusion(confusion_matrix(truth, pred, num_classes), flops_per_sample)


def _batches(coords: np.ndarray, batch_size: int):
    for start in range(0, len(coords), batch_size):
        yield coords[start:start + batch_size]


def predict_labels(model: SdmambaModel, cube: HsiCube, coords, batch_size: Optional[int] = None) -> np.ndarray:
    """Predicted labels (1..K) for each coordinate, in input order."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    batch_size = batch_size or model.config.batch_size
    model.eval()
    preds = []
    with no_grad():
        for chunk in _batches(coords, batch_size):
            logits = model.forward(Tensor(extract_batch(cube, chunk, model.config.patch_size)))
            preds.append(np.argmax(logits.data, axis=1) + 1)
    return np.concatenate(preds).astype(np.int32) if preds else np.zeros(0, dtype=np.int32)


def evaluate(model: SdmambaModel, cube: HsiCube, coords, batch_size: Optional[int] = None) -> EvalReport:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    truth = cube.labels[coords[:, 0], coords[:, 1]]
    if np.any(truth < 1):
        raise ContractError("evaluate() needs labeled coordinates")
    pred = predict_labels(model, cube, coords, batch_size)
    report = report_from_confusion(
        confusion_matrix(truth, pred, model.config.num_classes),
        flops_per_sample=count_flops(model.config).sparse_flops,
        class_names=cube.class_names,
    )
    _log_if_available('log_eval_report', report, f'{len(coords)} pixels')
    return report


def predict_map(model: SdmambaModel, cube: HsiCube, all_pixels: bool = False,
                batch_size: Optional[int] = None) -> np.ndarray:
    """H x W predicted label raster; unclassified pixels stay 0."""
    coords = cube.all_coords() if all_pixels else cube.labeled_coords()
    label_map = np.zeros((cube.height, cube.width), dtype=np.int32)
    if len(coords):
        label_map[coords[:, 0], coords[:, 1]] = predict_labels(model, cube, coords, batch_size)
    _log_if_available('log_data_processing', 'Predict map', cube.height * cube.width, len(coords),
                      'all pixels' if all_pixels else 'labeled pixels')
    return label_map


def embedding_frame(model: SdmambaModel, cube: HsiCube, coords, batch_size: Optional[int] = None) -> pd.DataFrame:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    batch_size = batch_size or model.config.batch_size
    model.eval()
    features = []
    with no_grad():
        for chunk in _batches(coords, batch_size):
            feats = model.forward_features(Tensor(extract_batch(cube, chunk, model.config.patch_size)))
            features.append(feats.data)
    width = model.config.hidden_dim
    matrix = np.concatenate(features, axis=0) if features else np.zeros((0, width), dtype=np.float32)
    frame = pd.DataFrame(matrix, columns=[f"f{i}" for i in range(1, width + 1)])
    frame.insert(0, "label", cube.labels[coords[:, 0], coords[:, 1]].astype(np.int64))
    frame.insert(0, "col", coords[:, 1])
    frame.insert(0, "row", coords[:, 0])
    return frame


def export_embeddings(model: SdmambaModel, cube: HsiCube, coords, path: Path,
                      batch_size: Optional[int] = None) -> Path:
    """One `row,col,label,f1,...,fD` line per coordinate, no header."""
    frame = embedding_frame(model, cube, coords, batch_size)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, header=False, index=False, float_format="%.9g", lineterminator="\n")
    _log_if_available('log_file_operation', 'WRITE', str(path), f'{len(frame)} embeddings of width {model.config.hidden_dim}')
    return path


def report_table(report: EvalReport, train_counts: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """Per-class rows (number, name, train, test, accuracy %) followed by OA, AA and Kappa rows."""
    k = report.num_classes
    names = report.class_names or [f"class_{i}" for i in range(1, k + 1)]
    train_counts = list(train_counts) if train_counts is not None else [None] * k
    rows = [
        {
            "class": str(i + 1),
            "name": names[i],
            "train": train_counts[i],
            "test": int(report.support[i]),
            "accuracy": round(100.0 * report.per_class_acc[i], 2) if report.support[i] else None,
        }
        for i in range(k)
    ]
    for label, value in (("OA", report.oa), ("AA", report.aa), ("Kappa", report.kappa)):
        rows.append({"class": label, "name": "", "train": None, "test": None, "accuracy": round(100.0 * value, 2)})
    table = pd.DataFrame(rows, columns=["class", "name", "train", "test", "accuracy"])
    return table.astype({"train": "Int64", "test": "Int64"})
