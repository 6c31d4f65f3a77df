# services/trainer.py

import math
import time
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from services.autograd import Tensor, new_tape
from services.cube_service import HsiCube, extract_batch
from services.evaluator import evaluate
from services.layers import cross_entropy
from services.optimizer import AdamState
from services.sdmamba_model import SdmambaConfig, SdmambaModel
from services.split_service import SampleSplit, check_split_fits
from utils.error_handler import ContractError, DivergenceError

HISTORY_COLUMNS = ["epoch", "loss", "val_oa", "val_aa", "val_kappa"]

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


class TrainResult(NamedTuple):
    model: SdmambaModel
    history: pd.DataFrame
    best_epoch: int
    first_loss: float


def _first_non_finite_parameter(model: SdmambaModel) -> Optional[str]:
    for name, tensor in model.named_parameters().items():
        if not np.all(np.isfinite(tensor.data)):
            return name
        if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
            return name
    return None


def train_step(model: SdmambaModel, optimizer: AdamState, patches: np.ndarray, targets: np.ndarray) -> float:
    """One forward/backward/update on a batch; `targets` are 0-based class indices."""
    with new_tape():
        logits = model.forward(Tensor(patches))
        loss = cross_entropy(logits, targets)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(
                f"non-finite loss {value}",
                parameter=_first_non_finite_parameter(model) or "none (parameters finite)",
            )
        loss.backward()
    bad = _first_non_finite_parameter(model)
    if bad is not None:
        raise DivergenceError(f"non-finite gradient in '{bad}'", parameter=bad)
    optimizer.step()
    optimizer.zero_grad()
    return value


def train(
    model: SdmambaModel,
    cube: HsiCube,
    split: SampleSplit,
    config: Optional[SdmambaConfig] = None,
    progress: bool = False,
) -> TrainResult:
    """Adam on center-pixel cross-entropy; the best validation-OA weights are restored at the end."""
    config = config or model.config
    if cube.bands != config.in_bands:
        raise ContractError(f"cube has {cube.bands} bands but the config expects {config.in_bands}")
    if len(split.train) == 0:
        raise ContractError("training set is empty")
    check_split_fits(split, cube)

    rng = np.random.default_rng(config.seed)
    optimizer = AdamState(model.named_parameters(), lr=config.learning_rate)
    train_coords = np.asarray(split.train, dtype=np.int64)
    train_labels = cube.labels[train_coords[:, 0], train_coords[:, 1]].astype(np.int64)

    history = []
    best_state = None
    best_oa = -1.0
    best_epoch = 0
    first_loss = float("nan")

    _log_if_available('log_step', 'Training', f'{len(train_coords)} samples, {config.epochs} epochs, '
                      f'batch {config.batch_size}, lr {config.learning_rate}')
    for epoch in range(1, config.epochs + 1):
        start = time.time()
        model.train()
        order = rng.permutation(len(train_coords))
        losses, weights = [], []
        batches = range(0, len(order), config.batch_size)
        for offset in tqdm(batches, desc=f"epoch {epoch}/{config.epochs}", disable=not progress, leave=False):
            idx = order[offset:offset + config.batch_size]
            patches = extract_batch(cube, train_coords[idx], config.patch_size)
            try:
                value = train_step(model, optimizer, patches, train_labels[idx] - 1)
            except DivergenceError as e:
                e.details.update({"epoch": epoch, "step": offset // config.batch_size + 1})
                _log_if_available('log_error', f'Training diverged: {e}', e)
                raise
            if epoch == 1 and offset == 0:
                first_loss = value
            losses.append(value)
            weights.append(len(idx))
        epoch_loss = float(np.average(losses, weights=weights))

        if len(split.val):
            report = evaluate(model, cube, split.val)
            val = (report.oa, report.aa, report.kappa)
        else:
            report = None
            val = (float("nan"),) * 3
        history.append((epoch, epoch_loss) + val)
        _log_if_available('log_epoch', epoch, epoch_loss, report)
        _log_if_available('log_performance_metric', f'epoch {epoch} time', round(time.time() - start, 3), 's')

        score = val[0] if report is not None else -epoch_loss
        if best_state is None or score > best_oa:
            best_oa = score
            best_state = model.state_dict()
            best_epoch = epoch

    model.load_state_dict(best_state)
    model.eval()
    _log_if_available('log_step', 'Training', f'best epoch {best_epoch}', 'COMPLETED')
    return TrainResult(
        model=model,
        history=pd.DataFrame(history, columns=HISTORY_COLUMNS),
        best_epoch=best_epoch,
        first_loss=first_loss,
    )


def save_history(history: pd.DataFrame, path: Path) -> Path:
    """One `epoch,loss,val_oa,val_aa,val_kappa` line per epoch, no header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history[HISTORY_COLUMNS].to_csv(path, header=False, index=False, float_format="%.6f", lineterminator="\n")
    _log_if_available('log_file_operation', 'WRITE', str(path), f'{len(history)} epochs')
    return path


def load_history(path: Path) -> pd.DataFrame:
    return pd.read_csv(Path(path), header=None, names=HISTORY_COLUMNS)
