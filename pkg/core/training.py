"""
Training module
Supervision strategies (rad, auto, hybrid), frozen-encoder baselines and
dev-F1 checkpoint selection
"""

import json
import os
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import torch
from pydantic import BaseModel
from tqdm import tqdm

from config.settings import AUTO_MAX_EPOCHS
from core.corpus import Dataset, Split
from core.errors import AllUndefinedError, ConfigError, DataError
from core.evaluation import evaluate
from core.label_schema import LabelVector
from core.model import (
    FreezeMode,
    HeadInputMode,
    HyperParams,
    MultiHeadClassifier,
    collate,
    compute_loss,
    forward,
    gold_targets,
    predict_texts,
    restore_checkpoint,
    save_checkpoint,
    tokenize_and_truncate,
)
from utils.logger import setup_logger

logger = setup_logger(__name__)


class StrategyKind(str, Enum):
    RAD = 'rad'
    AUTO = 'auto'
    HYBRID = 'hybrid'


class Baseline(str, Enum):
    T_CLS = 't_cls'
    T_TOKEN = 't_token'
    FULL = 'full'


@dataclass
class Checkpoint:
    """Best weights of a phase, in memory and optionally on disk"""
    state: Dict[str, torch.Tensor]
    phase: str
    step: int
    dev_f1: float
    path: Optional[str] = None


@dataclass
class TrainStrategy:
    kind: StrategyKind
    rad_data: Optional[Dataset] = None
    auto_data: Optional[Dataset] = None
    # Replaces the auto phase of a hybrid run: a checkpoint directory or an in-memory Checkpoint
    init_checkpoint: Optional[Union[str, Checkpoint]] = None
    auto_max_epochs: int = AUTO_MAX_EPOCHS

    def check(self) -> None:
        kind = StrategyKind(self.kind)
        if kind in (StrategyKind.RAD, StrategyKind.HYBRID) and self.rad_data is None:
            raise ConfigError(f"strategy kind '{kind.value}' requires rad_data")
        if kind is StrategyKind.AUTO and self.auto_data is None:
            raise ConfigError("strategy kind 'auto' requires auto_data")
        if kind is StrategyKind.HYBRID and self.auto_data is None and self.init_checkpoint is None:
            raise ConfigError("strategy kind 'hybrid' requires auto_data or init_checkpoint")
        if kind is not StrategyKind.HYBRID and self.init_checkpoint is not None:
            raise ConfigError(f"init_checkpoint only applies to hybrid runs, not '{kind.value}'")


class HistoryRecord(BaseModel):
    phase: str
    epoch: int
    step: int
    loss: float
    dev_f1_macro: float
    dev_f1: Dict[str, Optional[float]]


@dataclass
class TrainRun:
    history: List[HistoryRecord]
    best_checkpoint: Checkpoint
    best_dev_f1: float
    # The auto phase of a hybrid run
    auto_run: Optional['TrainRun'] = None


@dataclass
class _PhaseData:
    tokens: List[List[int]]
    targets: torch.Tensor
    dev_texts: List[str]
    dev_gold: List[LabelVector] = field(default_factory=list)


def apply_freeze(model: MultiHeadClassifier, baseline: Baseline) -> MultiHeadClassifier:
    """
    Configure one of the frozen-encoder baselines

    Args:
        model: Initialized classifier
        baseline: t_cls (frozen encoder, CLS input), t_token (frozen encoder,
            mean of non-padding tokens) or full (no freezing)

    Returns:
        The same model, configured in place
    """
    baseline = Baseline(baseline)
    if baseline is Baseline.T_CLS:
        model.set_freeze_mode(FreezeMode.ENCODER_FROZEN)
        model.head_input_mode = HeadInputMode.CLS
    elif baseline is Baseline.T_TOKEN:
        model.set_freeze_mode(FreezeMode.ENCODER_FROZEN)
        model.head_input_mode = HeadInputMode.TOKEN_AVERAGE
    logger.info(f"Baseline '{baseline.value}': freeze_mode={model.freeze_mode.value}, "
                f"head_input_mode={model.head_input_mode.value}")
    return model


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


class TrainingEngine:
    """Runs one training phase: Adam on the train split, dev-F1 checkpoint selection"""

    def __init__(self, model: MultiHeadClassifier, hp: HyperParams, run_dir: Optional[str] = None):
        self.model = model
        self.hp = hp
        self.run_dir = run_dir
        self.data: Optional[_PhaseData] = None

    def set_data(self, ds: Dataset) -> None:
        """
        Set training data

        Args:
            ds: Dataset with a train/dev split, neither side empty
        """
        if ds is None or len(ds) == 0:
            logger.error("No data provided for training")
            raise DataError("No data provided for training")
        if ds.split is None:
            logger.error("Training data has no train/dev split")
            raise DataError("Training data must carry a train/dev split")
        train, dev = ds.subset(Split.TRAIN), ds.subset(Split.DEV)
        if len(train) == 0 or len(dev) == 0:
            logger.error(f"Empty split: {len(train)} train / {len(dev)} dev")
            raise DataError(f"Empty split: {len(train)} train / {len(dev)} dev")

        encoder = self.model.encoder
        self.data = _PhaseData(
            tokens=[tokenize_and_truncate(encoder, text) for text in train.texts],
            targets=gold_targets(train.label_vectors),
            dev_texts=dev.texts,
            dev_gold=dev.label_vectors,
        )
        logger.info(f"Training data: {len(train)} train / {len(dev)} dev reports")

    def evaluate_dev(self) -> tuple:
        """Macro weighted F1 on the dev split, plus the per-condition scores"""
        preds = predict_texts(self.model, self.data.dev_texts, self.hp.batch_size)
        try:
            report = evaluate(preds, self.data.dev_gold, with_ci=False)
        except AllUndefinedError:
            logger.warning("Dev set has no defined condition score; counting macro F1 as 0")
            return 0.0, {}
        return report.macro_f1, {score.condition: score.weighted_f1 for score in report.per_condition}

    def _snapshot(self, phase: str, step: int, dev_f1: float) -> Checkpoint:
        state = {name: tensor.detach().clone() for name, tensor in self.model.state_dict().items()}
        path = None
        if self.run_dir:
            path = save_checkpoint(self.model, os.path.join(self.run_dir, 'checkpoints', f'{phase}-best'))
        return Checkpoint(state=state, phase=phase, step=step, dev_f1=dev_f1, path=path)

    def _log_record(self, record: HistoryRecord) -> None:
        logger.info(f"[{record.phase}] epoch {record.epoch} step {record.step}: "
                    f"loss {record.loss:.4f}, dev macro F1 {record.dev_f1_macro:.4f}")
        if self.run_dir:
            os.makedirs(self.run_dir, exist_ok=True)
            with open(os.path.join(self.run_dir, 'history.jsonl'), 'a', encoding='utf-8') as f:
                f.write(json.dumps(record.model_dump()) + '\n')

    def run(self, phase: str, max_epochs: int, patience: Optional[int]) -> TrainRun:
        """
        Train for up to max_epochs, evaluating every eval_every steps and at
        every epoch end

        Returns:
            TrainRun; the model is left holding the best checkpoint's weights
        """
        if self.data is None:
            raise DataError("set_data must be called before run")
        hp = self.hp
        seed_everything(hp.seed)
        generator = torch.Generator().manual_seed(hp.seed)
        params = [param for param in self.model.parameters() if param.requires_grad]
        optimizer = torch.optim.Adam(params, lr=hp.learning_rate)
        device = next(self.model.parameters()).device
        pad_id = self.model.encoder.pad_token_id
        n_train = len(self.data.tokens)

        history: List[HistoryRecord] = []
        best: Optional[Checkpoint] = None
        stale = 0
        step = 0
        losses: List[float] = []
        stop = False
        logger.info(f"Starting phase '{phase}': {max_epochs} epochs max, lr {hp.learning_rate}, "
                    f"batch {hp.batch_size}, {len(params)} trainable tensors")

        def checkpoint(epoch: int) -> bool:
            nonlocal best, stale, losses
            dev_f1, per_condition = self.evaluate_dev()
            record = HistoryRecord(
                phase=phase, epoch=epoch, step=step,
                loss=float(np.mean(losses)) if losses else float('nan'),
                dev_f1_macro=dev_f1, dev_f1=per_condition,
            )
            history.append(record)
            self._log_record(record)
            losses = []
            if best is None or dev_f1 > best.dev_f1:
                best = self._snapshot(phase, step, dev_f1)
                stale = 0
                logger.info(f"[{phase}] new best dev macro F1 {dev_f1:.4f} at step {step}")
                return False
            stale += 1
            return patience is not None and stale >= patience

        for epoch in range(1, max_epochs + 1):
            self.model.train()
            order = torch.randperm(n_train, generator=generator).tolist()
            batches = range(0, n_train, hp.batch_size)
            evaluated_at = -1
            for start in tqdm(batches, desc=f"{phase} epoch {epoch}", leave=False, disable=None):
                idx = order[start:start + hp.batch_size]
                batch = collate([self.data.tokens[i] for i in idx], pad_id)
                optimizer.zero_grad()
                batch_loss = compute_loss(forward(self.model, batch), self.data.targets[idx].to(device))
                batch_loss.backward()
                optimizer.step()
                losses.append(batch_loss.item())
                step += 1
                if step % hp.eval_every == 0:
                    evaluated_at = step
                    if checkpoint(epoch):
                        stop = True
                        break
            if not stop and evaluated_at != step:
                stop = checkpoint(epoch)
            if stop:
                logger.info(f"[{phase}] no dev improvement for {patience} evaluations; stopping at epoch {epoch}")
                break

        self.model.load_state_dict(best.state)
        logger.info(f"Phase '{phase}' done: best dev macro F1 {best.dev_f1:.4f} at step {best.step}")
        return TrainRun(history=history, best_checkpoint=best, best_dev_f1=best.dev_f1)


def train(model: MultiHeadClassifier,
          strategy: TrainStrategy,
          hp: HyperParams,
          run_dir: Optional[str] = None,
          on_phase_start: Optional[Callable[[str, MultiHeadClassifier], None]] = None) -> TrainRun:
    """
    Train with one of the supervision strategies

    Args:
        model: Classifier, trained in place
        strategy: rad (expert labels), auto (automatic labels) or hybrid (auto then rad)
        hp: Hyperparameters of the rad phase; the auto phase uses the same
            values with strategy.auto_max_epochs and no early stopping
        run_dir: Optional directory for history.jsonl and best checkpoints
        on_phase_start: Called with (phase, model) right before each phase's first step

    Returns:
        TrainRun of the final phase; for hybrid runs the auto phase is in auto_run
    """
    strategy.check()
    kind = StrategyKind(strategy.kind)
    auto_hp = hp.model_copy(update={'max_epochs': strategy.auto_max_epochs, 'patience': None})

    def run_phase(phase: str, ds: Dataset, phase_hp: HyperParams) -> TrainRun:
        engine = TrainingEngine(model, phase_hp, run_dir)
        engine.set_data(ds)
        if on_phase_start is not None:
            on_phase_start(phase, model)
        return engine.run(phase, phase_hp.max_epochs, phase_hp.patience)

    if kind is StrategyKind.RAD:
        return run_phase('rad', strategy.rad_data, hp)
    if kind is StrategyKind.AUTO:
        return run_phase('auto', strategy.auto_data, auto_hp)

    auto_run = None
    if strategy.init_checkpoint is not None:
        source = strategy.init_checkpoint
        logger.info(f"Hybrid run: skipping the auto phase, loading "
                    f"{source if isinstance(source, str) else 'in-memory checkpoint'}")
        restore_checkpoint(model, source.state if isinstance(source, Checkpoint) else source)
    else:
        auto_run = run_phase('auto', strategy.auto_data, auto_hp)
        # The auto phase already left its best weights in the model
    rad_run = run_phase('rad', strategy.rad_data, hp)
    rad_run.auto_run = auto_run
    return rad_run
