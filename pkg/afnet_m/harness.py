"""
Training, subject-disjoint k-fold cross-validation and ablation sweeps.

    model, log = train(model_config, train_config, samples)
    accuracy, confusion = evaluate(model, held_out)
    result = run_protocol(model_config, train_config, samples, repeats=1, k=10)
    rows = ablate(samples, "fusion_strategy", model_config, train_config)

Every random choice (fold assignment, batch order, parameter init) is drawn from a generator
seeded from the configs, so the same inputs reproduce every reported number.
"""
import time
from dataclasses import dataclass, field

import numpy as np
from ml_logger import logger
from tqdm import tqdm

from . import functional as F
from .config import ABBREVIATIONS, FusionStrategy, ModelConfig
from .data import make_batch
from .errors import ConfigError, DataError
from .model import AFNetM
from .nn import BatchNorm2d
from .optim import AdamState, adam_step, derive_seed, rng, zero_grad
from .reports import ConfusionMatrix, RunLog
from .tensor import Tape, backward


@dataclass
class FoldPlan:
    k: int
    folds: list
    seed: int

    def __post_init__(self):
        seen = [s for fold in self.folds for s in fold]
        assert len(seen) == len(set(seen)), "folds must be pairwise disjoint"

    @property
    def subjects(self):
        return sorted(s for fold in self.folds for s in fold)

    def split(self, samples, index):
        """(train, held-out) samples for rotation `index`; a subject never lands on both sides."""
        held_out = set(self.folds[index])
        train = [s for s in samples if s.subject_id not in held_out]
        test = [s for s in samples if s.subject_id in held_out]
        return train, test


def build_folds(subject_ids, k, seed=0):
    """Seeded shuffle of the distinct subject ids, then round-robin assignment to k folds."""
    subjects = np.unique(np.asarray(list(subject_ids), dtype=np.int64))
    if k < 2:
        raise ConfigError(f"k-fold needs k >= 2, got {k}")
    if k > len(subjects):
        raise ConfigError(f"cannot split {len(subjects)} subjects into {k} folds")
    order = rng(derive_seed(seed, "folds")).permutation(subjects)
    folds = [tuple(int(s) for s in order[i::k]) for i in range(k)]
    return FoldPlan(k=k, folds=folds, seed=seed)


def batch_indices(n, batch_size, generator=None):
    """Index batches, shuffled when a generator is given; a trailing batch of one sample joins the batch before it."""
    order = np.arange(n) if generator is None else generator.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def train(model_config: ModelConfig, train_config, train_set, verbose=False, model=None):
    """Adam on the mean cross-entropy, for `train_config.epochs` passes over `train_set`.

    :param model: continue training this model instead of a fresh `AFNetM(model_config)`
    :return: (trained model, RunLog)
    """
    if len(train_set) < 2:
        raise DataError(f"training needs at least 2 samples, got {len(train_set)}")
    train_config.validate()
    model = model or AFNetM(model_config)
    model.train()
    state = AdamState(learning_rate=train_config.learning_rate, beta1=train_config.beta1,
                      beta2=train_config.beta2, epsilon=train_config.epsilon)
    params = model.parameters()
    order = rng(derive_seed(train_config.seed, "batches"))
    log = RunLog(config=dict(model=model_config.to_dict(), train=train_config.to_dict()))
    start = time.perf_counter()

    for epoch in range(train_config.epochs):
        total_loss, correct, seen = 0.0, 0, 0
        for idx in batch_indices(len(train_set), train_config.batch_size, order):
            batch = make_batch([train_set[i] for i in idx], model_config)
            with Tape() as tape:
                logits = model(batch.texture, batch.depth, batch.masks)
                loss, probs = F.softmax_cross_entropy(logits, batch.labels)
            backward(tape, loss)
            adam_step(params, state)
            zero_grad(params)

            total_loss += loss.item() * len(batch)
            correct += int((probs.argmax(axis=1) == batch.labels).sum())
            seen += len(batch)
        log.add_epoch(epoch, total_loss / seen, correct / seen)
        if verbose:
            logger.log(epoch=epoch, loss=total_loss / seen, accuracy=correct / seen, flush=True)
            logger.print(f"epoch {epoch}: loss {total_loss / seen:.4f} accuracy {correct / seen:.3f}")

    recalibrate_batchnorm(model, train_set, train_config.batch_size)
    log.wall_time = time.perf_counter() - start
    return model, log


def recalibrate_batchnorm(model, samples, batch_size):
    """Replace every batchnorm running average with the exact moments of `samples`.

    The forward passes run in training mode with the batch size training used. Parameters are not touched.
    """
    layers = [m for _, m in model.named_modules() if isinstance(m, BatchNorm2d)]
    was_training = model.training
    for layer in layers:
        layer.stats.start_census()
    model.train()
    try:
        for idx in batch_indices(len(samples), batch_size):
            batch = make_batch([samples[i] for i in idx], model.config)
            model(batch.texture, batch.depth, batch.masks)
    finally:
        for layer in layers:
            layer.stats.end_census()
        model.train(was_training)
    return model


def predict(model, samples, batch_size=32):
    """Argmax class per sample (lowest index on ties), in eval mode and without a tape."""
    was_training = model.training
    model.eval()
    try:
        predictions = []
        for i in range(0, len(samples), batch_size):
            batch = make_batch(samples[i:i + batch_size], model.config)
            logits = model(batch.texture, batch.depth, batch.masks)
            predictions.append(np.argmax(logits.data, axis=1))
    finally:
        model.train(was_training)
    return np.concatenate(predictions)


def evaluate(model, eval_set, batch_size=32):
    """:return: (accuracy, ConfusionMatrix) with accuracy = trace / total."""
    if not eval_set:
        raise DataError("cannot evaluate on an empty set")
    labels = np.asarray([s.label for s in eval_set], dtype=np.int64)
    confusion = ConfusionMatrix.from_predictions(labels, predict(model, eval_set, batch_size),
                                                 num_classes=model.config.num_classes)
    return confusion.accuracy, confusion


@dataclass
class ProtocolResult:
    mean_accuracy: float
    std_accuracy: float
    fold_accuracies: list
    confusion: ConfusionMatrix
    logs: list = field(default_factory=list)

    def row(self, name, config):
        per_class = dict(zip(ABBREVIATIONS, self.confusion.per_class_accuracy()))
        echo = {k: (",".join(str(x) for x in v) if isinstance(v, (tuple, list)) else v)
                for k, v in config.to_dict().items()}
        return dict(name=name, mean_accuracy=self.mean_accuracy, std_accuracy=self.std_accuracy,
                    folds=len(self.fold_accuracies), **per_class, **echo)


def run_protocol(model_config, train_config, dataset, repeats=1, k=10, verbose=False):
    """`repeats` rounds of subject-disjoint k-fold cross-validation.

    Repeat r uses the fold plan seeded with `train_config.seed + r`; each rotation trains a fresh
    model whose parameters and batch order are seeded from (seed, r, fold).
    """
    subjects = sorted({s.subject_id for s in dataset})
    accuracies, logs = [], []
    confusion = ConfusionMatrix(np.zeros((model_config.num_classes,) * 2, dtype=np.int64))
    rotations = [(r, i) for r in range(repeats) for i in range(k)]
    plans = {r: build_folds(subjects, k, seed=train_config.seed + r) for r in range(repeats)}
    for r, i in (tqdm(rotations, desc="folds", leave=False) if verbose else rotations):
        train_set, test_set = plans[r].split(dataset, i)
        fold_model = model_config.replace(seed=derive_seed(model_config.seed, r, i))
        fold_train = train_config.replace(seed=derive_seed(train_config.seed, r, i))
        model, log = train(fold_model, fold_train, train_set)
        accuracy, matrix = evaluate(model, test_set)
        log.fold_accuracies.append(accuracy)
        accuracies.append(accuracy)
        logs.append(log)
        confusion = confusion + matrix
        if verbose:
            logger.print(f"repeat {r} fold {i}: accuracy {accuracy:.4f}")
    result = ProtocolResult(mean_accuracy=float(np.mean(accuracies)), std_accuracy=float(np.std(accuracies)),
                            fold_accuracies=accuracies, confusion=confusion, logs=logs)
    if verbose:
        logger.print(f"{repeats}x{k}-fold accuracy: {result.mean_accuracy * 100:.2f} "
                     f"+/- {result.std_accuracy * 100:.2f}")
    return result


# ---------------------------------------------------------------------------------------------
# ablation axes

AXES = {
    "fusion_strategy": "fusion_strategy",
    "fusion": "fusion_strategy",
    "ma_and_modality": "ma_and_modality",
    "ma": "ma_and_modality",
    "fusion_positions": "fusion_positions",
    "positions": "fusion_positions",
}
POSITION_SETS = ((3,), (4,), (3, 4), (2, 3, 4), (1, 2, 3, 4))
MODALITY_NAMES = {"texture": "2D", "depth": "3D", "both": "2D+3D"}


def ablation_configs(axis, base: ModelConfig):
    """(row name, ModelConfig) pairs for one ablation axis."""
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {', '.join(AXES)}")
    axis = AXES[axis]
    if axis == "fusion_strategy":
        return [(s.value, base.replace(modality="both", fusion_strategy=s, ma_enabled=False))
                for s in FusionStrategy]
    if axis == "ma_and_modality":
        return [(MODALITY_NAMES[m] + (" +MA" if ma else ""), base.replace(modality=m, ma_enabled=ma))
                for m in ("texture", "depth", "both") for ma in (False, True)]
    return [("L" + "+L".join(str(p) for p in ps),
             base.replace(modality="both", fusion_strategy=FusionStrategy.CONV_ADAPTIVE, fusion_positions=ps))
            for ps in POSITION_SETS]


def ablate(dataset, axis, model_config, train_config, repeats=1, k=10, verbose=False):
    """One `run_protocol` per configuration on `axis`; returns the report rows in axis order."""
    rows = []
    for name, config in ablation_configs(axis, model_config):
        result = run_protocol(config, train_config, dataset, repeats=repeats, k=k)
        rows.append(result.row(name, config))
        if verbose:
            logger.print(f"{axis} {name}: {result.mean_accuracy * 100:.2f} +/- {result.std_accuracy * 100:.2f}")
    return rows
