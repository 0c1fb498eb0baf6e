"""
Confusion matrices, run logs and report tables.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .config import ABBREVIATIONS, NUM_CLASSES
from .tensor import load_tensor, save_tensor


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""
    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))

    @classmethod
    def from_predictions(cls, labels, predictions, num_classes=NUM_CLASSES):
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
        return cls(counts)

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def per_class_accuracy(self):
        """Recall per true class; NaN for classes with no evaluated samples."""
        support = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, np.diag(self.counts) / support, np.nan)

    def normalized(self):
        support = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, support, out=np.zeros(self.counts.shape), where=support > 0)

    def to_frame(self):
        return pd.DataFrame(self.counts, index=list(ABBREVIATIONS), columns=list(ABBREVIATIONS))

    def save(self, path):
        return save_tensor(path, self.counts.astype(np.float64))

    @classmethod
    def load(cls, path):
        return cls(np.rint(load_tensor(path).data).astype(np.int64))

    def plot(self, path, title=None):
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        rates = self.normalized()
        fig, ax = plt.subplots(figsize=(4.2, 3.8), dpi=120)
        ax.imshow(rates, cmap="Blues", vmin=0, vmax=1)
        for i in range(rates.shape[0]):
            for j in range(rates.shape[1]):
                ax.text(j, i, f"{rates[i, j] * 100:.1f}", ha="center", va="center", fontsize=7,
                        color="white" if rates[i, j] > 0.5 else "black")
        ax.set_xticks(range(NUM_CLASSES), ABBREVIATIONS)
        ax.set_yticks(range(NUM_CLASSES), ABBREVIATIONS)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
        return path


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class RunLog:
    """Per-epoch training curve, final held-out accuracies and the config echo."""
    epochs: list = field(default_factory=list)
    fold_accuracies: list = field(default_factory=list)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def add_epoch(self, epoch, loss, accuracy):
        assert 0.0 <= accuracy <= 1.0, f"accuracy {accuracy} outside [0, 1]"
        self.epochs.append(EpochRecord(epoch, float(loss), float(accuracy)))

    @property
    def losses(self):
        return [e.loss for e in self.epochs]

    def to_frame(self):
        return pd.DataFrame([vars(e) for e in self.epochs], columns=["epoch", "loss", "accuracy"])

    def same_curve(self, other):
        """Bit-level equality of the training curve and fold accuracies (wall time excluded)."""
        return self.epochs == other.epochs and self.fold_accuracies == other.fold_accuracies


def summary_text(rows, title):
    """Human-readable block: one line per row with mean +/- std and per-class accuracy."""
    lines = [title, "=" * len(title)]
    for row in rows:
        per_class = " ".join(f"{a}={row[a]:.3f}" for a in ABBREVIATIONS if a in row and not pd.isna(row[a]))
        lines.append(f"{row['name']:<28} {row['mean_accuracy'] * 100:6.2f} +/- {row['std_accuracy'] * 100:5.2f}"
                     + (f"   {per_class}" if per_class else ""))
    return "\n".join(lines) + "\n"


def write_table(rows, out_dir, stem, title=None):
    """Write `rows` (a list of flat dicts) as `<stem>.csv` and a `<stem>.txt` summary block."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows)
    csv_path = out_dir / f"{stem}.csv"
    frame.to_csv(csv_path, index=False)
    txt_path = out_dir / f"{stem}.txt"
    txt_path.write_text(summary_text(rows, title or stem))
    return csv_path, txt_path
