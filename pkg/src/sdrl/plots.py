"""Render SVG curves from run metric CSVs.

Both CSV layouts written by the training loops are recognized by header;
figures land next to the CSV unless an output directory is given.
"""

import csv
from pathlib import Path
from typing import Dict, List, Optional

from .errors import ConfigInvalid, DataMissing


def _read_csv(path) -> Dict[str, List[float]]:
    path = Path(path)
    if not path.exists():
        raise DataMissing(f"csv not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigInvalid(f"{path}: empty csv")
        columns: Dict[str, List[float]] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name in reader.fieldnames:
                columns[name].append(float(row[name]))
    return columns


def _figure(n_axes: int):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, n_axes, figsize=(5.0 * n_axes, 3.4))
    return fig, ([axes] if n_axes == 1 else list(axes))


def render_pretrain(csv_path, out_dir=None) -> Path:
    """Loss components and the collapse statistic against training step."""
    cols = _read_csv(csv_path)
    needed = {"step", "l_sd", "l_s", "total", "collapse_stat"}
    missing = needed - set(cols)
    if missing:
        raise ConfigInvalid(f"{csv_path}: missing columns {sorted(missing)}")
    fig, (ax_loss, ax_col) = _figure(2)
    steps = cols["step"]
    ax_loss.plot(steps, cols["total"], label="total", color="black")
    ax_loss.plot(steps, cols["l_sd"], label="dissimilarity", color="tab:red")
    ax_loss.plot(steps, cols["l_s"], label="cross-view", color="tab:blue")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_col.plot(steps, cols["collapse_stat"], color="tab:green")
    ax_col.set_xlabel("step")
    ax_col.set_ylabel("collapse statistic")
    ax_col.set_ylim(bottom=0.0)
    return _save(fig, csv_path, out_dir, "pretrain_curves.svg")


def render_finetune(csv_path, out_dir=None) -> Path:
    """Training loss and validation F1 metrics against epoch."""
    cols = _read_csv(csv_path)
    needed = {"epoch", "train_loss", "val_f1", "mean_f1"}
    missing = needed - set(cols)
    if missing:
        raise ConfigInvalid(f"{csv_path}: missing columns {sorted(missing)}")
    fig, (ax_loss, ax_f1) = _figure(2)
    epochs = cols["epoch"]
    ax_loss.plot(epochs, cols["train_loss"], color="black")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_f1.plot(epochs, cols["val_f1"], label="change F1", color="tab:red")
    ax_f1.plot(epochs, cols["mean_f1"], label="mean F1", color="tab:blue")
    ax_f1.set_xlabel("epoch")
    ax_f1.set_ylabel("validation F1")
    ax_f1.set_ylim(0.0, 1.0)
    ax_f1.legend()
    return _save(fig, csv_path, out_dir, "finetune_curves.svg")


def _save(fig, csv_path, out_dir, name: str) -> Path:
    out_dir = Path(out_dir) if out_dir is not None else Path(csv_path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / name
    fig.tight_layout()
    fig.savefig(out, format="svg")
    import matplotlib.pyplot as plt

    plt.close(fig)
    return out


def render(csv_path, out_dir: Optional[str] = None) -> Path:
    """Dispatch on the CSV header to the matching renderer."""
    if not Path(csv_path).exists():
        raise DataMissing(f"csv not found: {csv_path}")
    with open(csv_path, newline="") as fh:
        header = fh.readline().strip().split(",")
    if "collapse_stat" in header:
        return render_pretrain(csv_path, out_dir)
    if "mean_f1" in header:
        return render_finetune(csv_path, out_dir)
    raise ConfigInvalid(f"{csv_path}: header matches neither metrics layout")
