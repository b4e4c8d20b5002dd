"""
SVG 曲线绘制（FSC 曲线、precision-recall 曲线、训练损失）
"""
import logging
from pathlib import Path
from typing import Dict, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

# 关闭 SVG 中的日期和随机 id，保证重复运行输出一致
plt.rcParams['svg.hashsalt'] = 'cryocare'
plt.rcParams['svg.fonttype'] = 'none'

Series = Tuple[Sequence[float], Sequence[float]]


def save_line_plot(curves: Dict[str, Series], path: Union[str, Path], xlabel: str, ylabel: str,
                   title: str = "", ylim: Tuple[float, float] = None, marker: str = None) -> Path:
    """把若干条曲线画到同一坐标系并保存为 SVG"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        for name, (x, y) in curves.items():
            ax.plot(list(x), list(y), label=name, marker=marker)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if ylim is not None:
            ax.set_ylim(*ylim)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format='svg', metadata={'Date': None})
    finally:
        plt.close(fig)
    logger.info(f"图已保存: {path}")
    return path


def plot_fsc(curves: Dict[str, "FscCurve"], path: Union[str, Path]) -> Path:
    return save_line_plot(
        {name: (c.frequency, c.correlation) for name, c in curves.items()},
        path, xlabel="spatial frequency (1/voxel)", ylabel="FSC", title="Fourier shell correlation",
        ylim=(-0.2, 1.05),
    )


def plot_precision_recall(reports: Dict[str, "DetectionReport"], path: Union[str, Path]) -> Path:
    curves = {}
    for name, report in reports.items():
        frame = report.to_frame()
        curves[name] = (frame['recall'], frame['precision'])
    return save_line_plot(curves, path, xlabel="recall", ylabel="precision",
                          title="precision-recall over size thresholds", ylim=(0.0, 1.05), marker='o')


def plot_history(history: "TrainHistory", path: Union[str, Path]) -> Path:
    frame = history.to_frame()
    return save_line_plot(
        {"train": (frame['epoch'], frame['train_loss']), "validation": (frame['epoch'], frame['val_loss'])},
        path, xlabel="epoch", ylabel="MSE", title="training history",
    )
