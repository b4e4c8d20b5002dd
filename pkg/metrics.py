"""
评估指标模块

傅里叶壳层相关（FSC）、MSE/PSNR/相关系数，以及缺失楔形一致性指标。
频率单位一律为 cycles/voxel，FFT 不补零。
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from config import DEFAULT_SHELL_WIDTH
from errors import DegenerateInputError, PreconditionError, ShapeMismatchError
from grid_core import ScalarField, _require_same_shape
from tomo_recon import WedgeMask

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FscCurve:
    """每个壳层的中心频率、相关值和样本数"""
    frequency: np.ndarray
    correlation: np.ndarray
    n_samples: np.ndarray

    def __len__(self) -> int:
        return len(self.frequency)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'frequency': self.frequency,
            'correlation': self.correlation,
            'n_samples': self.n_samples.astype(np.int64),
        })

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.8g')
        logger.info(f"FSC 曲线已保存: {path}")
        return path


def radial_frequency(shape) -> np.ndarray:
    """fftn 排列下每个频率点的径向频率（cycles/voxel）"""
    grids = np.meshgrid(*[np.fft.fftfreq(n) for n in shape], indexing='ij')
    return np.sqrt(sum(g * g for g in grids))


def fsc(v1: ScalarField, v2: ScalarField, shell_width: float = DEFAULT_SHELL_WIDTH) -> FscCurve:
    """
    傅里叶壳层相关

    壳层 s 的相关值 = Re(Σ F1·conj(F2)) / sqrt(Σ|F1|²·Σ|F2|²)。
    壳层序号 = rint(r·n_ref/shell_width)，n_ref 为最短边，截止到 Nyquist；
    不做去均值，DC 单独占第 0 个壳层。范数为 0 的壳层相关值记为 0。
    """
    _require_same_shape(v1, v2)
    if shell_width <= 0:
        raise PreconditionError(f"shell_width 必须为正: {shell_width}")
    a = v1.data.astype(np.float64)
    b = v2.data.astype(np.float64)
    if not np.any(a) or not np.any(b):
        raise DegenerateInputError("输入体数据全为 0，FSC 无定义")

    f1 = np.fft.fftn(a).ravel()
    f2 = np.fft.fftn(b).ravel()
    n_ref = min(v1.shape)
    shells = np.rint(radial_frequency(v1.shape).ravel() * n_ref / shell_width).astype(np.int64)
    n_shells = int(np.rint(0.5 * n_ref / shell_width)) + 1
    keep = shells < n_shells

    cross = np.bincount(shells[keep], (f1[keep] * np.conj(f2[keep])).real, minlength=n_shells)
    norm1 = np.bincount(shells[keep], np.abs(f1[keep]) ** 2, minlength=n_shells)
    norm2 = np.bincount(shells[keep], np.abs(f2[keep]) ** 2, minlength=n_shells)
    counts = np.bincount(shells[keep], minlength=n_shells)

    denom = np.sqrt(norm1 * norm2)
    correlation = np.zeros(n_shells, dtype=np.float64)
    nonzero = denom > 0
    correlation[nonzero] = np.clip(cross[nonzero] / denom[nonzero], -1.0, 1.0)

    frequency = np.arange(n_shells) * shell_width / n_ref
    return FscCurve(frequency=frequency, correlation=correlation, n_samples=counts)


def mse(pred: ScalarField, truth: ScalarField) -> float:
    _require_same_shape(pred, truth)
    diff = pred.data.astype(np.float64) - truth.data.astype(np.float64)
    return float(np.mean(diff * diff))


def psnr(pred: ScalarField, truth: ScalarField, data_range: Optional[float] = None) -> float:
    """
    峰值信噪比（dB），动态范围缺省取 truth 的 max − min

    mse 为 0 时返回 +inf。
    """
    if data_range is None:
        data_range = float(truth.data.max()) - float(truth.data.min())
    if data_range <= 0:
        raise DegenerateInputError("truth 动态范围为 0，PSNR 无定义")
    error = mse(pred, truth)
    if error == 0.0:
        return float("inf")
    return float(20.0 * np.log10(data_range) - 10.0 * np.log10(error))


def correlation(a: ScalarField, b: ScalarField) -> float:
    """Pearson 相关系数"""
    _require_same_shape(a, b)
    x = a.data.astype(np.float64).ravel()
    y = b.data.astype(np.float64).ravel()
    x = x - x.mean()
    y = y - y.mean()
    denom = np.sqrt(np.dot(x, x) * np.dot(y, y))
    if denom == 0:
        raise DegenerateInputError("常数场的相关系数无定义")
    return float(np.dot(x, y) / denom)


def wedge_inconsistency(v: ScalarField, wedge: WedgeMask) -> float:
    """
    缺失楔形内的平均功率 / 已采样区域的平均功率（不含 DC）

    已采样: |kz| ≤ tan(half_angle)·|kx|，约定与 tomo_recon.WedgeMask 一致。
    """
    if v.ndim != 3:
        raise ShapeMismatchError(f"楔形指标需要三维体数据，实际 {v.ndim} 维")
    power = np.abs(np.fft.fftn(v.data.astype(np.float64))) ** 2
    sampled = wedge.sampled(v.shape)
    dc = np.zeros(v.shape, dtype=bool)
    dc[0, 0, 0] = True
    missing = ~sampled & ~dc
    present = sampled & ~dc
    if not missing.any() or not present.any():
        raise DegenerateInputError(f"半角 {wedge.half_angle}° 在 {v.shape} 上没有可比较的区域")
    reference = float(power[present].mean())
    if reference == 0.0:
        raise DegenerateInputError("已采样区域功率为 0")
    return float(power[missing].mean()) / reference
