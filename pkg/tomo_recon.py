"""
断层重建模块（加权反投影）

斜坡滤波 + 反投影，几何约定与 phantom_sim 一致：倾转轴为 y，电子束沿 z。
反投影正好是投影算子的转置，并按 π/n_angles 归一化。
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import InvalidFieldError, PreconditionError, ShapeMismatchError
from grid_core import ScalarField
from phantom_sim import projection_operator
from utils import chunk_ranges, parallel_map

logger = logging.getLogger(__name__)

WINDOWS = ("none", "hann")
PADDINGS = ("none", "zero")
SLAB_ROWS = 8


@dataclass(frozen=True, eq=False)
class Tilt:
    """单个倾转角的投影"""
    angle: float
    projection: ScalarField
    acquisition_index: int


@dataclass(frozen=True, eq=False)
class TiltSeries:
    """按角度严格升序排列的倾转序列，所有投影同形状"""
    tilts: Tuple[Tilt, ...]

    def __post_init__(self):
        tilts = tuple(sorted(self.tilts, key=lambda t: t.angle))
        angles = [t.angle for t in tilts]
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise InvalidFieldError(f"倾转角必须严格递增（不能重复）: {angles}")
        shapes = {t.projection.shape for t in tilts}
        if len(shapes) > 1:
            raise InvalidFieldError(f"所有投影必须同形状: {shapes}")
        object.__setattr__(self, 'tilts', tilts)

    def __len__(self) -> int:
        return len(self.tilts)

    @property
    def angles(self) -> List[float]:
        return [t.angle for t in self.tilts]

    @property
    def acquisition_indices(self) -> List[int]:
        return [t.acquisition_index for t in self.tilts]

    @property
    def projection_shape(self) -> Tuple[int, int]:
        if not self.tilts:
            raise PreconditionError("倾转序列为空")
        return self.tilts[0].projection.shape

    @classmethod
    def from_projections(cls, angles: Sequence[float], projections: Sequence[ScalarField],
                         acquisition_indices: Optional[Sequence[int]] = None) -> "TiltSeries":
        if len(angles) != len(projections):
            raise ShapeMismatchError(f"角度数 {len(angles)} 与投影数 {len(projections)} 不一致")
        if acquisition_indices is None:
            acquisition_indices = range(len(angles))
        return cls(tuple(Tilt(float(a), p, int(i))
                         for a, p, i in zip(angles, projections, acquisition_indices)))


@dataclass(frozen=True)
class WedgeMask:
    """
    采样区域的傅里叶掩膜

    频率 (kz, ky, kx) 在 |kz| ≤ tan(half_angle)·|kx| 时视为已采样；
    缺失楔形包围 kz 轴，ky 不受限制。kx = kz = 0 的点算作已采样。
    """
    half_angle: float

    def __post_init__(self):
        if not 0.0 < self.half_angle < 90.0:
            raise PreconditionError(f"楔形半角必须位于 (0°, 90°): {self.half_angle}")

    @classmethod
    def from_angles(cls, angles: Sequence[float]) -> "WedgeMask":
        return cls(float(max(abs(a) for a in angles)))

    def sampled(self, shape: Tuple[int, int, int]) -> np.ndarray:
        """返回 fftn 频率排列下的布尔掩膜"""
        if len(shape) != 3:
            raise PreconditionError(f"楔形掩膜需要三维形状: {shape}")
        kz = np.fft.fftfreq(shape[0])[:, None, None]
        kx = np.fft.fftfreq(shape[2])[None, None, :]
        mask = np.abs(kz) <= np.tan(np.deg2rad(self.half_angle)) * np.abs(kx) + 1e-12
        return np.broadcast_to(mask, shape).copy()


def _next_power_of_two(n: int) -> int:
    return 1 << int(np.ceil(np.log2(max(n, 1))))


def ramp_filter(p: ScalarField, window: str = "hann", padding: str = "none") -> ScalarField:
    """
    沿 x 轴（垂直于倾转轴）逐行做 |f| 斜坡滤波

    Args:
        p: 二维投影 (ny, nx)
        window: "none" 或 "hann"（0.5·(1 + cos 2πf)）
        padding: "none" 直接做周期 FFT；"zero" 补零到 ≥2·nx 的 2 的幂次

    Returns:
        ScalarField: 滤波后的投影，形状不变
    """
    if p.ndim != 2:
        raise PreconditionError(f"斜坡滤波需要二维投影，实际 {p.ndim} 维")
    if window not in WINDOWS:
        raise PreconditionError(f"未知窗函数 {window!r}，可选 {WINDOWS}")
    if padding not in PADDINGS:
        raise PreconditionError(f"未知补零方式 {padding!r}，可选 {PADDINGS}")
    width = p.shape[1]
    if width < 2:
        raise PreconditionError(f"投影宽度至少为 2: {width}")

    n_fft = width if padding == "none" else _next_power_of_two(2 * width)
    freqs = np.fft.rfftfreq(n_fft)
    response = np.abs(freqs)
    if window == "hann":
        response = response * 0.5 * (1.0 + np.cos(2.0 * np.pi * freqs))

    spectrum = np.fft.rfft(p.data.astype(np.float64), n=n_fft, axis=1)
    filtered = np.fft.irfft(spectrum * response, n=n_fft, axis=1)[:, :width]
    return p.with_data(filtered)


def backproject(series: TiltSeries, out_shape: Sequence[int], filtered: bool = True,
                window: str = "hann", threads: int = 1) -> ScalarField:
    """
    反投影到 (nz, ny, nx) 体数据

    每个体素沿自己的射线读取（线性插值）各角度的投影值并累加，再乘以 π/n_angles。
    沿 y 轴按固定行数分块并行，块划分与线程数无关，结果逐位一致。

    Args:
        series: 倾转序列，投影形状 (ny, n_det)
        out_shape: 输出体积 (nz, ny, nx)，ny 必须等于投影行数
        filtered: 是否先做斜坡滤波（补零方式 "zero"）
        window: 斜坡滤波窗函数
        threads: 并行线程数
    """
    if len(series) == 0:
        raise PreconditionError("倾转序列为空，无法反投影")
    nz, ny, nx = (int(n) for n in out_shape)
    rows, n_det = series.projection_shape
    if rows != ny:
        raise ShapeMismatchError(f"投影行数 {rows} 与输出 ny={ny} 不一致")

    projections = []
    for tilt in series.tilts:
        proj = ramp_filter(tilt.projection, window, padding="zero") if filtered else tilt.projection
        projections.append(proj.data.astype(np.float64))
    operators = [projection_operator(float(t.angle), nz, nx, n_det).T.tocsr() for t in series.tilts]

    def _slab(rows_range: range) -> np.ndarray:
        y0, y1 = rows_range.start, rows_range.stop
        acc = np.zeros((nz * nx, y1 - y0), dtype=np.float64)
        for op, proj in zip(operators, projections):
            acc += op @ proj[y0:y1].T
        return acc

    slabs = parallel_map(_slab, chunk_ranges(ny, SLAB_ROWS), threads)
    columns = np.concatenate(slabs, axis=1)
    volume = columns.reshape(nz, nx, ny).transpose(0, 2, 1) * (np.pi / len(series))

    voxel_y, voxel_x = series.tilts[0].projection.voxel_size
    return ScalarField(volume, (voxel_x, voxel_y, voxel_x))


def default_out_shape(series: TiltSeries, thickness: Optional[int] = None) -> Tuple[int, int, int]:
    """默认重建体积：(厚度, ny, n_det)，厚度缺省等于 n_det"""
    ny, n_det = series.projection_shape
    return (int(thickness) if thickness else n_det, ny, n_det)


def reconstruct(series: TiltSeries, out_shape: Optional[Sequence[int]] = None,
                window: str = "hann", threads: int = 1) -> ScalarField:
    """加权反投影重建"""
    shape = tuple(out_shape) if out_shape is not None else default_out_shape(series)
    logger.info(f"WBP 重建: {len(series)} 个倾转角 [{min(series.angles):.1f}°, "
                f"{max(series.angles):.1f}°] -> {shape}")
    return backproject(series, shape, filtered=True, window=window, threads=threads)


def reconstruct_pair(h, out_shape: Optional[Sequence[int]] = None, window: str = "hann",
                     threads: int = 1) -> Tuple[ScalarField, ScalarField]:
    """
    用完全相同的设置分别重建两个半序列

    Args:
        h: pairing.HalfSeries
    """
    if len(h.a) == 0 or len(h.b) == 0:
        raise PreconditionError("半序列为空，无法重建")
    shape = tuple(out_shape) if out_shape is not None else default_out_shape(h.a)
    first = reconstruct(h.a, shape, window, threads)
    second = reconstruct(h.b, shape, window, threads)
    return first, second
