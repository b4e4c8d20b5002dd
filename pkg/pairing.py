"""
数据配对模块

五种配对方案，产生噪声相互独立的 (输入, 目标) 数据：
  - p2p-ip  : 同一倾转角的帧分成前后两半，不对齐直接平均
  - p2p-df  : 帧对齐后按奇偶帧分别求和
  - p2p-tap : 相邻倾转角的投影互为输入/目标
  - t2t-eoa : 按采集序号奇偶拆分倾转序列，分别重建
  - t2t-df  : 每个倾转角的帧对齐后按奇偶拆分，两个序列角度完全相同

所有方案都是确定性的，不使用随机数。
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from errors import InvalidFieldError, PreconditionError, ShapeMismatchError
from grid_core import ScalarField
from phantom_sim import MovieTilt, MovieTiltSeries
from tomo_recon import Tilt, TiltSeries
from utils import parallel_map

logger = logging.getLogger(__name__)

ALIGN_PASSES = 2


@dataclass(frozen=True, eq=False)
class ProjectionPair:
    """一对噪声独立的二维观测，附带来源（方案 + 倾转序号 + 角度）"""
    a: ScalarField
    b: ScalarField
    scheme: str = ""
    tilt_indices: Tuple[int, ...] = ()
    angles: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.a.shape != self.b.shape:
            raise ShapeMismatchError(f"配对图像形状不一致: {self.a.shape} vs {self.b.shape}")

    def swapped(self) -> "ProjectionPair":
        return ProjectionPair(self.b, self.a, self.scheme,
                              tuple(reversed(self.tilt_indices)), tuple(reversed(self.angles)))


@dataclass(frozen=True, eq=False)
class HalfSeries:
    """
    两个半倾转序列

    kind="eoa": 角度集合互不相交，并集为完整序列
    kind="df" : 两个序列角度列表完全相同
    """
    a: TiltSeries
    b: TiltSeries
    kind: str

    def __post_init__(self):
        angles_a, angles_b = set(self.a.angles), set(self.b.angles)
        if self.kind == "eoa":
            if angles_a & angles_b:
                raise InvalidFieldError(f"eoa 半序列角度有重叠: {sorted(angles_a & angles_b)}")
        elif self.kind == "df":
            if self.a.angles != self.b.angles:
                raise InvalidFieldError("df 半序列的角度列表必须完全相同")
        else:
            raise PreconditionError(f"未知半序列类型: {self.kind!r}")


def _check_frames(frames: Sequence[ScalarField]):
    if len(frames) < 2:
        raise PreconditionError(f"至少需要 2 帧，实际 {len(frames)} 帧")
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise ShapeMismatchError(f"帧形状不一致: {shapes}")


def _parabolic_offset(left: float, center: float, right: float) -> float:
    denom = left - 2.0 * center + right
    if denom == 0.0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def estimate_shift(reference: np.ndarray, moving: np.ndarray) -> np.ndarray:
    """
    互相关估计平移 s，使 moving(x) ≈ reference(x − s)

    整数峰位 + 每个轴上的抛物线亚像素插值。
    """
    ref = reference - reference.mean()
    mov = moving - moving.mean()
    corr = np.fft.ifft2(np.conj(np.fft.fft2(ref)) * np.fft.fft2(mov)).real
    peak = np.unravel_index(int(np.argmax(corr)), corr.shape)

    shift = []
    for axis, (p, n) in enumerate(zip(peak, corr.shape)):
        before = list(peak)
        after = list(peak)
        before[axis] = (p - 1) % n
        after[axis] = (p + 1) % n
        delta = _parabolic_offset(corr[tuple(before)], corr[peak], corr[tuple(after)])
        signed = p - n if p > n // 2 else p
        shift.append(signed + delta)
    return np.array(shift, dtype=np.float64)


def _apply_shift(frame: np.ndarray, shift: np.ndarray) -> np.ndarray:
    if not np.any(shift):
        return frame
    return ndimage.shift(frame, -shift, order=1, mode='nearest')


def align_frames(frames: Sequence[ScalarField]) -> Tuple[List[ScalarField], np.ndarray]:
    """
    刚性帧对齐

    第一遍以已对齐帧的累加和为参考，第二遍以"除自身以外的和"为参考重新估计；
    最后以第 0 帧为原点。对齐后的帧按负平移双线性重采样。

    Returns:
        (aligned, shifts): 对齐后的帧列表，以及 (n, 2) 的 (dy, dx) 平移
    """
    _check_frames(frames)
    raw = [f.data.astype(np.float64) for f in frames]
    n = len(raw)
    shifts = np.zeros((n, 2), dtype=np.float64)

    aligned = [raw[0]]
    running = raw[0].copy()
    for k in range(1, n):
        shifts[k] = estimate_shift(running, raw[k])
        aligned.append(_apply_shift(raw[k], shifts[k]))
        running += aligned[k]

    for _ in range(ALIGN_PASSES - 1):
        total = np.sum(aligned, axis=0)
        for k in range(n):
            shifts[k] = estimate_shift(total - aligned[k], raw[k])
        shifts -= shifts[0]
        aligned = [_apply_shift(r, s) for r, s in zip(raw, shifts)]

    return [frames[k].with_data(aligned[k]) for k in range(n)], shifts


def split_halves(frames: Sequence[ScalarField]) -> ProjectionPair:
    """前 ⌊n/2⌋ 帧的均值 vs 其余帧的均值，不做对齐"""
    _check_frames(frames)
    half = len(frames) // 2
    first = np.mean([f.data.astype(np.float64) for f in frames[:half]], axis=0)
    second = np.mean([f.data.astype(np.float64) for f in frames[half:]], axis=0)
    return ProjectionPair(frames[0].with_data(first), frames[0].with_data(second), scheme="p2p-ip")


def split_even_odd(frames: Sequence[ScalarField]) -> ProjectionPair:
    """偶数帧之和 vs 奇数帧之和（帧应已对齐）"""
    _check_frames(frames)
    even = np.sum([f.data.astype(np.float64) for f in frames[0::2]], axis=0)
    odd = np.sum([f.data.astype(np.float64) for f in frames[1::2]], axis=0)
    return ProjectionPair(frames[0].with_data(even), frames[0].with_data(odd), scheme="p2p-df")


def pair_adjacent_tilts(series: TiltSeries) -> List[ProjectionPair]:
    """相邻倾转角两两配对，n 个倾转角得到 n−1 对"""
    if len(series) < 2:
        raise PreconditionError(f"相邻倾转配对至少需要 2 个倾转角，实际 {len(series)}")
    pairs = []
    for i, (first, second) in enumerate(zip(series.tilts, series.tilts[1:])):
        pairs.append(ProjectionPair(
            first.projection, second.projection, scheme="p2p-tap",
            tilt_indices=(i, i + 1), angles=(first.angle, second.angle),
        ))
    return pairs


def _check_acquisition_indices(indices: Sequence[int]):
    if sorted(indices) != list(range(len(indices))):
        raise PreconditionError(f"采集序号缺失或重复: {sorted(indices)}")


def split_series_even_odd_acquisition(series: TiltSeries) -> HalfSeries:
    """按采集序号奇偶拆分：偶数 -> a，奇数 -> b"""
    _check_acquisition_indices(series.acquisition_indices)
    if len(series) < 2:
        raise PreconditionError("按采集序号拆分至少需要 2 个倾转角")
    even = tuple(t for t in series.tilts if t.acquisition_index % 2 == 0)
    odd = tuple(t for t in series.tilts if t.acquisition_index % 2 == 1)
    logger.info(f"T2T-eoa 拆分: 偶数组 {len(even)} 个倾转角，奇数组 {len(odd)} 个")
    return HalfSeries(TiltSeries(even), TiltSeries(odd), kind="eoa")


def _split_movie_tilt(tilt: MovieTilt) -> Tuple[Tilt, Tilt]:
    aligned, _ = align_frames(tilt.frames)
    pair = split_even_odd(aligned)
    return (Tilt(tilt.angle, pair.a, tilt.acquisition_index),
            Tilt(tilt.angle, pair.b, tilt.acquisition_index))


def split_series_frames(series: MovieTiltSeries, threads: int = 1) -> HalfSeries:
    """每个倾转角：对齐帧后奇偶求和；两个半序列都保留完整角度列表"""
    for tilt in series.tilts:
        if len(tilt.frames) < 2:
            raise PreconditionError(f"倾转角 {tilt.angle}° 只有 {len(tilt.frames)} 帧，至少需要 2 帧")
    halves = parallel_map(_split_movie_tilt, series.tilts, threads)
    logger.info(f"T2T-df 拆分: {len(halves)} 个倾转角 × 2 个半序列")
    return HalfSeries(TiltSeries(tuple(h[0] for h in halves)),
                      TiltSeries(tuple(h[1] for h in halves)), kind="df")


def _sum_tilt(tilt: MovieTilt) -> Tilt:
    if len(tilt.frames) == 1:
        total = tilt.frames[0]
    else:
        aligned, _ = align_frames(tilt.frames)
        total = aligned[0].with_data(np.sum([f.data.astype(np.float64) for f in aligned], axis=0))
    return Tilt(tilt.angle, total, tilt.acquisition_index)


def sum_aligned_frames(series: MovieTiltSeries, threads: int = 1) -> TiltSeries:
    """每个倾转角的帧对齐后求和，得到常规倾转序列"""
    return TiltSeries(tuple(parallel_map(_sum_tilt, series.tilts, threads)))


def _pair_movie_tilt(task) -> ProjectionPair:
    index, tilt, scheme = task
    if scheme == "p2p-ip":
        pair = split_halves(tilt.frames)
    else:
        aligned, _ = align_frames(tilt.frames)
        pair = split_even_odd(aligned)
    return ProjectionPair(pair.a, pair.b, scheme=scheme, tilt_indices=(index,), angles=(tilt.angle,))


def projection_pairs(series: MovieTiltSeries, scheme: str, threads: int = 1) -> List[ProjectionPair]:
    """
    按 P2P 方案生成投影对

    p2p-tap 对每一对相邻倾转角同时使用两种顺序（输入/目标互换）。
    """
    if scheme in ("p2p-ip", "p2p-df"):
        tasks = [(i, tilt, scheme) for i, tilt in enumerate(series.tilts)]
        pairs = parallel_map(_pair_movie_tilt, tasks, threads)
    elif scheme == "p2p-tap":
        adjacent = pair_adjacent_tilts(sum_aligned_frames(series, threads))
        pairs = []
        for pair in adjacent:
            pairs.extend([pair, pair.swapped()])
    else:
        raise PreconditionError(f"{scheme!r} 不是投影级配对方案")
    logger.info(f"{scheme} 配对完成: {len(pairs)} 对投影")
    return pairs


def half_series(series: MovieTiltSeries, scheme: str, threads: int = 1) -> HalfSeries:
    """按 T2T 方案生成两个半序列"""
    if scheme == "t2t-eoa":
        return split_series_even_odd_acquisition(sum_aligned_frames(series, threads))
    if scheme == "t2t-df":
        return split_series_frames(series, threads)
    raise PreconditionError(f"{scheme!r} 不是断层级配对方案")
