"""
网格基础类型模块

ScalarField：2D/3D 浮点标量场（图像、投影、断层重建、体模），构造后只读。
Rng：基于 Philox 计数器的可分流随机数发生器，仓库里所有随机操作都从这里取数。
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DegenerateInputError, InvalidFieldError, PreconditionError, ShapeMismatchError

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True, eq=False)
class ScalarField:
    """N 维（2 或 3 轴）float32 标量场，附带每个轴的体素尺寸"""
    data: np.ndarray
    voxel_size: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True, order='C')
        if arr.ndim not in (2, 3):
            raise InvalidFieldError(f"ScalarField 只支持 2 或 3 个轴，实际 {arr.ndim}")
        if arr.size == 0:
            raise InvalidFieldError(f"ScalarField 不能为空: shape={arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidFieldError("ScalarField 含有 NaN/Inf")
        arr.flags.writeable = False

        voxel = self.voxel_size
        if voxel is None:
            voxel = (1.0,) * arr.ndim
        elif np.isscalar(voxel):
            voxel = (float(voxel),) * arr.ndim
        voxel = tuple(float(v) for v in voxel)
        if len(voxel) != arr.ndim:
            raise InvalidFieldError(f"voxel_size 长度 {len(voxel)} 与维数 {arr.ndim} 不符")

        object.__setattr__(self, 'data', arr)
        object.__setattr__(self, 'voxel_size', voxel)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def with_data(self, data: np.ndarray) -> "ScalarField":
        """保留体素尺寸，替换数据"""
        return ScalarField(data, self.voxel_size)

    def __add__(self, other: "ScalarField") -> "ScalarField":
        _require_same_shape(self, other)
        return self.with_data(self.data.astype(np.float64) + other.data)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        _require_same_shape(self, other)
        return self.with_data(self.data.astype(np.float64) - other.data)


class Rng:
    """
    可分流的确定性随机数发生器

    相同 (seed, stream) 在任何平台上产生相同序列；并行任务用 derive(task_index)
    拿到互相独立的子流。
    """

    def __init__(self, seed: int, stream: Tuple[int, ...] = ()):
        self.seed = int(seed) & _SEED_MASK
        self.stream = tuple(int(s) for s in stream)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._generator = np.random.Generator(np.random.Philox(sequence))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def derive(self, index: int) -> "Rng":
        """按任务序号派生独立子流"""
        return Rng(self.seed, self.stream + (int(index),))

    def torch_seed(self) -> int:
        """为 torch.Generator 生成一个种子"""
        return int(self._generator.integers(0, 2 ** 62))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


@dataclass(frozen=True)
class NormStats:
    """标准化统计量（总体标准差）"""
    mean: float
    std: float

    @property
    def degenerate(self) -> bool:
        return self.std == 0.0

    def to_dict(self) -> dict:
        return {'mean': self.mean, 'std': self.std}


def _require_same_shape(a: ScalarField, b: ScalarField):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"形状不一致: {a.shape} vs {b.shape}")


def _as_tuple(value: Union[int, Sequence[int]], ndim: int, name: str) -> Tuple[int, ...]:
    if np.isscalar(value):
        return (int(value),) * ndim
    values = tuple(int(v) for v in value)
    if len(values) != ndim:
        raise PreconditionError(f"{name} 需要 {ndim} 个分量，实际 {len(values)}")
    return values


def sample_patch_offsets(shape: Tuple[int, ...], size: Sequence[int], count: int, rng: Rng) -> np.ndarray:
    """在合法位置上均匀采样 count 个块起点，返回 (count, ndim) 数组"""
    if count <= 0:
        raise PreconditionError(f"count 必须为正数: {count}")
    size = _as_tuple(size, len(shape), "size")
    for n, s in zip(shape, size):
        if s <= 0 or s > n:
            raise PreconditionError(f"块尺寸 {tuple(size)} 超出场尺寸 {tuple(shape)}")
    columns = [rng.generator.integers(0, n - s + 1, size=count) for n, s in zip(shape, size)]
    return np.stack(columns, axis=1).astype(np.int64)


def cut_patch(arr: np.ndarray, offset: Sequence[int], size: Sequence[int]) -> np.ndarray:
    slices = tuple(slice(int(o), int(o) + int(s)) for o, s in zip(offset, size))
    return arr[slices]


def extract_patch_pairs(a: ScalarField, b: ScalarField, count: int, size: Sequence[int],
                        rng: Rng) -> List[Tuple[ScalarField, ScalarField]]:
    """
    从两个配准的场中在相同位置切出 count 对块

    Args:
        a, b: 形状相同的两个噪声观测
        count: 块对数量
        size: 每个轴的块尺寸
        rng: 随机数发生器（决定起点）

    Returns:
        list: [(patch_a, patch_b), ...]
    """
    _require_same_shape(a, b)
    size = _as_tuple(size, a.ndim, "size")
    offsets = sample_patch_offsets(a.shape, size, count, rng)
    pairs = []
    for offset in offsets:
        pairs.append((
            ScalarField(cut_patch(a.data, offset, size), a.voxel_size),
            ScalarField(cut_patch(b.data, offset, size), b.voxel_size),
        ))
    logger.debug(f"切出 {count} 对块，尺寸 {size}")
    return pairs


def compute_norm_stats(f: Union[ScalarField, np.ndarray]) -> NormStats:
    """计算均值和总体标准差（float64 累加）"""
    values = f.data if isinstance(f, ScalarField) else np.asarray(f)
    values = values.astype(np.float64)
    return NormStats(mean=float(values.mean()), std=float(values.std()))


def apply_norm(f: ScalarField, stats: NormStats) -> ScalarField:
    """(f - mean) / std"""
    if stats.std <= 0.0:
        raise DegenerateInputError("标准差为 0（常数场），无法标准化")
    return f.with_data((f.data.astype(np.float64) - stats.mean) / stats.std)


def invert_norm(f: ScalarField, stats: NormStats) -> ScalarField:
    """f * std + mean"""
    return f.with_data(f.data.astype(np.float64) * stats.std + stats.mean)


def bin_field(f: ScalarField, factor: Union[int, Sequence[int]]) -> ScalarField:
    """
    按块均值分箱

    每个轴的余数行/列直接截去；输出体素尺寸按因子放大。
    """
    factors = _as_tuple(factor, f.ndim, "factor")
    if any(k <= 0 for k in factors):
        raise PreconditionError(f"分箱因子必须为正数: {factors}")
    out_shape = tuple(n // k for n, k in zip(f.shape, factors))
    if any(n == 0 for n in out_shape):
        raise PreconditionError(f"分箱因子 {factors} 大于场尺寸 {f.shape}")

    trimmed = f.data[tuple(slice(0, n * k) for n, k in zip(out_shape, factors))].astype(np.float64)
    blocked_shape = []
    for n, k in zip(out_shape, factors):
        blocked_shape.extend([n, k])
    blocks = trimmed.reshape(blocked_shape)
    binned = blocks.mean(axis=tuple(range(1, 2 * f.ndim, 2)))

    voxel = tuple(v * k for v, k in zip(f.voxel_size, factors))
    return ScalarField(binned, voxel)
