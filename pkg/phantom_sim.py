"""
体模与采集模拟模块

生成带标注目标结构的三维体模，模拟平行束倾转投影，以及带漂移和散粒噪声的
剂量分割电影帧。

几何约定：体数据轴顺序为 (z, y, x)，电子束沿 z 轴，倾转轴为 y 轴。
角度 θ 处体素 (z, x) 投影到探测器坐标 u = x·cosθ − z·sinθ（以中心为原点）。
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, sparse

from errors import InvalidFieldError, PlacementError, PreconditionError
from grid_core import Rng, ScalarField
from utils import parallel_map

logger = logging.getLogger(__name__)

MAX_PLACEMENT_TRIES = 2000
MEMBRANE_THICKNESS = 2.0
FILAMENT_RADIUS = 1.2

# 体模与采集使用同一个 seed 下的不同子流
PHANTOM_STREAM = (0,)
ACQUISITION_STREAM = (1,)


@dataclass(frozen=True)
class PhantomSpec:
    """体模参数"""
    shape: Tuple[int, int, int] = (32, 32, 32)
    n_membranes: int = 2
    n_filaments: int = 3
    n_blobs: int = 12
    blob_radius_range: Tuple[float, float] = (2.0, 3.0)
    # 背景 / 膜 / 纤维 / 目标块 的密度
    density_levels: Tuple[float, float, float, float] = (0.2, 1.0, 0.8, 1.2)
    seed: int = 0

    def validate(self):
        if len(self.shape) != 3 or any(n <= 0 for n in self.shape):
            raise PreconditionError(f"体模形状必须是三维正整数: {self.shape}")
        if min(self.n_membranes, self.n_filaments, self.n_blobs) < 0:
            raise PreconditionError("结构数量不能为负")
        r_min, r_max = self.blob_radius_range
        if r_min <= 0 or r_max < r_min:
            raise PreconditionError(f"目标块半径范围无效: {self.blob_radius_range}")
        if self.n_blobs > 0 and 2 * r_max + 2 > min(self.shape):
            raise PreconditionError(f"半径 {r_max} 的目标块放不进 {self.shape}")
        if len(self.density_levels) != 4:
            raise PreconditionError("density_levels 需要 4 个值（背景/膜/纤维/目标块）")


@dataclass(frozen=True, eq=False)
class Phantom:
    """体模：密度场 + 目标块标签（0 为背景，1..K 为各目标块）"""
    density: ScalarField
    labels: np.ndarray

    @property
    def n_targets(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0


@dataclass(frozen=True)
class AcquisitionSpec:
    """采集参数；angles 按采集先后排列"""
    angles: Tuple[float, ...]
    frames_per_tilt: int = 4
    electrons_per_pixel_per_frame: float = 2.0
    gaussian_readout_sigma: float = 0.5
    drift_per_frame: Tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    noise_free: bool = False

    def validate(self):
        if len(self.angles) == 0:
            raise PreconditionError("倾转角列表为空")
        for angle in self.angles:
            if not -90.0 < angle < 90.0:
                raise PreconditionError(f"倾转角必须位于 (-90°, 90°): {angle}")
        if len(set(self.angles)) != len(self.angles):
            raise PreconditionError("倾转角有重复")
        if self.frames_per_tilt < 1:
            raise PreconditionError(f"每个倾转角至少 1 帧: {self.frames_per_tilt}")
        if self.electrons_per_pixel_per_frame <= 0:
            raise PreconditionError(f"剂量必须为正数: {self.electrons_per_pixel_per_frame}")
        if self.gaussian_readout_sigma < 0:
            raise PreconditionError("读出噪声标准差不能为负")


@dataclass(frozen=True, eq=False)
class MovieTilt:
    """单个倾转角的电影帧"""
    angle: float
    acquisition_index: int
    frames: Tuple[ScalarField, ...]


@dataclass(frozen=True, eq=False)
class MovieTiltSeries:
    """按角度升序排列的剂量分割倾转序列"""
    tilts: Tuple[MovieTilt, ...]

    def __post_init__(self):
        tilts = tuple(sorted(self.tilts, key=lambda t: t.angle))
        shapes = {frame.shape for tilt in tilts for frame in tilt.frames}
        if len(shapes) > 1:
            raise InvalidFieldError(f"所有帧必须同形状: {shapes}")
        indices = sorted(t.acquisition_index for t in tilts)
        if indices != list(range(len(tilts))):
            raise InvalidFieldError(f"acquisition_index 不是 0..n-1 的排列: {indices}")
        object.__setattr__(self, 'tilts', tilts)

    def __len__(self) -> int:
        return len(self.tilts)

    @property
    def angles(self) -> List[float]:
        return [t.angle for t in self.tilts]

    @property
    def frame_shape(self) -> Tuple[int, int]:
        return self.tilts[0].frames[0].shape

    def sorted_by_angle(self) -> Tuple[MovieTilt, ...]:
        return self.tilts

    def in_acquisition_order(self) -> Tuple[MovieTilt, ...]:
        return tuple(sorted(self.tilts, key=lambda t: t.acquisition_index))

    def to_tilt_series(self, threads: int = 1):
        """每个倾转角的帧对齐后求和，得到常规（非剂量分割）倾转序列"""
        from pairing import sum_aligned_frames
        return sum_aligned_frames(self, threads)


def sequential_angles(angle_min: float, angle_max: float, step: float) -> Tuple[float, ...]:
    """从 angle_min 到 angle_max 依次采集"""
    if step <= 0:
        raise PreconditionError(f"角度步长必须为正: {step}")
    count = int(np.floor((angle_max - angle_min) / step + 1e-9)) + 1
    return tuple(float(angle_min + i * step) for i in range(count))


def dose_symmetric_angles(angle_max: float, step: float) -> Tuple[float, ...]:
    """剂量对称顺序：0, +s, −s, +2s, −2s, …"""
    if step <= 0:
        raise PreconditionError(f"角度步长必须为正: {step}")
    order = [0.0]
    k = 1
    while k * step <= angle_max + 1e-9:
        order.extend([float(k * step), float(-k * step)])
        k += 1
    return tuple(order)


def _centered_grid(shape: Sequence[int]) -> List[np.ndarray]:
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    return np.meshgrid(*axes, indexing='ij')


def _random_unit_vector(gen: np.random.Generator) -> np.ndarray:
    v = gen.normal(size=3)
    return v / np.linalg.norm(v)


def make_phantom(spec: PhantomSpec) -> Phantom:
    """
    生成体模

    膜为薄板、纤维为细圆柱、目标块为互不重叠的小球；只有目标块写入标签。
    结果只由 spec.seed 决定。
    """
    spec.validate()
    background, membrane_level, filament_level, blob_level = spec.density_levels
    shape = tuple(int(n) for n in spec.shape)
    rng = Rng(spec.seed, PHANTOM_STREAM)
    density = np.full(shape, background, dtype=np.float64)
    labels = np.zeros(shape, dtype=np.int32)
    zz, yy, xx = _centered_grid(shape)
    points = np.stack([zz, yy, xx], axis=-1)
    extent = np.array(shape, dtype=np.float64)

    membrane_rng = rng.derive(0).generator
    for _ in range(spec.n_membranes):
        normal = _random_unit_vector(membrane_rng)
        center = membrane_rng.uniform(0.25, 0.75, size=3) * (extent - 1)
        distance = np.abs((points - center) @ normal)
        density[distance < MEMBRANE_THICKNESS / 2] = membrane_level

    filament_rng = rng.derive(1).generator
    for _ in range(spec.n_filaments):
        direction = _random_unit_vector(filament_rng)
        center = filament_rng.uniform(0.2, 0.8, size=3) * (extent - 1)
        offset = points - center
        along = offset @ direction
        radial = np.linalg.norm(offset - along[..., None] * direction, axis=-1)
        density[radial < FILAMENT_RADIUS] = filament_level

    blob_rng = rng.derive(2).generator
    r_min, r_max = spec.blob_radius_range
    placed: List[Tuple[np.ndarray, float]] = []
    tries = 0
    while len(placed) < spec.n_blobs:
        tries += 1
        if tries > MAX_PLACEMENT_TRIES * max(spec.n_blobs, 1):
            raise PlacementError(
                f"放置 {spec.n_blobs} 个目标块失败（已放置 {len(placed)} 个），请减小数量或半径"
            )
        radius = float(blob_rng.uniform(r_min, r_max))
        low = radius + 1.0
        high = extent - radius - 2.0
        center = low + blob_rng.uniform(size=3) * (high - low)
        if any(np.linalg.norm(center - c) <= radius + r + 1.0 for c, r in placed):
            continue
        placed.append((center, radius))

    for label_id, (center, radius) in enumerate(placed, start=1):
        lo = np.maximum(np.floor(center - radius).astype(int), 0)
        hi = np.minimum(np.ceil(center + radius).astype(int) + 1, shape)
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        inside = np.linalg.norm(points[box] - center, axis=-1) <= radius
        density[box][inside] = blob_level
        labels[box][inside] = label_id

    logger.info(f"体模生成完成: 形状 {shape}，膜 {spec.n_membranes}，纤维 {spec.n_filaments}，"
                f"目标块 {len(placed)}")
    return Phantom(density=ScalarField(density), labels=labels)


@lru_cache(maxsize=512)
def projection_operator(angle: float, nz: int, nx: int, n_det: int) -> sparse.csr_matrix:
    """
    单个角度的体素驱动投影算子，形状 (n_det, nz·nx)

    每个体素的质量按线性插值分给相邻两个探测器像素，因此质量守恒且
    反投影正好是该算子的转置。
    """
    theta = np.deg2rad(angle)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    z, x = np.meshgrid(np.arange(nz, dtype=np.float64), np.arange(nx, dtype=np.float64), indexing='ij')
    u = (x - (nx - 1) / 2.0) * cos_t - (z - (nz - 1) / 2.0) * sin_t
    position = (u + (n_det - 1) / 2.0).ravel()
    columns = np.arange(nz * nx)

    left = np.floor(position).astype(np.int64)
    frac = position - left
    rows = np.concatenate([left, left + 1])
    cols = np.concatenate([columns, columns])
    weights = np.concatenate([1.0 - frac, frac])

    keep = (rows >= 0) & (rows < n_det) & (weights != 0.0)
    operator = sparse.coo_matrix((weights[keep], (rows[keep], cols[keep])), shape=(n_det, nz * nx))
    return operator.tocsr()


def project(v: ScalarField, angle: float, n_det: Optional[int] = None) -> ScalarField:
    """
    平行束投影：绕 y 轴旋转 angle 度后沿 z 轴做线积分

    Returns:
        ScalarField: 形状 (ny, n_det)，默认 n_det = nx
    """
    if v.ndim != 3:
        raise PreconditionError(f"投影需要三维输入，实际 {v.ndim} 维")
    if not -90.0 < angle < 90.0:
        raise PreconditionError(f"倾转角必须位于 (-90°, 90°): {angle}")
    nz, ny, nx = v.shape
    n_det = nx if n_det is None else int(n_det)

    operator = projection_operator(float(angle), nz, nx, n_det)
    columns = v.data.astype(np.float64).transpose(0, 2, 1).reshape(nz * nx, ny)
    projection = (operator @ columns).T
    return ScalarField(projection, (v.voxel_size[1], v.voxel_size[2]))


def _simulate_tilt(task) -> MovieTilt:
    index, angle, clean, acq = task
    gen = Rng(acq.seed, ACQUISITION_STREAM).derive(index).generator
    dose = acq.electrons_per_pixel_per_frame
    dy, dx = acq.drift_per_frame
    frames = []
    for k in range(acq.frames_per_tilt):
        if dy == 0.0 and dx == 0.0:
            shifted = clean
        else:
            shifted = ndimage.shift(clean, (k * dy, k * dx), order=1, mode='nearest')
        expected = dose * np.clip(shifted, 0.0, None)
        if acq.noise_free:
            frame = expected
        else:
            frame = gen.poisson(expected).astype(np.float64)
            if acq.gaussian_readout_sigma > 0:
                frame += gen.normal(0.0, acq.gaussian_readout_sigma, size=expected.shape)
        frames.append(ScalarField(frame))
    return MovieTilt(angle=float(angle), acquisition_index=index, frames=tuple(frames))


def clean_projections(p: Phantom, angles: Sequence[float]) -> List[np.ndarray]:
    """按给定角度计算无噪声投影，并以全序列最大值归一化到 [0, 1]"""
    projections = [project(p.density, angle).data.astype(np.float64) for angle in angles]
    scale = max(float(proj.max()) for proj in projections)
    if scale <= 0:
        raise PreconditionError("体模投影全为 0，无法归一化")
    return [proj / scale for proj in projections]


def simulate_acquisition(p: Phantom, acq: AcquisitionSpec, threads: int = 1) -> MovieTiltSeries:
    """
    模拟剂量分割采集

    第 k 帧 = Poisson(剂量 × 平移 k·drift 后的归一化投影) + Gaussian(0, 读出噪声)；
    每个倾转角使用按采集序号派生的独立随机流。
    """
    acq.validate()
    logger.info(f"模拟采集: {len(acq.angles)} 个倾转角 × {acq.frames_per_tilt} 帧，"
                f"剂量 {acq.electrons_per_pixel_per_frame} e/px/帧")
    cleans = clean_projections(p, acq.angles)
    tasks = [(index, angle, clean, acq) for index, (angle, clean) in enumerate(zip(acq.angles, cleans))]
    tilts = parallel_map(_simulate_tilt, tasks, threads)
    return MovieTiltSeries(tilts=tuple(tilts))
