"""
U-Net 与 Noise2Noise 训练模块

2D/3D U-Net（深度 2、卷积核 3、最后一层线性），逐像素 MSE 损失，Adam 优化，
10% 验证集划分，以及分块预测。参数以固定顺序的 OrderedDict 保存，
前向用 torch.nn.functional 直接写出，梯度由 autograd 求得。

张量布局: (batch, channels, *spatial)。
"""
import math
import logging
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from config import (DEFAULT_ADAM_BETA1, DEFAULT_ADAM_BETA2, DEFAULT_ADAM_EPS,
                    DEFAULT_LEARNING_RATE, DEFAULT_UNET_DEPTH, DEFAULT_UNET_KERNEL,
                    DEFAULT_VALIDATION_FRACTION)
from errors import (DegenerateInputError, InvalidFieldError, PreconditionError,
                    ShapeMismatchError)
from grid_core import (NormStats, Rng, ScalarField, apply_norm, compute_norm_stats,
                       extract_patch_pairs, invert_norm)
from utils import parallel_map

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    """网络结构；通道数逐层翻倍"""
    spatial_dims: int = 2
    depth: int = DEFAULT_UNET_DEPTH
    kernel: int = DEFAULT_UNET_KERNEL
    base_channels: int = 16
    final_activation: str = "linear"

    def __post_init__(self):
        if self.spatial_dims not in (2, 3):
            raise PreconditionError(f"spatial_dims 只能是 2 或 3: {self.spatial_dims}")
        if self.depth < 1:
            raise PreconditionError(f"depth 至少为 1: {self.depth}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise PreconditionError(f"卷积核必须是正奇数: {self.kernel}")
        if self.base_channels < 1:
            raise PreconditionError(f"base_channels 至少为 1: {self.base_channels}")
        if self.final_activation != "linear":
            raise PreconditionError(f"最后一层只支持线性激活: {self.final_activation}")

    @property
    def pool_period(self) -> int:
        return 2 ** self.depth

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


@dataclass(frozen=True, eq=False)
class UNetParams:
    """网络参数（固定枚举顺序）以及预测时需要的标准化信息"""
    config: UNetConfig
    tensors: "OrderedDict[str, torch.Tensor]"
    norm_stats: Optional[NormStats] = None
    normalize_targets: bool = True

    @property
    def names(self) -> List[str]:
        return list(self.tensors.keys())

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def replace(self, tensors: "OrderedDict[str, torch.Tensor]") -> "UNetParams":
        return UNetParams(self.config, tensors, self.norm_stats, self.normalize_targets)

    def with_norm(self, stats: Optional[NormStats], normalize_targets: bool) -> "UNetParams":
        return UNetParams(self.config, self.tensors, stats, normalize_targets)

    def to(self, dtype: torch.dtype) -> "UNetParams":
        return self.replace(OrderedDict((k, v.to(dtype)) for k, v in self.tensors.items()))


@dataclass(frozen=True)
class TrainConfig:
    """训练参数（轮数、批大小、学习率均为常规取值）"""
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = DEFAULT_ADAM_BETA1
    beta2: float = DEFAULT_ADAM_BETA2
    eps: float = DEFAULT_ADAM_EPS
    validation_fraction: float = DEFAULT_VALIDATION_FRACTION
    seed: int = 0
    normalize_targets: bool = True
    show_progress: bool = False

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise PreconditionError(f"validation_fraction 必须位于 (0, 1): {self.validation_fraction}")
        if self.epochs < 1 or self.batch_size < 1:
            raise PreconditionError(f"epochs/batch_size 必须为正: {self.epochs}/{self.batch_size}")
        if self.learning_rate <= 0:
            raise PreconditionError(f"学习率必须为正: {self.learning_rate}")


@dataclass
class TrainHistory:
    """每轮的训练/验证损失"""
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    n_train: int = 0
    n_val: int = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'epoch': np.arange(1, len(self.train_loss) + 1),
            'train_loss': self.train_loss,
            'val_loss': self.val_loss,
        })


@dataclass(frozen=True, eq=False)
class PairDataset:
    """(输入, 目标) 成对样本，所有样本同形状"""
    inputs: Tuple[ScalarField, ...]
    targets: Tuple[ScalarField, ...]

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ShapeMismatchError(f"输入 {len(self.inputs)} 个，目标 {len(self.targets)} 个")
        shapes = {f.shape for f in self.inputs} | {f.shape for f in self.targets}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"样本形状不一致: {shapes}")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return self.inputs[0].shape

    @classmethod
    def from_pairs(cls, pairs) -> "PairDataset":
        """接受 [(a, b), ...] 或带 a/b 属性的配对对象"""
        inputs, targets = [], []
        for pair in pairs:
            a, b = (pair.a, pair.b) if hasattr(pair, 'a') else pair
            inputs.append(a)
            targets.append(b)
        return cls(tuple(inputs), tuple(targets))

    @classmethod
    def from_patches(cls, sources: Sequence[Tuple[ScalarField, ScalarField]], count: int,
                     size: Sequence[int], rng: Rng) -> "PairDataset":
        """从若干对配准的场中共切出 count 对块（按场平均分配）"""
        if not sources:
            raise PreconditionError("没有可切块的数据")
        pairs = []
        per_source = [count // len(sources) + (1 if i < count % len(sources) else 0)
                      for i in range(len(sources))]
        for index, ((a, b), n) in enumerate(zip(sources, per_source)):
            if n > 0:
                pairs.extend(extract_patch_pairs(a, b, n, size, rng.derive(index)))
        return cls.from_pairs(pairs)


class ActivationPattern:
    """
    记录一次前向中的 ReLU 掩膜和最大池化索引

    回放模式下网络对每个单独参数是仿射的，有限差分梯度检查因此是精确的。
    """

    def __init__(self):
        self.masks: List[torch.Tensor] = []
        self.indices: List[torch.Tensor] = []
        self.replay = False
        self._mask_pos = 0
        self._index_pos = 0

    def rewind(self, replay: bool = True) -> "ActivationPattern":
        self.replay = replay
        self._mask_pos = 0
        self._index_pos = 0
        return self

    def relu(self, x: torch.Tensor) -> torch.Tensor:
        if self.replay:
            mask = self.masks[self._mask_pos]
            self._mask_pos += 1
            return x * mask
        self.masks.append((x > 0).to(x.dtype).detach())
        return F.relu(x)

    def pool(self, x: torch.Tensor, spatial_dims: int) -> torch.Tensor:
        if self.replay:
            idx = self.indices[self._index_pos]
            self._index_pos += 1
            return x.flatten(2).gather(2, idx.flatten(2)).view(idx.shape)
        out, idx = _max_pool(x, spatial_dims, return_indices=True)
        self.indices.append(idx.detach())
        return out


def _conv(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor, spatial_dims: int) -> torch.Tensor:
    pad = w.shape[-1] // 2
    if spatial_dims == 2:
        return F.conv2d(x, w, b, padding=pad)
    return F.conv3d(x, w, b, padding=pad)


def _max_pool(x: torch.Tensor, spatial_dims: int, return_indices: bool = False):
    if spatial_dims == 2:
        return F.max_pool2d(x, 2, return_indices=return_indices)
    return F.max_pool3d(x, 2, return_indices=return_indices)


def _layer_plan(cfg: UNetConfig) -> List[Tuple[str, int, int, int]]:
    """(名称, 输入通道, 输出通道, 卷积核) 的固定顺序列表"""
    plan = []
    in_ch = 1
    for level in range(cfg.depth):
        ch = cfg.channels(level)
        plan.append((f"enc{level}_conv1", in_ch, ch, cfg.kernel))
        plan.append((f"enc{level}_conv2", ch, ch, cfg.kernel))
        in_ch = ch
    mid = cfg.channels(cfg.depth)
    plan.append(("mid_conv1", in_ch, mid, cfg.kernel))
    plan.append(("mid_conv2", mid, mid, cfg.kernel))
    below = mid
    for level in reversed(range(cfg.depth)):
        ch = cfg.channels(level)
        plan.append((f"dec{level}_conv1", below + ch, ch, cfg.kernel))
        plan.append((f"dec{level}_conv2", ch, ch, cfg.kernel))
        below = ch
    plan.append(("out", below, 1, 1))
    return plan


def param_shapes(cfg: UNetConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    shapes = OrderedDict()
    for name, in_ch, out_ch, k in _layer_plan(cfg):
        shapes[f"{name}.weight"] = (out_ch, in_ch) + (k,) * cfg.spatial_dims
        shapes[f"{name}.bias"] = (out_ch,)
    return shapes


def init_params(cfg: UNetConfig, rng: Rng, dtype: torch.dtype = torch.float32) -> UNetParams:
    """He-uniform 初始化权重（bound = gain·√(3/fan_in)），偏置为 0"""
    gen = torch.Generator().manual_seed(rng.torch_seed())
    gain = torch.nn.init.calculate_gain('relu')
    tensors = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = gain * math.sqrt(3.0 / fan_in)
            tensors[name] = ((torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound).to(dtype)
        else:
            tensors[name] = torch.zeros(shape, dtype=dtype)
    return UNetParams(cfg, tensors)


def zeros_like_params(cfg: UNetConfig, dtype: torch.dtype = torch.float32) -> UNetParams:
    tensors = OrderedDict((k, torch.zeros(s, dtype=dtype)) for k, s in param_shapes(cfg).items())
    return UNetParams(cfg, tensors)


def unet_forward(x: torch.Tensor, p: UNetParams, cfg: Optional[UNetConfig] = None,
                 pattern: Optional[ActivationPattern] = None) -> torch.Tensor:
    """
    U-Net 前向

    每层两次 same 卷积 + ReLU，2× 最大池化下采样，最近邻上采样后与跳连拼接，
    最后 1×1 线性卷积输出单通道。

    Args:
        x: (batch, 1, *spatial)，各空间维必须能被 2^depth 整除
        p: 网络参数
        cfg: 网络结构，缺省取 p.config
        pattern: 传入时记录（或回放）激活模式
    """
    cfg = cfg or p.config
    if x.dim() != cfg.spatial_dims + 2:
        raise ShapeMismatchError(f"输入应为 {cfg.spatial_dims + 2} 维张量，实际 {tuple(x.shape)}")
    if any(n % cfg.pool_period for n in x.shape[2:]):
        raise PreconditionError(f"空间尺寸 {tuple(x.shape[2:])} 不能被 {cfg.pool_period} 整除")

    t = p.tensors
    dims = cfg.spatial_dims
    relu = pattern.relu if pattern is not None else F.relu

    def pool(h):
        return pattern.pool(h, dims) if pattern is not None else _max_pool(h, dims)

    def block(h, name):
        h = relu(_conv(h, t[f"{name}_conv1.weight"], t[f"{name}_conv1.bias"], dims))
        return relu(_conv(h, t[f"{name}_conv2.weight"], t[f"{name}_conv2.bias"], dims))

    skips = []
    h = x
    for level in range(cfg.depth):
        h = block(h, f"enc{level}")
        skips.append(h)
        h = pool(h)
    h = block(h, "mid")
    for level in reversed(range(cfg.depth)):
        h = F.interpolate(h, scale_factor=2, mode='nearest')
        h = block(torch.cat([h, skips[level]], dim=1), f"dec{level}")
    return _conv(h, t["out.weight"], t["out.bias"], dims)


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> Tuple[float, torch.Tensor]:
    """
    逐像素均方误差

    Returns:
        (loss, grad): 损失（float64 累加）以及对 pred 的梯度 2(pred − target)/N
    """
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"形状不一致: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred.detach().to(torch.float64) - target.detach().to(torch.float64)
    n = diff.numel()
    loss = float(torch.sum(diff * diff) / n)
    grad = (2.0 * diff / n).to(pred.dtype)
    return loss, grad


def backward(x: torch.Tensor, target: torch.Tensor, p: UNetParams,
             cfg: Optional[UNetConfig] = None,
             pattern: Optional[ActivationPattern] = None) -> Tuple[float, "OrderedDict[str, torch.Tensor]"]:
    """
    mse_loss∘unet_forward 对所有参数的梯度

    Returns:
        (loss, grads): grads 与 p.tensors 同顺序
    """
    leaves = OrderedDict((k, v.detach().requires_grad_(True)) for k, v in p.tensors.items())
    with torch.enable_grad():
        pred = unet_forward(x, p.replace(leaves), cfg, pattern)
        loss, grad_pred = mse_loss(pred, target)
        grads = torch.autograd.grad(pred, list(leaves.values()), grad_outputs=grad_pred,
                                    allow_unused=True)
    out = OrderedDict()
    for (name, leaf), g in zip(leaves.items(), grads):
        out[name] = torch.zeros_like(leaf).detach() if g is None else g.detach()
    return loss, out


@dataclass
class AdamState:
    """Adam 一阶/二阶矩与步数"""
    step: int
    m: "OrderedDict[str, torch.Tensor]"
    v: "OrderedDict[str, torch.Tensor]"

    @classmethod
    def zeros(cls, p: UNetParams) -> "AdamState":
        return cls(0,
                   OrderedDict((k, torch.zeros_like(t)) for k, t in p.tensors.items()),
                   OrderedDict((k, torch.zeros_like(t)) for k, t in p.tensors.items()))


def adam_step(p: UNetParams, grads: Dict[str, torch.Tensor], state: AdamState,
              lr: float = DEFAULT_LEARNING_RATE, beta1: float = DEFAULT_ADAM_BETA1,
              beta2: float = DEFAULT_ADAM_BETA2, eps: float = DEFAULT_ADAM_EPS) -> Tuple[UNetParams, AdamState]:
    """带偏差修正的标准 Adam 更新，返回新的参数和状态"""
    step = state.step + 1
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    new_tensors, new_m, new_v = OrderedDict(), OrderedDict(), OrderedDict()
    with torch.no_grad():
        for name, param in p.tensors.items():
            g = grads[name]
            if g.shape != param.shape:
                raise ShapeMismatchError(f"{name} 梯度形状 {tuple(g.shape)} 与参数 {tuple(param.shape)} 不符")
            m = beta1 * state.m[name] + (1.0 - beta1) * g
            v = beta2 * state.v[name] + (1.0 - beta2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            new_tensors[name] = param - lr * m_hat / (torch.sqrt(v_hat) + eps)
            new_m[name], new_v[name] = m, v
    return p.replace(new_tensors), AdamState(step, new_m, new_v)


def validation_size(n: int, fraction: float) -> int:
    """⌈fraction·n⌉，至少 1"""
    return max(1, math.ceil(round(fraction * n, 9)))


def split_train_validation(n: int, fraction: float, rng: Rng) -> Tuple[np.ndarray, np.ndarray]:
    """随机排列后取前 validation_size(n, fraction) 个作验证，返回 (train_idx, val_idx)"""
    n_val = validation_size(n, fraction)
    if n_val >= n:
        raise PreconditionError(f"验证集 {n_val} 占满了全部 {n} 对样本")
    order = rng.generator.permutation(n)
    return order[n_val:], order[:n_val]


@contextmanager
def single_thread_torch():
    """临时把 torch 线程数设为 1（并行由 utils.parallel_map 负责），退出时恢复"""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def _stack(fields: Sequence[ScalarField], stats: Optional[NormStats], dtype: torch.dtype) -> torch.Tensor:
    arrays = [apply_norm(f, stats).data if stats is not None else f.data for f in fields]
    return torch.from_numpy(np.stack(arrays)[:, np.newaxis].astype(np.float32)).to(dtype)


def _batches(indices: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def _evaluate(x: torch.Tensor, y: torch.Tensor, p: UNetParams, batch_size: int) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            pred = unet_forward(x[start:start + batch_size], p)
            diff = pred.to(torch.float64) - y[start:start + batch_size].to(torch.float64)
            total += float(torch.sum(diff * diff))
            count += diff.numel()
    return total / count


def train(pairs: PairDataset, ucfg: UNetConfig, tcfg: TrainConfig,
          dtype: torch.dtype = torch.float32) -> Tuple[UNetParams, TrainHistory]:
    """
    Noise2Noise 训练

    ⌈validation_fraction·n⌉（至少 1）个样本留作验证；输入/目标用训练输入的
    NormStats 标准化，统计量随参数一起保存。相同 seed 两次训练结果逐位一致。

    少于 10 对样本时仍然训练（冒烟配置会用到），但默认 10% 划分下验证集只有 1 对，验证损失
    只作参考，并记录一条警告。训练期间 torch 线程数为 1，结束后恢复。

    Args:
        pairs: 训练样本
        ucfg: 网络结构
        tcfg: 训练参数

    Returns:
        (params, history)
    """
    n = len(pairs)
    if n == 0:
        raise PreconditionError("训练集为空")
    if n < 2:
        raise PreconditionError(f"至少需要 2 对样本才能划分验证集，实际 {n}")
    if n < 10:
        logger.warning(f"⚠️ 只有 {n} 对训练样本，验证损失可能不可靠")

    rng = Rng(tcfg.seed)
    train_idx, val_idx = split_train_validation(n, tcfg.validation_fraction, rng.derive(0))
    with single_thread_torch():
        return _fit(pairs, ucfg, tcfg, dtype, rng, train_idx, val_idx)


def _fit(pairs: PairDataset, ucfg: UNetConfig, tcfg: TrainConfig, dtype: torch.dtype, rng: Rng,
         train_idx: np.ndarray, val_idx: np.ndarray) -> Tuple[UNetParams, TrainHistory]:
    n_val = len(val_idx)

    train_inputs = [pairs.inputs[i] for i in train_idx]
    stats = compute_norm_stats(np.stack([f.data for f in train_inputs]))
    if stats.degenerate:
        raise DegenerateInputError("训练输入为常数，无法标准化")
    target_stats = stats if tcfg.normalize_targets else None

    x_all = _stack(pairs.inputs, stats, dtype)
    y_all = _stack(pairs.targets, target_stats, dtype)
    x_train, y_train = x_all[torch.as_tensor(train_idx)], y_all[torch.as_tensor(train_idx)]
    x_val, y_val = x_all[torch.as_tensor(val_idx)], y_all[torch.as_tensor(val_idx)]

    params = init_params(ucfg, rng.derive(1), dtype).with_norm(stats, tcfg.normalize_targets)
    state = AdamState.zeros(params)
    history = TrainHistory(n_train=len(train_idx), n_val=n_val)
    history.initial_val_loss = _evaluate(x_val, y_val, params, tcfg.batch_size)
    logger.info(f"开始训练: {len(train_idx)} 训练 / {n_val} 验证，样本形状 {pairs.sample_shape}，"
                f"初始验证损失 {history.initial_val_loss:.4f}")

    shuffle = rng.derive(2).generator
    epochs = tqdm(range(tcfg.epochs), desc="训练", disable=not tcfg.show_progress)
    for epoch in epochs:
        perm = shuffle.permutation(len(train_idx))
        total, count = 0.0, 0
        for batch in _batches(perm, tcfg.batch_size):
            index = torch.as_tensor(batch)
            loss, grads = backward(x_train[index], y_train[index], params)
            params, state = adam_step(params, grads, state, tcfg.learning_rate,
                                      tcfg.beta1, tcfg.beta2, tcfg.eps)
            total += loss * len(batch)
            count += len(batch)
        history.train_loss.append(total / count)
        history.val_loss.append(_evaluate(x_val, y_val, params, tcfg.batch_size))
        logger.info(f"Epoch {epoch + 1}/{tcfg.epochs}: 训练损失 {history.train_loss[-1]:.4f}，"
                    f"验证损失 {history.val_loss[-1]:.4f}")

    logger.info(f"✅ 训练完成: 验证损失 {history.initial_val_loss:.4f} -> {history.val_loss[-1]:.4f}")
    return params, history


def receptive_margin(cfg: UNetConfig) -> int:
    """
    分块边界（零填充）影响到的最大宽度（输入像素）

    沿网络逐层传播受污染带宽：每次卷积加 (k−1)/2 个当前层单位，池化向上取整到
    下一层单位，上采样保持不变并与跳连取最大。深度 2、卷积核 3 时为 22。
    """
    r = (cfg.kernel - 1) // 2
    band = 0
    skips = []
    for level in range(cfg.depth):
        unit = 2 ** level
        band += 2 * r * unit
        skips.append(band)
        band = math.ceil(band / (2 * unit)) * 2 * unit
    band += 2 * r * 2 ** cfg.depth
    for level in reversed(range(cfg.depth)):
        band = max(band, skips[level]) + 2 * r * 2 ** level
    return band


def default_overlap(cfg: UNetConfig) -> int:
    """receptive_margin 向上取整到池化周期的倍数"""
    period = cfg.pool_period
    return math.ceil(receptive_margin(cfg) / period) * period


def _tile_starts(n: int, tile: int, step: int) -> List[int]:
    starts = [0]
    while starts[-1] + tile < n:
        nxt = starts[-1] + step
        if nxt + tile >= n:
            nxt = n - tile
        starts.append(nxt)
    return starts


def _axis_plan(n: int, tile: int, overlap: int, period: int) -> List[Tuple[int, int, int]]:
    """单个轴上的 (起点, 写入起点, 写入终点)"""
    if tile >= n:
        return [(0, 0, n)]
    step = ((tile - 2 * overlap) // period) * period
    if step < period:
        raise PreconditionError(f"分块 {tile} 相对重叠 {overlap} 太小（有效步长 {step}）")
    starts = _tile_starts(n, tile, step)
    plan = []
    for i, start in enumerate(starts):
        write_start = 0 if i == 0 else start + overlap
        write_end = n if i == len(starts) - 1 else starts[i + 1] + overlap
        plan.append((start, write_start, write_end))
    return plan


def _forward_field(arr: np.ndarray, p: UNetParams) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(arr)[np.newaxis, np.newaxis]).to(p.dtype)
    with torch.no_grad():
        out = unet_forward(x, p)
    return out[0, 0].to(torch.float64).numpy()


def predict(f: ScalarField, p: UNetParams, tile: Optional[Union[int, Sequence[int]]] = None,
            overlap: Optional[int] = None, threads: int = 1) -> ScalarField:
    """
    分块预测

    场先按边缘值填充到 2^depth 的整数倍；分块起点对齐池化周期，相邻块的写入
    边界放在各自有效区内部，因此 overlap ≥ receptive_margin 时分块与不分块一致。

    Args:
        f: 输入场（维数须与网络一致）
        p: 训练好的参数（含标准化统计量）
        tile: 每个轴的分块尺寸；None 表示整场一次前向
        overlap: 块边缘丢弃的宽度，缺省为 default_overlap(cfg)
        threads: 分块并行线程数
    """
    cfg = p.config
    if f.ndim != cfg.spatial_dims:
        raise ShapeMismatchError(f"网络是 {cfg.spatial_dims}D，输入是 {f.ndim}D")
    with single_thread_torch():
        return _predict(f, p, tile, overlap, threads)


def _predict(f: ScalarField, p: UNetParams, tile, overlap: Optional[int], threads: int) -> ScalarField:
    cfg = p.config
    period = cfg.pool_period
    field_in = apply_norm(f, p.norm_stats) if p.norm_stats is not None else f
    pad = [(0, (-n) % period) for n in f.shape]
    arr = np.pad(field_in.data.astype(np.float64), pad, mode='edge')

    if tile is None:
        out = _forward_field(arr, p)
    else:
        tiles = (int(tile),) * f.ndim if np.isscalar(tile) else tuple(int(t) for t in tile)
        if len(tiles) != f.ndim:
            raise PreconditionError(f"tile 需要 {f.ndim} 个分量: {tiles}")
        if any(t < period for t in tiles):
            raise PreconditionError(f"分块 {tiles} 小于池化周期 {period}")
        tiles = tuple(min((t // period) * period, n) for t, n in zip(tiles, arr.shape))
        margin = default_overlap(cfg) if overlap is None else int(overlap)
        if margin < receptive_margin(cfg):
            logger.warning(f"⚠️ overlap={margin} 小于感受野边距 {receptive_margin(cfg)}，接缝处会有差异")
        plans = [_axis_plan(n, t, margin, period) for n, t in zip(arr.shape, tiles)]

        jobs = list(np.ndindex(*[len(plan) for plan in plans]))

        def _run(job):
            parts = [plan[i] for plan, i in zip(plans, job)]
            src = tuple(slice(start, start + t) for (start, _, _), t in zip(parts, tiles))
            pred = _forward_field(arr[src], p)
            local = tuple(slice(ws - start, we - start) for start, ws, we in parts)
            dst = tuple(slice(ws, we) for _, ws, we in parts)
            return dst, pred[local]

        out = np.empty(arr.shape, dtype=np.float64)
        for dst, values in parallel_map(_run, jobs, threads):
            out[dst] = values

    out = out[tuple(slice(0, n) for n in f.shape)]
    result = f.with_data(out)
    if p.norm_stats is not None and p.normalize_targets:
        result = invert_norm(result, p.norm_stats)
    return result


def restore_pair(a: ScalarField, b: ScalarField, p: UNetParams,
                 tile: Optional[Union[int, Sequence[int]]] = None,
                 overlap: Optional[int] = None, threads: int = 1) -> ScalarField:
    """两个独立观测分别预测后逐像素平均（在原始强度空间中平均）"""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"形状不一致: {a.shape} vs {b.shape}")
    first = predict(a, p, tile, overlap, threads).data.astype(np.float64)
    second = predict(b, p, tile, overlap, threads).data.astype(np.float64)
    return a.with_data((first + second) / 2.0)


def save_model(p: UNetParams, path: Union[str, Path]) -> Path:
    """
    保存模型

    容器格式（torch.save）:
        format_version, unet_config, norm_stats, normalize_targets,
        param_names（固定枚举顺序）, params（同顺序的张量列表）
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        'format_version': MODEL_FORMAT_VERSION,
        'unet_config': asdict(p.config),
        'norm_stats': p.norm_stats.to_dict() if p.norm_stats is not None else None,
        'normalize_targets': p.normalize_targets,
        'param_names': p.names,
        'params': [t.detach().clone().contiguous() for t in p.tensors.values()],
    }
    torch.save(payload, path)
    logger.info(f"模型已保存: {path}")
    return path


def load_model(path: Union[str, Path]) -> UNetParams:
    """读取 save_model 写出的模型并校验参数名与形状"""
    try:
        payload = torch.load(Path(path), map_location='cpu', weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise InvalidFieldError(f"无法读取模型文件 {path}: {e}") from e

    version = payload.get('format_version')
    if version != MODEL_FORMAT_VERSION:
        raise InvalidFieldError(f"不支持的模型格式版本: {version}")
    cfg = UNetConfig(**payload['unet_config'])
    expected = param_shapes(cfg)
    names = list(payload['param_names'])
    if names != list(expected.keys()):
        raise InvalidFieldError("模型参数名与网络结构不一致")

    tensors = OrderedDict()
    for name, tensor in zip(names, payload['params']):
        if tuple(tensor.shape) != expected[name]:
            raise InvalidFieldError(f"{name} 形状 {tuple(tensor.shape)} 应为 {expected[name]}")
        tensors[name] = tensor
    stats = payload.get('norm_stats')
    norm = NormStats(**stats) if stats is not None else None
    return UNetParams(cfg, tensors, norm, bool(payload.get('normalize_targets', True)))
