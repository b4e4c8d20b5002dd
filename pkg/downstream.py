"""
下游检测分析模块

U-Net 稠密分割 -> min-max 归一化 + Otsu 阈值 -> 连通域 -> 按体素数过滤 -> 与真值匹配，
在一组尺寸阈值上扫描得到 precision-recall 曲线。原始与复原断层分别跑一遍以作比较。
"""
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from config import DEFAULT_CONNECTIVITY, OTSU_BINS
from errors import DegenerateInputError, PreconditionError, ShapeMismatchError
from grid_core import Rng, ScalarField
from nn_engine import PairDataset, TrainConfig, TrainHistory, UNetConfig, UNetParams, predict, train
from utils import parallel_map

logger = logging.getLogger(__name__)

MATCH_CRITERION = "greedy-largest-overlap>=1voxel"
CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """布尔体素掩膜"""
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'data', np.asarray(self.data, dtype=bool))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def to_field(self, voxel_size=None) -> ScalarField:
        return ScalarField(self.data.astype(np.float32), voxel_size)

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "BinaryMask":
        return cls(np.asarray(labels) > 0)


@dataclass(frozen=True, eq=False)
class Detection:
    """一个保留下来的连通域"""
    label: int
    size: int
    centroid: Tuple[float, ...]
    voxels: np.ndarray


@dataclass(frozen=True)
class DetectionEntry:
    """单个尺寸阈值下的匹配结果"""
    min_size: int
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float

    @property
    def f1(self) -> float:
        total = self.precision + self.recall
        return 0.0 if total == 0 else 2.0 * self.precision * self.recall / total


@dataclass
class DetectionReport:
    """
    按尺寸阈值排列的检测评估

    没有预测时 precision 记为 1；没有真值目标时 recall 记为 1。
    """
    entries: List[DetectionEntry] = field(default_factory=list)
    criterion: str = MATCH_CRITERION

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            'min_size': e.min_size, 'TP': e.tp, 'FP': e.fp, 'FN': e.fn,
            'precision': e.precision, 'recall': e.recall,
        } for e in self.entries], columns=['min_size', 'TP', 'FP', 'FN', 'precision', 'recall'])

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.8g')
        logger.info(f"检测报告已保存: {path}")
        return path

    def best_f1(self) -> float:
        return max((e.f1 for e in self.entries), default=0.0)


@dataclass(frozen=True)
class RegionSplit:
    """沿某个轴把一个标注断层分成训练区和测试区"""
    axis: int
    boundary: int
    n_train_targets: int
    n_test_targets: int

    def train_slices(self, ndim: int = 3) -> Tuple[slice, ...]:
        slices = [slice(None)] * ndim
        slices[self.axis] = slice(0, self.boundary)
        return tuple(slices)

    def test_slices(self, ndim: int = 3) -> Tuple[slice, ...]:
        slices = [slice(None)] * ndim
        slices[self.axis] = slice(self.boundary, None)
        return tuple(slices)


def _count_targets(labels: np.ndarray) -> int:
    ids = np.unique(labels)
    return int(np.count_nonzero(ids))


def split_labels_by_region(labels: np.ndarray, train_fraction: float, axis: int = 2) -> RegionSplit:
    """
    在 axis 上取边界 ≈ train_fraction·n，并就近挪到不切断任何目标的平面

    目标数按各区域中出现的标签计数。
    """
    labels = np.asarray(labels)
    if not 0.0 < train_fraction < 1.0:
        raise PreconditionError(f"train_fraction 必须位于 (0, 1): {train_fraction}")
    if not 0 <= axis < labels.ndim:
        raise PreconditionError(f"axis 越界: {axis}")
    n = labels.shape[axis]
    if n < 2:
        raise PreconditionError(f"轴 {axis} 长度 {n} 无法拆分")

    def cuts_target(b: int) -> bool:
        left = np.unique(np.take(labels, b - 1, axis=axis))
        right = np.unique(np.take(labels, b, axis=axis))
        common = np.intersect1d(left, right)
        return bool(np.any(common > 0))

    target = min(max(int(round(train_fraction * n)), 1), n - 1)
    boundary = target
    for offset in range(n):
        candidates = [b for b in (target - offset, target + offset) if 1 <= b <= n - 1]
        clean = [b for b in candidates if not cuts_target(b)]
        if clean:
            boundary = clean[0]
            break

    split = RegionSplit(axis, boundary, 0, 0)
    n_train = _count_targets(labels[split.train_slices(labels.ndim)])
    n_test = _count_targets(labels[split.test_slices(labels.ndim)])
    logger.info(f"区域拆分: 轴 {axis} 边界 {boundary}，训练区 {n_train} 个目标，测试区 {n_test} 个")
    return RegionSplit(axis, boundary, n_train, n_test)


def train_segmenter(volumes: Sequence[Tuple[ScalarField, BinaryMask]], ucfg: UNetConfig,
                    tcfg: TrainConfig, patch_count: int = 200,
                    patch_size: Sequence[int] = (16, 16, 16)) -> Tuple[UNetParams, TrainHistory]:
    """
    训练稠密分割网络

    对 {0,1} 目标做 MSE 回归（线性输出层），输入按训练集统计量标准化，目标不标准化。
    """
    if not volumes:
        raise PreconditionError("分割训练集为空")
    sources = []
    for volume, mask in volumes:
        if volume.shape != mask.shape:
            raise ShapeMismatchError(f"掩膜形状 {mask.shape} 与体数据 {volume.shape} 不一致")
        sources.append((volume, mask.to_field(volume.voxel_size)))
    dataset = PairDataset.from_patches(sources, patch_count, patch_size, Rng(tcfg.seed).derive(7))
    logger.info(f"训练分割网络: {len(volumes)} 个体数据，{len(dataset)} 个块")
    return train(dataset, ucfg, replace(tcfg, normalize_targets=False))


def otsu_threshold(values: Union[ScalarField, np.ndarray], bins: int = OTSU_BINS) -> float:
    """
    Otsu 阈值

    min-max 归一化后做 bins 级直方图，类间方差用整数累加和精确比较，
    并列时取较低的阈值。返回原始单位下的阈值，前景为 value ≥ threshold。
    """
    data = values.data if isinstance(values, ScalarField) else np.asarray(values)
    data = data.astype(np.float64).ravel()
    vmin, vmax = float(data.min()), float(data.max())
    if not vmax > vmin:
        raise DegenerateInputError("常数场无法做 Otsu 阈值")

    normalized = (data - vmin) / (vmax - vmin)
    index = np.minimum((normalized * bins).astype(np.int64), bins - 1)
    hist = np.bincount(index, minlength=bins)

    total_n = int(hist.sum())
    total_s = int(np.dot(np.arange(bins, dtype=np.int64), hist))
    best_k, best_key = None, Fraction(-1)
    n0 = s0 = 0
    for k in range(1, bins):
        n0 += int(hist[k - 1])
        s0 += (k - 1) * int(hist[k - 1])
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            continue
        key = Fraction((total_n * s0 - total_s * n0) ** 2, n0 * n1)
        if key > best_key:
            best_k, best_key = k, key

    return vmin + best_k / bins * (vmax - vmin)


def connected_components(m: BinaryMask, connectivity: int = DEFAULT_CONNECTIVITY) -> Tuple[np.ndarray, np.ndarray]:
    """
    三维连通域标记

    Returns:
        (labels, counts): 标签 1..K；counts[k-1] 为标签 k 的体素数
    """
    if connectivity not in CONNECTIVITY_RANK:
        raise PreconditionError(f"连通性只能是 6/18/26: {connectivity}")
    if m.data.ndim != 3:
        raise ShapeMismatchError(f"连通域标记需要三维掩膜，实际 {m.data.ndim} 维")
    structure = ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])
    labels, k = ndimage.label(m.data, structure=structure)
    counts = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    return labels.astype(np.int32), counts.astype(np.int64)


def filter_components(labels: np.ndarray, counts: np.ndarray, min_size: int) -> List[Detection]:
    """保留体素数 ≥ min_size 的连通域，每个连通域即一个检测"""
    kept = [k + 1 for k in range(len(counts)) if counts[k] >= min_size]
    if not kept:
        return []
    centroids = ndimage.center_of_mass(np.ones(labels.shape), labels, kept)
    flat = labels.ravel()
    order = np.argsort(flat, kind='stable')
    boundaries = np.searchsorted(flat[order], np.arange(len(counts) + 2))
    detections = []
    for label, centroid in zip(kept, centroids):
        voxels = order[boundaries[label]:boundaries[label + 1]]
        detections.append(Detection(label=int(label), size=int(counts[label - 1]),
                                    centroid=tuple(float(c) for c in centroid), voxels=voxels))
    return detections


def score_detections(detections: Sequence[Detection], gt_labels: np.ndarray,
                     min_size: int = 0) -> DetectionEntry:
    """
    贪心匹配：按重叠体素数从大到小，预测与未匹配的真值重叠 ≥1 个体素即为 TP；
    每个真值最多匹配一次。
    """
    gt_flat = np.asarray(gt_labels).ravel()
    gt_ids = np.unique(gt_flat)
    n_gt = int(np.count_nonzero(gt_ids))

    candidates = []
    for index, det in enumerate(detections):
        hits = gt_flat[det.voxels]
        hits = hits[hits > 0]
        if hits.size == 0:
            continue
        ids, overlaps = np.unique(hits, return_counts=True)
        candidates.extend((int(o), index, int(g)) for g, o in zip(ids, overlaps))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

    matched_pred, matched_gt = set(), set()
    for _, index, gt_id in candidates:
        if index in matched_pred or gt_id in matched_gt:
            continue
        matched_pred.add(index)
        matched_gt.add(gt_id)

    tp = len(matched_pred)
    fp = len(detections) - tp
    fn = n_gt - tp
    precision = 1.0 if len(detections) == 0 else tp / (tp + fp)
    recall = 1.0 if n_gt == 0 else tp / (tp + fn)
    return DetectionEntry(int(min_size), tp, fp, fn, float(precision), float(recall))


def segment(volume: ScalarField, seg_params: UNetParams, tile=None, threads: int = 1) -> BinaryMask:
    """分割网络预测 -> Otsu 阈值 -> 前景掩膜"""
    prediction = predict(volume, seg_params, tile=tile, threads=threads)
    threshold = otsu_threshold(prediction)
    return BinaryMask(prediction.data >= threshold)


def pr_sweep(volume: ScalarField, seg_params: UNetParams, gt: np.ndarray,
             size_thresholds: Sequence[int], connectivity: int = DEFAULT_CONNECTIVITY,
             tile=None, threads: int = 1) -> DetectionReport:
    """在递增的尺寸阈值上扫描 precision-recall"""
    thresholds = [int(t) for t in size_thresholds]
    if not thresholds:
        raise PreconditionError("尺寸阈值列表为空")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise PreconditionError(f"尺寸阈值必须递增: {thresholds}")
    if np.asarray(gt).shape != volume.shape:
        raise ShapeMismatchError(f"真值形状 {np.asarray(gt).shape} 与体数据 {volume.shape} 不一致")

    mask = segment(volume, seg_params, tile, threads)
    labels, counts = connected_components(mask, connectivity)

    def _score(min_size: int) -> DetectionEntry:
        return score_detections(filter_components(labels, counts, min_size), gt, min_size)

    report = DetectionReport(entries=parallel_map(_score, thresholds, threads))
    logger.info(f"PR 扫描完成: {len(counts)} 个连通域，最佳 F1 {report.best_f1():.3f}")
    return report
