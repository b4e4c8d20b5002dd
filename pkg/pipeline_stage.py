"""
流水线阶段封装模块

把各个库模块串成完整流程：模拟 -> 配对 -> 重建 -> 训练 -> 复原 -> 评估 -> 下游检测。
每个阶段既可以在同一进程里接力（pipeline 子命令），也可以从上一阶段写出的文件
重新加载（其余子命令）。阶段执行统一返回 (是否成功, 结果, 错误)。
"""
import time
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from baselines import median_filter, nad_filter
from config import MANIFEST_NAME, MODEL_SUBDIR, PLOT_SUBDIR, PipelineConfig, config_hash
from downstream import BinaryMask, DetectionReport, pr_sweep, split_labels_by_region, train_segmenter
from errors import CryoCareError, MissingInputError, PreconditionError
from grid_core import Rng, ScalarField, bin_field
from metrics import FscCurve, correlation, fsc, wedge_inconsistency
from mrc_io import read_mrc, read_stack, write_mrc, write_stack
from nn_engine import (PairDataset, TrainConfig, TrainHistory, UNetConfig, UNetParams,
                       load_model, predict, save_model, train)
from pairing import (HalfSeries, ProjectionPair, half_series, projection_pairs,
                     split_series_even_odd_acquisition, sum_aligned_frames)
from phantom_sim import (AcquisitionSpec, MovieTilt, MovieTiltSeries, Phantom, PhantomSpec,
                         dose_symmetric_angles, make_phantom, sequential_angles, simulate_acquisition)
from plotting import plot_fsc, plot_history, plot_precision_recall
from results_handler import ResultsHandler
from tomo_recon import TiltSeries, WedgeMask, reconstruct, reconstruct_pair
from utils import save_run_manifest

logger = logging.getLogger(__name__)

# 去噪网络训练使用的随机子流（体模与采集分别占用 (0,) 和 (1,)）
DENOISER_STREAM = (2,)
SEGMENTER_STREAM = (3,)

# FSC 汇总时取平均的中频带（cycles/voxel）
FSC_BAND = (0.1, 0.3)

TILTS_CSV = "tilts.csv"
PAIRS_CSV = "pairs.csv"
HALVES_CSV = "halves.csv"


@dataclass(frozen=True, eq=False)
class TomogramSet:
    """两个半数据断层及其平均"""
    half_a: ScalarField
    half_b: ScalarField
    full: ScalarField


def _average(a: ScalarField, b: ScalarField) -> ScalarField:
    return a.with_data((a.data.astype(np.float64) + b.data.astype(np.float64)) / 2.0)


def _fit_patch(size: Sequence[int], shape: Sequence[int], period: int) -> Tuple[int, ...]:
    """块尺寸不超过场尺寸，并向下取整到池化周期的整数倍"""
    fitted = []
    for s, n in zip(size, shape):
        value = (min(int(s), int(n)) // period) * period
        if value < period:
            raise PreconditionError(f"场尺寸 {tuple(shape)} 放不下池化周期 {period} 的训练块")
        fitted.append(value)
    if tuple(fitted) != tuple(int(s) for s in size):
        logger.warning(f"⚠️ 训练块 {tuple(size)} 调整为 {tuple(fitted)}（场尺寸 {tuple(shape)}）")
    return tuple(fitted)


def _band_mean(curve: FscCurve, band: Tuple[float, float] = FSC_BAND) -> float:
    low, high = band
    keep = (curve.frequency >= low) & (curve.frequency <= high)
    if not keep.any():
        return float("nan")
    return float(curve.correlation[keep].mean())


def _join(values) -> str:
    return ";".join(str(v) for v in values)


class PipelineStageManager:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out_dir = cfg.out_dir
        self.threads = cfg.threads
        self.seed = cfg.seed
        self.scheme = cfg.scheme
        self.outputs: List[Path] = []
        self.results = ResultsHandler(self.out_dir)
        self.results.load_data()

    # ------------------------------------------------------------------ 路径

    @property
    def sim_dir(self) -> Path:
        return self.out_dir / "simulation"

    @property
    def movies_dir(self) -> Path:
        source = self.cfg.data["input_movies"]
        return Path(source) if source else self.sim_dir

    @property
    def pairs_dir(self) -> Path:
        return self.out_dir / "pairs"

    @property
    def tomo_dir(self) -> Path:
        return self.out_dir / "tomograms"

    @property
    def restored_dir(self) -> Path:
        return self.out_dir / "restored"

    @property
    def metrics_dir(self) -> Path:
        return self.out_dir / "metrics"

    @property
    def downstream_dir(self) -> Path:
        return self.out_dir / "downstream"

    @property
    def plots_dir(self) -> Path:
        return self.out_dir / PLOT_SUBDIR

    @property
    def model_path(self) -> Path:
        return self.out_dir / MODEL_SUBDIR / "denoiser.pt"

    @property
    def is_t2t(self) -> bool:
        return self.scheme.startswith("t2t")

    # ------------------------------------------------------------------ 输出记录

    def record_output(self, path: Path) -> Path:
        path = Path(path)
        if path not in self.outputs:
            self.outputs.append(path)
        return path

    def _write_volume(self, f: ScalarField, path: Path) -> Path:
        write_mrc(f, path)
        return self.record_output(path)

    def _write_stack(self, frames: Sequence[ScalarField], path: Path) -> Path:
        write_stack(frames, path)
        return self.record_output(path)

    def _write_csv(self, frame: pd.DataFrame, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format='%.8g')
        return self.record_output(path)

    def cleanup_outputs(self):
        """删除本次运行已写出的文件（失败时调用）"""
        removed = 0
        for path in reversed(self.outputs):
            try:
                if path.exists():
                    path.unlink()
                    removed += 1
            except OSError as e:
                logger.warning(f"删除输出文件失败 {path}: {e}")
        self.outputs.clear()
        if removed:
            logger.info(f"已删除 {removed} 个不完整的输出文件")

    # ------------------------------------------------------------------ 配置 -> 参数

    def phantom_spec(self) -> PhantomSpec:
        section = self.cfg.section("phantom")
        return PhantomSpec(
            shape=tuple(int(n) for n in section["shape"]),
            n_membranes=int(section["n_membranes"]),
            n_filaments=int(section["n_filaments"]),
            n_blobs=int(section["n_blobs"]),
            blob_radius_range=tuple(float(r) for r in section["blob_radius_range"]),
            density_levels=tuple(float(d) for d in section["density_levels"]),
            seed=self.seed,
        )

    def acquisition_spec(self) -> AcquisitionSpec:
        section = self.cfg.section("acquisition")
        if section["order"] == "dose_symmetric":
            if section["angle_min"] != -section["angle_max"]:
                raise PreconditionError("剂量对称采集要求 angle_min = -angle_max")
            angles = dose_symmetric_angles(section["angle_max"], section["angle_step"])
        else:
            angles = sequential_angles(section["angle_min"], section["angle_max"], section["angle_step"])
        return AcquisitionSpec(
            angles=angles,
            frames_per_tilt=int(section["frames_per_tilt"]),
            electrons_per_pixel_per_frame=float(section["electrons_per_pixel_per_frame"]),
            gaussian_readout_sigma=float(section["gaussian_readout_sigma"]),
            drift_per_frame=tuple(float(d) for d in section["drift_per_frame"]),
            seed=self.seed,
            noise_free=bool(section["noise_free"]),
        )

    def unet_config(self, spatial_dims: int, base_channels: Optional[int] = None) -> UNetConfig:
        section = self.cfg.section("unet_2d" if spatial_dims == 2 else "unet_3d")
        return UNetConfig(
            spatial_dims=spatial_dims,
            depth=int(section["depth"]),
            kernel=int(section["kernel"]),
            base_channels=int(base_channels or section["base_channels"]),
        )

    def train_config(self, stream: Tuple[int, ...] = DENOISER_STREAM,
                     epochs: Optional[int] = None) -> TrainConfig:
        section = self.cfg.section("train")
        return TrainConfig(
            epochs=int(epochs or section["epochs"]),
            batch_size=int(section["batch_size"]),
            learning_rate=float(section["learning_rate"]),
            beta1=float(section["beta1"]),
            beta2=float(section["beta2"]),
            eps=float(section["eps"]),
            validation_fraction=float(section["validation_fraction"]),
            seed=Rng(self.seed, stream).torch_seed(),
        )

    def _out_shape(self, series: TiltSeries, phantom: Optional[Phantom]) -> Optional[Tuple[int, ...]]:
        configured = self.cfg.section("reconstruction")["shape"]
        if configured:
            return tuple(int(n) for n in configured)
        if phantom is not None and phantom.density.shape[1] == series.projection_shape[0]:
            return phantom.density.shape
        return None

    @property
    def bin_factor(self) -> int:
        return int(self.cfg.section("reconstruction")["bin_factor"])

    @property
    def predict_tile(self):
        tile = self.cfg.section("reconstruction")["predict_tile"]
        return tuple(int(t) for t in tile) if tile else None

    def _bin(self, f: ScalarField) -> ScalarField:
        return bin_field(f, self.bin_factor) if self.bin_factor > 1 else f

    # ------------------------------------------------------------------ 阶段执行

    def run_stage(self, name: str, func: Callable, *args, **kwargs) -> Tuple[bool, Any, Optional[CryoCareError]]:
        """
        执行单个阶段

        Returns:
            Tuple[bool, Any, Optional[CryoCareError]]: (是否成功, 阶段结果, 错误)
        """
        logger.info(f"执行阶段: {name}")
        start = time.perf_counter()
        try:
            result = func(*args, **kwargs)
        except CryoCareError as e:
            logger.error(f"❌ 阶段 {name} 失败 [{e.category}]: {e}")
            return False, None, e
        except FileNotFoundError as e:
            error = MissingInputError(f"输入文件不存在: {e.filename or e}")
            logger.error(f"❌ 阶段 {name} 失败 [{error.category}]: {error}")
            return False, None, error
        except Exception as e:
            logger.exception(f"❌ 阶段 {name} 发生异常: {e}")
            return False, None, CryoCareError(f"{type(e).__name__}: {e}")
        logger.info(f"✅ 阶段 {name} 完成，用时 {time.perf_counter() - start:.1f}s")
        return True, result, None

    # ------------------------------------------------------------------ 模拟

    def simulate(self) -> Tuple[Phantom, MovieTiltSeries]:
        """生成体模并模拟剂量分割采集，写出体模、标签和每个倾转角的帧堆栈"""
        phantom = make_phantom(self.phantom_spec())
        movies = simulate_acquisition(phantom, self.acquisition_spec(), self.threads)

        self._write_volume(phantom.density, self.sim_dir / "phantom_density.mrc")
        self._write_volume(ScalarField(phantom.labels.astype(np.float32)), self.sim_dir / "phantom_labels.mrc")
        rows = []
        for index, tilt in enumerate(movies.sorted_by_angle()):
            name = f"movies/tilt_{index:03d}.mrc"
            self._write_stack(tilt.frames, self.sim_dir / name)
            rows.append({'tilt': index, 'angle': tilt.angle, 'acquisition_index': tilt.acquisition_index,
                         'n_frames': len(tilt.frames), 'file': name})
        self._write_csv(pd.DataFrame(rows), self.sim_dir / TILTS_CSV)

        self.results.add_metrics("simulate", {
            'n_tilts': len(movies),
            'frames_per_tilt': len(movies.tilts[0].frames),
            'n_targets': phantom.n_targets,
        })
        logger.info(f"模拟数据已写出: {self.sim_dir}")
        return phantom, movies

    def _read_tilt_table(self, directory: Path) -> pd.DataFrame:
        table_path = directory / TILTS_CSV
        if not table_path.exists():
            raise MissingInputError(f"倾转序列清单不存在: {table_path}")
        return pd.read_csv(table_path)

    def load_movies(self) -> MovieTiltSeries:
        directory = self.movies_dir
        table = self._read_tilt_table(directory)
        tilts = []
        for row in table.itertuples(index=False):
            path = directory / row.file
            if not path.exists():
                raise MissingInputError(f"帧堆栈不存在: {path}")
            tilts.append(MovieTilt(angle=float(row.angle), acquisition_index=int(row.acquisition_index),
                                   frames=tuple(read_stack(path))))
        logger.info(f"已加载 {len(tilts)} 个倾转角的电影帧: {directory}")
        return MovieTiltSeries(tilts=tuple(tilts))

    def load_phantom(self) -> Optional[Phantom]:
        """读取模拟时写出的体模；外部数据没有体模时返回 None"""
        density_path = self.sim_dir / "phantom_density.mrc"
        labels_path = self.sim_dir / "phantom_labels.mrc"
        if self.cfg.data["input_movies"] or not density_path.exists() or not labels_path.exists():
            logger.info("📄 没有可用的体模真值")
            return None
        density = read_mrc(density_path)
        labels = np.rint(read_mrc(labels_path).data).astype(np.int32)
        return Phantom(density=density, labels=labels)

    def load_simulation(self) -> Tuple[Optional[Phantom], MovieTiltSeries]:
        return self.load_phantom(), self.load_movies()

    def tilt_angles(self) -> List[float]:
        """倾转角（用于楔形指标），只读清单不读帧"""
        return sorted(float(a) for a in self._read_tilt_table(self.movies_dir)['angle'])

    # ------------------------------------------------------------------ 配对

    def pair(self, movies: MovieTiltSeries):
        """按当前方案配对并写出堆栈和来源清单"""
        if self.is_t2t:
            halves = half_series(movies, self.scheme, self.threads)
            for label, series in (("a", halves.a), ("b", halves.b)):
                self._write_stack([t.projection for t in series.tilts], self.pairs_dir / f"half_{label}.mrc")
            rows = [{'half': label, 'angle': t.angle, 'acquisition_index': t.acquisition_index}
                    for label, series in (("a", halves.a), ("b", halves.b)) for t in series.tilts]
            self._write_csv(pd.DataFrame(rows), self.pairs_dir / HALVES_CSV)
            self.results.add_metrics("pair", {'n_half_a': len(halves.a), 'n_half_b': len(halves.b)})
            return halves

        pairs = projection_pairs(movies, self.scheme, self.threads)
        self._write_stack([p.a for p in pairs], self.pairs_dir / "pairs_a.mrc")
        self._write_stack([p.b for p in pairs], self.pairs_dir / "pairs_b.mrc")
        rows = [{'pair': i, 'scheme': p.scheme, 'tilt_indices': _join(p.tilt_indices),
                 'angles': _join(p.angles)} for i, p in enumerate(pairs)]
        self._write_csv(pd.DataFrame(rows), self.pairs_dir / PAIRS_CSV)
        self.results.add_metric("pair", "n_pairs", len(pairs))
        return pairs

    def load_pairs(self) -> List[ProjectionPair]:
        table_path = self.pairs_dir / PAIRS_CSV
        if not table_path.exists():
            raise MissingInputError(f"投影对清单不存在: {table_path}，请先运行 pair")
        table = pd.read_csv(table_path, dtype={'tilt_indices': str, 'angles': str})
        first = read_stack(self.pairs_dir / "pairs_a.mrc")
        second = read_stack(self.pairs_dir / "pairs_b.mrc")
        pairs = []
        for row, a, b in zip(table.itertuples(index=False), first, second):
            pairs.append(ProjectionPair(
                a, b, scheme=row.scheme,
                tilt_indices=tuple(int(i) for i in row.tilt_indices.split(";")),
                angles=tuple(float(x) for x in row.angles.split(";")),
            ))
        return pairs

    # ------------------------------------------------------------------ 重建

    def raw_half_series(self, movies: MovieTiltSeries, pairs: Optional[List[ProjectionPair]] = None) -> HalfSeries:
        """
        原始半数据倾转序列

        t2t 方案直接用其拆分；p2p-ip/df 用每个倾转角的两半帧组成同角度的两个序列；
        p2p-tap 针对非剂量分割数据，按采集奇偶拆分。
        """
        if self.is_t2t:
            return half_series(movies, self.scheme, self.threads)
        if self.scheme == "p2p-tap":
            return split_series_even_odd_acquisition(sum_aligned_frames(movies, self.threads))
        if pairs is None:
            pairs = projection_pairs(movies, self.scheme, self.threads)
        acquisition = {i: t.acquisition_index for i, t in enumerate(movies.sorted_by_angle())}
        angles = [p.angles[0] for p in pairs]
        indices = [acquisition.get(p.tilt_indices[0], p.tilt_indices[0]) for p in pairs]
        return HalfSeries(TiltSeries.from_projections(angles, [p.a for p in pairs], indices),
                          TiltSeries.from_projections(angles, [p.b for p in pairs], indices), kind="df")

    def _reconstruct_halves(self, halves: HalfSeries, phantom: Optional[Phantom]) -> TomogramSet:
        window = self.cfg.section("reconstruction")["window"]
        first, second = reconstruct_pair(halves, self._out_shape(halves.a, phantom), window, self.threads)
        first, second = self._bin(first), self._bin(second)
        return TomogramSet(first, second, _average(first, second))

    def reconstruct(self, movies: MovieTiltSeries, phantom: Optional[Phantom] = None,
                    pairs: Optional[List[ProjectionPair]] = None) -> TomogramSet:
        """重建两个原始半数据断层；完整断层取二者平均"""
        raw = self._reconstruct_halves(self.raw_half_series(movies, pairs), phantom)
        self._write_volume(raw.half_a, self.tomo_dir / "raw_half_a.mrc")
        self._write_volume(raw.half_b, self.tomo_dir / "raw_half_b.mrc")
        self._write_volume(raw.full, self.tomo_dir / "raw.mrc")
        self.results.add_metric("reconstruct", "n_voxels", raw.full.data.size)
        return raw

    def _load_set(self, directory: Path, prefix: str, step: str) -> TomogramSet:
        paths = [directory / f"{prefix}_half_a.mrc", directory / f"{prefix}_half_b.mrc", directory / f"{prefix}.mrc"]
        for path in paths:
            if not path.exists():
                raise MissingInputError(f"断层文件不存在: {path}，请先运行 {step}")
        return TomogramSet(*(read_mrc(path) for path in paths))

    def load_tomograms(self) -> TomogramSet:
        return self._load_set(self.tomo_dir, "raw", "reconstruct")

    def load_restored(self) -> TomogramSet:
        return self._load_set(self.restored_dir, "restored", "restore")

    # ------------------------------------------------------------------ 训练

    def training_dataset(self, pairs: Optional[List[ProjectionPair]] = None,
                         raw: Optional[TomogramSet] = None) -> Tuple[PairDataset, UNetConfig]:
        """
        构造 Noise2Noise 训练块

        t2t: 两个半断层互为输入/目标（两种顺序），切三维块；
        p2p: 投影对切二维块，p2p-ip/df 同样使用两种顺序（p2p-tap 的配对本身已含互换）。
        """
        patches = self.cfg.section("patches")
        rng = Rng(self.seed, DENOISER_STREAM).derive(0)
        if self.is_t2t:
            if raw is None:
                raise PreconditionError("t2t 训练需要两个原始半断层")
            ucfg = self.unet_config(3)
            sources = [(raw.half_a, raw.half_b), (raw.half_b, raw.half_a)]
            size = _fit_patch(patches["size_3d"], raw.half_a.shape, ucfg.pool_period)
            return PairDataset.from_patches(sources, int(patches["count_3d"]), size, rng), ucfg

        if not pairs:
            raise PreconditionError("p2p 训练需要投影对")
        ucfg = self.unet_config(2)
        sources = [(p.a, p.b) for p in pairs]
        if self.scheme != "p2p-tap":
            sources += [(p.b, p.a) for p in pairs]
        size = _fit_patch(patches["size_2d"], pairs[0].a.shape, ucfg.pool_period)
        return PairDataset.from_patches(sources, int(patches["count_2d"]), size, rng), ucfg

    def train(self, pairs: Optional[List[ProjectionPair]] = None,
              raw: Optional[TomogramSet] = None) -> Tuple[UNetParams, TrainHistory]:
        dataset, ucfg = self.training_dataset(pairs, raw)
        params, history = train(dataset, ucfg, self.train_config())

        save_model(params, self.model_path)
        self.record_output(self.model_path)
        self._write_csv(history.to_frame(), self.metrics_dir / "train_history.csv")
        self.record_output(plot_history(history, self.plots_dir / "history.svg"))
        self.results.add_metrics("train", {
            'n_train': history.n_train,
            'n_val': history.n_val,
            'initial_val_loss': history.initial_val_loss,
            'final_val_loss': history.val_loss[-1],
        })
        return params, history

    def load_denoiser(self) -> UNetParams:
        if not self.model_path.exists():
            raise MissingInputError(f"模型文件不存在: {self.model_path}，请先运行 train")
        return load_model(self.model_path)

    # ------------------------------------------------------------------ 复原

    def _predict_series(self, series: TiltSeries, params: UNetParams) -> TiltSeries:
        predicted = [predict(t.projection, params, threads=self.threads) for t in series.tilts]
        return TiltSeries.from_projections(series.angles, predicted, series.acquisition_indices)

    def restore(self, params: UNetParams, raw: Optional[TomogramSet] = None,
                movies: Optional[MovieTiltSeries] = None,
                pairs: Optional[List[ProjectionPair]] = None,
                phantom: Optional[Phantom] = None) -> TomogramSet:
        """
        应用训练好的网络

        t2t: 两个半断层分别预测，完整结果为两者逐体素平均；
        p2p-ip/df: 每个投影对的两半分别预测，重建成两个复原半断层；
        p2p-tap: 每个倾转角单独预测，再按采集奇偶拆分重建。
        """
        if self.is_t2t:
            if raw is None:
                raise PreconditionError("t2t 复原需要原始半断层")
            first = predict(raw.half_a, params, tile=self.predict_tile, threads=self.threads)
            second = predict(raw.half_b, params, tile=self.predict_tile, threads=self.threads)
            restored = TomogramSet(first, second, _average(first, second))
        else:
            if movies is None:
                raise PreconditionError("p2p 复原需要倾转序列")
            if self.scheme == "p2p-tap":
                series = self._predict_series(sum_aligned_frames(movies, self.threads), params)
                halves = split_series_even_odd_acquisition(series)
            else:
                raw_halves = self.raw_half_series(movies, pairs)
                halves = HalfSeries(self._predict_series(raw_halves.a, params),
                                    self._predict_series(raw_halves.b, params), kind="df")
            restored = self._reconstruct_halves(halves, phantom)

        self._write_volume(restored.half_a, self.restored_dir / "restored_half_a.mrc")
        self._write_volume(restored.half_b, self.restored_dir / "restored_half_b.mrc")
        self._write_volume(restored.full, self.restored_dir / "restored.mrc")
        return restored

    # ------------------------------------------------------------------ 对照滤波

    def baseline_filters(self, f: ScalarField) -> Dict[str, ScalarField]:
        section = self.cfg.section("baselines")
        return {
            'median': median_filter(f, int(section["median_radius"])),
            'nad': nad_filter(f, int(section["nad_steps"]), float(section["nad_dt"]), section["nad_lambda"]),
        }

    # ------------------------------------------------------------------ 评估

    def _truth(self, phantom: Optional[Phantom], shape: Tuple[int, ...]) -> Optional[ScalarField]:
        if phantom is None:
            return None
        truth = self._bin(phantom.density)
        if truth.shape != shape:
            logger.warning(f"⚠️ 体模形状 {truth.shape} 与断层 {shape} 不一致，跳过与真值的比较")
            return None
        return truth

    def evaluate(self, raw: TomogramSet, restored: TomogramSet, angles: Sequence[float],
                 phantom: Optional[Phantom] = None) -> Dict[str, float]:
        """
        半数据 FSC（原始 / 复原 / NAD / 中值）、缺失楔形指标以及与体模的相关系数
        """
        shell_width = float(self.cfg.section("metrics")["shell_width"])
        filtered_a = self.baseline_filters(raw.half_a)
        filtered_b = self.baseline_filters(raw.half_b)
        curves = {
            'raw': fsc(raw.half_a, raw.half_b, shell_width),
            'restored': fsc(restored.half_a, restored.half_b, shell_width),
            'nad': fsc(filtered_a['nad'], filtered_b['nad'], shell_width),
            'median': fsc(filtered_a['median'], filtered_b['median'], shell_width),
        }
        files = {'raw': "fsc_raw.csv", 'restored': "fsc.csv", 'nad': "fsc_nad.csv", 'median': "fsc_median.csv"}
        for name, curve in curves.items():
            self.record_output(curve.write_csv(self.metrics_dir / files[name]))
        self.record_output(plot_fsc(curves, self.plots_dir / "fsc.svg"))

        values = {f"fsc_band_{name}": _band_mean(curve) for name, curve in curves.items()}

        wedge = WedgeMask.from_angles(angles)
        values['wedge_raw'] = wedge_inconsistency(raw.full, wedge)
        values['wedge_restored'] = wedge_inconsistency(restored.full, wedge)

        truth = self._truth(phantom, raw.full.shape)
        if truth is not None:
            baselines = self.baseline_filters(raw.full)
            for name, volume in baselines.items():
                self._write_volume(volume, self.restored_dir / f"{name}.mrc")
            values['corr_raw'] = correlation(raw.full, truth)
            values['corr_restored'] = correlation(restored.full, truth)
            for name, volume in baselines.items():
                values[f"corr_{name}"] = correlation(volume, truth)

        self.results.add_metrics("evaluate", values)
        logger.info(f"FSC 中频带均值: 原始 {values['fsc_band_raw']:.3f} -> 复原 {values['fsc_band_restored']:.3f}")
        logger.info(f"楔形指标: 原始 {values['wedge_raw']:.4f} -> 复原 {values['wedge_restored']:.4f}")
        return values

    # ------------------------------------------------------------------ 下游检测

    def downstream(self, raw: TomogramSet, restored: TomogramSet,
                   phantom: Optional[Phantom]) -> Dict[str, DetectionReport]:
        """
        在同一个标注断层上划分训练区/测试区，原始与复原数据各训练一个分割网络，
        在测试区上扫描尺寸阈值得到 PR 曲线
        """
        if phantom is None:
            raise MissingInputError("下游检测需要体模标签，请先运行 simulate")
        if phantom.labels.shape != raw.full.shape:
            raise PreconditionError(f"标签形状 {phantom.labels.shape} 与断层 {raw.full.shape} 不一致"
                                    f"（bin_factor={self.bin_factor}）")
        section = self.cfg.section("downstream")
        split = split_labels_by_region(phantom.labels, float(section["train_fraction"]), int(section["split_axis"]))
        train_slices, test_slices = split.train_slices(), split.test_slices()
        gt_test = phantom.labels[test_slices]
        train_mask = BinaryMask.from_labels(phantom.labels[train_slices])

        ucfg = self.unet_config(3, base_channels=int(section["base_channels"]))
        tcfg = self.train_config(SEGMENTER_STREAM, epochs=int(section["epochs"]))
        patch = _fit_patch(section["patch_size"], train_mask.shape, ucfg.pool_period)

        reports = {}
        for name, volume in (("raw", raw.full), ("restored", restored.full)):
            logger.info(f"下游检测: {name}")
            train_volume = volume.with_data(volume.data[train_slices])
            seg_params, _ = train_segmenter([(train_volume, train_mask)], ucfg, tcfg,
                                            int(section["patch_count"]), patch)
            test_volume = volume.with_data(volume.data[test_slices])
            report = pr_sweep(test_volume, seg_params, gt_test, section["size_thresholds"],
                              int(section["connectivity"]), tile=self.predict_tile, threads=self.threads)
            self.record_output(report.write_csv(self.downstream_dir / f"pr_{name}.csv"))
            self.results.add_metric("downstream", f"best_f1_{name}", report.best_f1())
            reports[name] = report

        self.results.add_metrics("downstream", {
            'n_train_targets': split.n_train_targets,
            'n_test_targets': split.n_test_targets,
        })
        self.record_output(plot_precision_recall(reports, self.plots_dir / "pr.svg"))
        return reports

    # ------------------------------------------------------------------ 收尾

    def finish(self, command: str) -> Dict:
        """保存汇总表和运行清单"""
        summary = self.results.save_data()
        if summary is not None:
            self.record_output(summary)
        self.results.print_statistics()
        return save_run_manifest(
            self.out_dir / MANIFEST_NAME, config_hash(self.cfg), self.seed, self.threads, self.outputs,
            extra={'command': command, 'scheme': self.scheme, 'config_source': self.cfg.source},
        )
