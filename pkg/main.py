"""
cryo-CARE 断层去噪系统
主入口文件

子命令: simulate | pair | reconstruct | train | restore | filter | fsc | segment | evaluate | pipeline
"""
import sys
import json
import logging
import argparse
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from tqdm import tqdm

# 导入项目模块
from config import LOG_SUBDIR, SCHEMES, ensure_directories, load_pipeline_config, setup_logging
from utils import check_dependencies
from errors import CryoCareError, UsageError, exit_code_for
from baselines import median_filter, nad_filter
from metrics import fsc
from mrc_io import read_mrc, write_mrc
from pipeline_stage import PipelineStageManager
from plotting import plot_fsc

logger = logging.getLogger(__name__)

class CryoCareSystem:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.command = args.command
        self.cfg = None
        self.manager: Optional[PipelineStageManager] = None
        self.state: Dict[str, Any] = {}
        self.completed: List[str] = []
        self.failed_stage: Optional[str] = None

    def _check_arguments(self):
        """filter/fsc 的输出不能覆盖输入文件"""
        inputs = [getattr(self.args, name, None) for name in ("input", "volume_a", "volume_b")]
        output = getattr(self.args, "output", None)
        if output and any(p and Path(p).resolve() == Path(output).resolve() for p in inputs):
            raise UsageError(f"输出文件不能与输入相同: {output}")

    def initialize(self):
        """加载配置、设置日志并检查依赖"""
        self._check_arguments()
        overrides = {
            'seed': self.args.seed,
            'threads': self.args.threads,
            'scheme': self.args.scheme,
            'out_dir': self.args.out_dir,
        }
        self.cfg = load_pipeline_config(self.args.config, overrides)
        ensure_directories(self.cfg.out_dir)
        setup_logging(self.cfg.out_dir / LOG_SUBDIR)

        logger.info("=" * 60)
        logger.info("cryo-CARE 断层去噪系统")
        logger.info("=" * 60)
        logger.info(f"子命令: {self.command}")
        logger.info(f"配置来源: {self.cfg.source or '内置默认值'}")
        logger.info(f"配对方案: {self.cfg.scheme}，seed={self.cfg.seed}，threads={self.cfg.threads}")
        logger.info(f"输出目录: {self.cfg.out_dir}")

        if not check_dependencies():
            raise CryoCareError("依赖包检查失败")
        self.manager = PipelineStageManager(self.cfg)
        logger.info("系统初始化完成")

    # ------------------------------------------------------------------ 阶段计划

    def plan(self) -> List[str]:
        """当前子命令要依次执行的阶段"""
        scheme = self.cfg.scheme
        t2t = scheme.startswith("t2t")
        if self.command == "simulate":
            return ["simulate"]
        if self.command == "pair":
            return ["load_movies", "pair"]
        if self.command == "reconstruct":
            return ["load_simulation", "reconstruct"]
        if self.command == "train":
            return ["load_tomograms", "train"] if t2t else ["load_pairs", "train"]
        if self.command == "restore":
            if t2t:
                return ["load_denoiser", "load_tomograms", "restore"]
            steps = ["load_denoiser", "load_simulation"]
            if scheme != "p2p-tap":
                steps.append("load_pairs")
            return steps + ["restore"]
        if self.command == "evaluate":
            return ["load_phantom", "load_tomograms", "load_restored", "tilt_angles", "evaluate"]
        if self.command == "segment":
            return ["load_phantom", "load_tomograms", "load_restored", "downstream"]
        if self.command in ("filter", "fsc"):
            return [self.command]

        first = "load_simulation" if self.cfg.data["input_movies"] else "simulate"
        steps = [first, "pair", "reconstruct", "train", "restore", "evaluate"]
        if self.cfg.section("downstream")["enabled"]:
            steps.append("downstream_optional")
        return steps

    def _step(self, name: str) -> Callable[[], Any]:
        return getattr(self, f"_step_{name}")

    # ------------------------------------------------------------------ 各阶段

    def _step_simulate(self):
        self.state['phantom'], self.state['movies'] = self.manager.simulate()

    def _step_load_simulation(self):
        self.state['phantom'], self.state['movies'] = self.manager.load_simulation()

    def _step_load_movies(self):
        self.state['movies'] = self.manager.load_movies()

    def _step_load_phantom(self):
        self.state['phantom'] = self.manager.load_phantom()

    def _step_load_pairs(self):
        self.state['pairs'] = self.manager.load_pairs()

    def _step_load_tomograms(self):
        self.state['raw'] = self.manager.load_tomograms()

    def _step_load_restored(self):
        self.state['restored'] = self.manager.load_restored()

    def _step_load_denoiser(self):
        self.state['params'] = self.manager.load_denoiser()

    def _step_tilt_angles(self):
        self.state['angles'] = self.manager.tilt_angles()

    def _step_pair(self):
        result = self.manager.pair(self.state['movies'])
        if isinstance(result, list):
            self.state['pairs'] = result

    def _step_reconstruct(self):
        self.state['raw'] = self.manager.reconstruct(self.state['movies'], self.state.get('phantom'),
                                                     self.state.get('pairs'))

    def _step_train(self):
        self.state['params'], self.state['history'] = self.manager.train(
            pairs=self.state.get('pairs'), raw=self.state.get('raw'))

    def _step_restore(self):
        self.state['restored'] = self.manager.restore(
            self.state['params'], raw=self.state.get('raw'), movies=self.state.get('movies'),
            pairs=self.state.get('pairs'), phantom=self.state.get('phantom'))

    def _step_evaluate(self):
        angles = self.state.get('angles') or self.state['movies'].angles
        self.state['metrics'] = self.manager.evaluate(self.state['raw'], self.state['restored'], angles,
                                                      self.state.get('phantom'))

    def _step_downstream(self):
        self.state['reports'] = self.manager.downstream(self.state['raw'], self.state['restored'],
                                                        self.state.get('phantom'))

    def _step_downstream_optional(self):
        """pipeline 中没有体模标签或做了分箱时跳过下游检测"""
        phantom = self.state.get('phantom')
        if phantom is None:
            logger.warning("⚠️ 没有体模标签，跳过下游检测")
            return
        if phantom.labels.shape != self.state['raw'].full.shape:
            logger.warning("⚠️ 断层经过分箱，与标签形状不一致，跳过下游检测")
            return
        self._step_downstream()

    def _step_filter(self):
        section = self.cfg.section("baselines")
        volume = read_mrc(self.args.input)
        if self.args.method == "median":
            radius = self.args.radius if self.args.radius is not None else section["median_radius"]
            result = median_filter(volume, int(radius))
        else:
            steps = self.args.steps if self.args.steps is not None else section["nad_steps"]
            dt = self.args.dt if self.args.dt is not None else section["nad_dt"]
            lam = self.args.lam if self.args.lam is not None else section["nad_lambda"]
            result = nad_filter(volume, int(steps), float(dt), lam, show_progress=True)
        write_mrc(result, self.args.output)
        self.manager.record_output(Path(self.args.output))
        logger.info(f"{self.args.method} 滤波结果已写出: {self.args.output}")

    def _step_fsc(self):
        shell_width = self.args.shell_width or float(self.cfg.section("metrics")["shell_width"])
        curve = fsc(read_mrc(self.args.volume_a), read_mrc(self.args.volume_b), shell_width)
        self.manager.record_output(curve.write_csv(self.args.output))
        if self.args.plot:
            self.manager.record_output(plot_fsc({"fsc": curve}, self.args.plot))
        self.manager.results.add_metric("fsc", "n_shells", len(curve))

    # ------------------------------------------------------------------ 主流程

    def run(self) -> Tuple[bool, Optional[CryoCareError]]:
        """按计划执行所有阶段；任一阶段失败即停止并删除本次写出的文件"""
        steps = self.plan()
        logger.info(f"开始执行 {len(steps)} 个阶段: {', '.join(steps)}")
        logger.info("=" * 60)

        with tqdm(steps, desc="流水线进度", unit="阶段", disable=len(steps) < 2) as pbar:
            for name in pbar:
                pbar.set_description(f"阶段 {name}")
                success, _, error = self.manager.run_stage(name, self._step(name))
                if not success:
                    self.failed_stage = name
                    self.manager.cleanup_outputs()
                    return False, error
                self.completed.append(name)
                pbar.set_postfix({"完成": len(self.completed)})

        self.manager.finish(self.command)
        self._print_final_statistics()
        logger.info("=" * 60)
        logger.info("处理完成！")
        return True, None

    def _print_final_statistics(self):
        logger.info("\n" + "=" * 60)
        logger.info("最终处理统计:")
        logger.info(f"完成阶段: {', '.join(self.completed)}")
        logger.info(f"写出文件: {len(self.manager.outputs)}")
        metrics = self.state.get('metrics')
        if metrics:
            logger.info(f"FSC 中频带: 原始 {metrics['fsc_band_raw']:.3f}，复原 {metrics['fsc_band_restored']:.3f}")
        reports = self.state.get('reports')
        if reports:
            for name, report in reports.items():
                logger.info(f"最佳 F1 ({name}): {report.best_f1():.3f}")


def _common_arguments() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="配置文件路径，或内置名称 demo / acceptance")
    common.add_argument("--seed", type=int, help="随机种子")
    common.add_argument("--threads", type=int, help="并行线程数（不影响数值结果）")
    common.add_argument("--scheme", choices=SCHEMES, help="配对方案")
    common.add_argument("--out-dir", dest="out_dir", help="输出目录")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cryocare", description="cryo-CARE 断层去噪流水线")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common = _common_arguments()

    helps = {
        "simulate": "生成体模并模拟剂量分割采集",
        "pair": "按配对方案生成训练对",
        "reconstruct": "重建两个原始半数据断层",
        "train": "Noise2Noise 训练去噪网络",
        "restore": "用训练好的网络复原断层",
        "segment": "下游分割与检测，输出 PR 曲线",
        "evaluate": "FSC、缺失楔形指标与对照滤波",
        "pipeline": "端到端运行全部阶段",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)

    filt = sub.add_parser("filter", parents=[common], help="对 MRC 体数据做中值或 NAD 滤波")
    filt.add_argument("input", help="输入 MRC")
    filt.add_argument("output", help="输出 MRC")
    filt.add_argument("--method", choices=("median", "nad"), default="nad")
    filt.add_argument("--radius", type=int, help="中值滤波半径")
    filt.add_argument("--steps", type=int, help="NAD 迭代步数")
    filt.add_argument("--dt", type=float, help="NAD 时间步长")
    filt.add_argument("--lambda", dest="lam", type=float, help="NAD 边缘尺度")

    curve = sub.add_parser("fsc", parents=[common], help="计算两个体数据之间的 FSC")
    curve.add_argument("volume_a", help="第一个 MRC")
    curve.add_argument("volume_b", help="第二个 MRC")
    curve.add_argument("output", help="输出 CSV")
    curve.add_argument("--shell-width", dest="shell_width", type=float, help="壳层宽度（频率格点数）")
    curve.add_argument("--plot", help="同时输出 SVG 曲线")
    return parser


def _report_error(error: Exception):
    payload = error.to_dict() if isinstance(error, CryoCareError) else {"error": "runtime", "message": str(error)}
    print(json.dumps(payload, ensure_ascii=False), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码（0 成功，1 运行失败，2 用法/配置错误）"""
    args = build_parser().parse_args(argv)
    system = CryoCareSystem(args)
    try:
        system.initialize()
    except CryoCareError as e:
        logger.error(f"初始化失败 [{e.category}]: {e}")
        _report_error(e)
        return exit_code_for(e)

    try:
        success, error = system.run()
    except KeyboardInterrupt:
        logger.warning("用户中断处理")
        system.manager.cleanup_outputs()
        error = CryoCareError("用户中断")
        success = False

    if success:
        return 0
    logger.error(f"程序运行失败（阶段 {system.failed_stage}）: {error}")
    _report_error(error)
    return exit_code_for(error)


if __name__ == "__main__":
    sys.exit(main())
