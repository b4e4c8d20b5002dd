"""
结果汇总模块

把每次运行的各项指标收集到 pandas 表格中，保存为 summary.csv。
"""
import math
import logging
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

logger = logging.getLogger(__name__)

SUMMARY_NAME = "summary.csv"
SUMMARY_COLUMNS = ['stage', 'metric', 'value', 'note']


class ResultsHandler:
    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.summary_file = self.out_dir / SUMMARY_NAME
        self.df = pd.DataFrame(columns=SUMMARY_COLUMNS)

    def load_data(self) -> bool:
        """加载已有的 summary.csv（分步运行时各子命令的结果追加到同一张表）"""
        if not self.summary_file.exists():
            logger.info("📄 未找到已有汇总表，新建")
            return False
        try:
            self.df = pd.read_csv(self.summary_file, dtype={'stage': str, 'metric': str, 'note': str})
            self.df['note'] = self.df['note'].fillna('')
            logger.info(f"成功加载汇总表: {self.summary_file}，共 {len(self.df)} 条")
            return True
        except Exception as e:
            logger.warning(f"汇总表读取失败，重新开始: {e}")
            self.df = pd.DataFrame(columns=SUMMARY_COLUMNS)
            return False

    def add_metric(self, stage: str, metric: str, value: float, note: str = ""):
        """写入一条指标；同一 (stage, metric) 已存在时覆盖"""
        mask = (self.df['stage'] == stage) & (self.df['metric'] == metric)
        if mask.any():
            self.df.loc[mask, ['value', 'note']] = [float(value), note]
        else:
            row = pd.DataFrame([{'stage': stage, 'metric': metric, 'value': float(value), 'note': note}])
            self.df = row if self.df.empty else pd.concat([self.df, row], ignore_index=True)

    def add_metrics(self, stage: str, values: Dict[str, float]):
        for metric, value in values.items():
            self.add_metric(stage, metric, value)

    def get_metric(self, stage: str, metric: str) -> Optional[float]:
        mask = (self.df['stage'] == stage) & (self.df['metric'] == metric)
        if not mask.any():
            return None
        return float(self.df.loc[mask, 'value'].iloc[0])

    def save_data(self) -> Optional[Path]:
        """按 (stage, metric) 排序后保存"""
        if self.df.empty:
            logger.warning("没有指标需要保存")
            return None
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            ordered = self.df.sort_values(['stage', 'metric'], kind='stable').reset_index(drop=True)
            ordered.to_csv(self.summary_file, index=False, float_format='%.8g')
            logger.info(f"汇总表已保存到: {self.summary_file}")
            return self.summary_file
        except OSError as e:
            logger.error(f"保存汇总表失败: {e}")
            raise

    def get_statistics(self) -> Dict:
        if self.df.empty:
            return {}
        values = pd.to_numeric(self.df['value'], errors='coerce')
        return {
            'total_metrics': len(self.df),
            'stages': sorted(self.df['stage'].unique().tolist()),
            'non_finite': int((~values.apply(lambda v: math.isfinite(v) if pd.notna(v) else False)).sum()),
        }

    def stage_rows(self, stage: str) -> List[Dict]:
        return self.df[self.df['stage'] == stage].to_dict('records')

    def print_statistics(self):
        stats = self.get_statistics()
        if not stats:
            logger.info("暂无统计信息")
            return

        logger.info("=" * 50)
        logger.info("运行指标汇总:")
        logger.info(f"指标条数: {stats['total_metrics']}")
        logger.info(f"阶段: {', '.join(stats['stages'])}")
        for stage in stats['stages']:
            for row in self.stage_rows(stage):
                logger.info(f"  [{stage}] {row['metric']}: {row['value']:.4g}")
        if stats['non_finite']:
            logger.info(f"非有限值: {stats['non_finite']}")
        logger.info("=" * 50)
