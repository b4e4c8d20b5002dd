"""
工具函数模块
"""
import json
import hashlib
import importlib
import logging
import platform
from pathlib import Path
from datetime import datetime, timezone
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Iterable, List, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# 包名映射：pip包名 -> 导入名
PACKAGE_MAPPING = {
    'numpy': 'numpy',
    'scipy': 'scipy',
    'pandas': 'pandas',
    'torch': 'torch',
    'mrcfile': 'mrcfile',
    'matplotlib': 'matplotlib',
    'tqdm': 'tqdm',
}


def check_dependencies() -> bool:
    """
    确认科学计算栈可以导入

    版本号记入 debug 日志，缺失时提示安装方式。
    """
    versions = package_versions()
    missing = [name for name, version in versions.items() if version == 'missing']
    for name, version in versions.items():
        if version != 'missing':
            logger.debug(f"✅ {name} {version}")

    if missing:
        for name in missing:
            logger.warning(f"❌ {name} 无法导入")
        logger.error(f"缺少依赖包: {', '.join(missing)}，请先安装 requirements.txt 中的依赖")
        return False

    logger.info(f"依赖检查通过: numpy {versions['numpy']}，torch {versions['torch']}，mrcfile {versions['mrcfile']}")
    return True


def package_versions() -> Dict[str, str]:
    """收集运行环境中各依赖包的版本号"""
    versions = {'python': platform.python_version()}
    for pip_name, import_name in PACKAGE_MAPPING.items():
        try:
            mod = importlib.import_module(import_name)
            versions[pip_name] = getattr(mod, '__version__', 'unknown')
        except ImportError:
            versions[pip_name] = 'missing'
    return versions


def parallel_map(func: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """
    按输入顺序返回结果的并行 map

    每个任务只写自己的输出，结果与线程数无关。
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def chunk_ranges(length: int, chunk: int) -> List[range]:
    """把 [0, length) 切成固定大小的区间（与线程数无关）"""
    return [range(start, min(start + chunk, length)) for start in range(0, length, chunk)]


def sha256_file(path: Path) -> str:
    """计算文件的 SHA-256"""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def save_run_manifest(manifest_path: Path, config_digest: str, seed: int, threads: int,
                      outputs: Iterable[Path], extra: Dict = None) -> Dict:
    """
    保存运行清单

    记录配置哈希、随机种子、依赖版本以及每个 MRC/CSV 输出文件的哈希，
    用于核对重复运行的结果是否逐字节一致。
    """
    manifest_path = Path(manifest_path)
    hashed = {}
    for path in sorted(Path(p) for p in outputs):
        if path.suffix.lower() in ('.mrc', '.csv') and path.exists():
            try:
                key = path.relative_to(manifest_path.parent).as_posix()
            except ValueError:
                key = str(path)
            hashed[key] = sha256_file(path)

    manifest = {
        'config_hash': config_digest,
        'seed': seed,
        'threads': threads,
        'versions': package_versions(),
        'created_utc': datetime.now(timezone.utc).strftime('%Y-%m-%d %H:%M:%S'),
        'outputs': hashed,
    }
    if extra:
        manifest.update(extra)

    try:
        with open(manifest_path, 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2, ensure_ascii=False, sort_keys=True)
        logger.info(f"运行清单已保存: {manifest_path}")
    except OSError as e:
        logger.error(f"保存运行清单失败: {e}")
        raise
    return manifest
