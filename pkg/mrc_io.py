"""
MRC2014 文件读写模块

只支持 mode 2（32 位浮点）、小端、无扩展头的子集；其它情况给出明确的错误。
二维投影按 nz=1 的体数据存储，倾转序列与断层重建共用同一格式。
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import mrcfile
import numpy as np
from mrcfile.dtypes import HEADER_DTYPE

from errors import (BadMagicError, InvalidFieldError, TruncatedPayloadError,
                    UnsupportedModeError)
from grid_core import ScalarField

logger = logging.getLogger(__name__)

HEADER_BYTES = 1024
MAP_ID = b'MAP '
FLOAT32_MODE = 2


@dataclass(frozen=True)
class MrcHeader:
    """MRC2014 头部中本项目关心的字段"""
    nx: int
    ny: int
    nz: int
    mode: int
    cella: Tuple[float, float, float]
    dmin: float
    dmax: float
    dmean: float
    map_id: bytes
    machine_stamp: bytes
    extended_bytes: int = 0

    @property
    def payload_bytes(self) -> int:
        return self.nx * self.ny * self.nz * 4

    @property
    def byte_order(self) -> str:
        return '>' if self.machine_stamp[:1] == b'\x11' else '<'

    @property
    def voxel_size(self) -> Tuple[float, float, float]:
        """(z, y, x) 方向的体素尺寸"""
        sizes = []
        for cell, n in zip(reversed(self.cella), (self.nz, self.ny, self.nx)):
            sizes.append(float(cell) / n if n > 0 and cell > 0 else 1.0)
        return tuple(sizes)


def _load_bytes(source: Union[bytes, bytearray, str, Path]) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    with open(source, 'rb') as f:
        return f.read()


def read_mrc_header(source: Union[bytes, str, Path]) -> MrcHeader:
    """解析并校验 1024 字节的头部"""
    buf = _load_bytes(source)
    if len(buf) < HEADER_BYTES:
        raise TruncatedPayloadError(f"文件长度 {len(buf)} 小于 MRC 头部的 {HEADER_BYTES} 字节")

    machine_stamp = bytes(buf[212:216])
    order = '>' if machine_stamp[:1] == b'\x11' else '<'
    raw = np.frombuffer(buf[:HEADER_BYTES], dtype=HEADER_DTYPE.newbyteorder(order))[0]

    map_id = bytes(raw['map'])
    if map_id != MAP_ID:
        raise BadMagicError(f"MAP 标识错误: {map_id!r}，不是 MRC 文件或文件已损坏")

    mode = int(raw['mode'])
    if mode != FLOAT32_MODE:
        raise UnsupportedModeError(f"不支持的数据模式 {mode}（只支持 mode 2 float32）")

    cella = raw['cella']
    return MrcHeader(
        nx=int(raw['nx']), ny=int(raw['ny']), nz=int(raw['nz']),
        mode=mode,
        cella=(float(cella['x']), float(cella['y']), float(cella['z'])),
        dmin=float(raw['dmin']), dmax=float(raw['dmax']), dmean=float(raw['dmean']),
        map_id=map_id,
        machine_stamp=machine_stamp,
        extended_bytes=int(raw['nsymbt']),
    )


def read_mrc(source: Union[bytes, str, Path]) -> ScalarField:
    """
    读取 mode 2 MRC 文件

    Args:
        source: 文件内容（bytes）或文件路径

    Returns:
        ScalarField: 形状 (nz, ny, nx)，体素尺寸 = cella / 维度
    """
    buf = _load_bytes(source)
    header = read_mrc_header(buf)

    offset = HEADER_BYTES + header.extended_bytes
    available = len(buf) - offset
    if available < header.payload_bytes:
        raise TruncatedPayloadError(
            f"数据区不完整: 需要 {header.payload_bytes} 字节，实际 {max(available, 0)} 字节"
        )

    count = header.nx * header.ny * header.nz
    data = np.frombuffer(buf, dtype=header.byte_order + 'f4', count=count, offset=offset)
    data = data.reshape(header.nz, header.ny, header.nx).astype(np.float32)
    return ScalarField(data, header.voxel_size)


def write_mrc(f: Union[ScalarField, np.ndarray], dest: Union[str, Path],
              voxel_size: Optional[Sequence[float]] = None) -> int:
    """
    写出小端 mode 2 MRC 文件，dmin/dmax/dmean 由数据重新计算

    Args:
        f: 2D 或 3D 场（2D 按 nz=1 写出）；也接受 numpy 数组
        dest: 目标路径
        voxel_size: 传入 numpy 数组时使用的体素尺寸

    Returns:
        int: 写入的字节数
    """
    if isinstance(f, ScalarField):
        data, voxel = f.data, f.voxel_size
    else:
        data = np.asarray(f, dtype=np.float32)
        voxel = tuple(voxel_size) if voxel_size is not None else (1.0,) * data.ndim
        if not np.all(np.isfinite(data)):
            raise InvalidFieldError("数据含有 NaN/Inf，拒绝写出 MRC 文件")

    if data.ndim == 2:
        data = data[np.newaxis]
        voxel = (1.0,) + tuple(voxel)
    if data.ndim != 3:
        raise InvalidFieldError(f"只能写出 2D/3D 数据，实际 {data.ndim} 维")

    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    vz, vy, vx = (float(v) for v in voxel)

    with mrcfile.new(str(dest), overwrite=True) as mrc:
        mrc.set_data(np.ascontiguousarray(data, dtype='<f4'))
        mrc.voxel_size = (vx, vy, vz)
        mrc.update_header_stats()

    written = dest.stat().st_size
    logger.debug(f"MRC 已写出: {dest} ({written} 字节)")
    return written


def write_stack(frames: Sequence[ScalarField], dest: Union[str, Path]) -> int:
    """把一组相同形状的二维图像写成 nz=len(frames) 的堆栈"""
    stack = np.stack([frame.data for frame in frames], axis=0)
    voxel = (1.0,) + tuple(frames[0].voxel_size)
    return write_mrc(ScalarField(stack, voxel), dest)


def read_stack(source: Union[bytes, str, Path]):
    """读取堆栈，返回二维 ScalarField 列表"""
    volume = read_mrc(source)
    voxel = volume.voxel_size[1:]
    return [ScalarField(plane, voxel) for plane in volume.data]
