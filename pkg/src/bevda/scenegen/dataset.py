"""On-disk dataset: ``manifest.json`` plus one binary record per sample.

Record layout (all little-endian)::

    offset  size  field
    0       4     magic b"BEVS"
    4       4     u32 format version
    8       4     u32 M (views)
    12      4     u32 H
    16      4     u32 W
    20      4     u32 N (lidar points)
    24      4     u32 K (boxes)
    28      4     u32 domain tag (0 SOURCE, 1 TARGET)
    32      4     u32 CRC-32 of the payload
    36      8     u64 payload length in bytes
    44      ...   payload:
                    intrinsics  M*3*3 f8
                    extrinsics  M*4*4 f8
                    images      M*H*W*3 f4
                    lidar       N*3 f8
                    boxes       K*8 f8
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .render import CameraRig, DomainShiftConfig, MultiViewSample, SceneSpec

FORMAT_VERSION = 1
MAGIC = b"BEVS"
_HEADER = struct.Struct("<4s8IQ")
_TAGS = {"SOURCE": 0, "TARGET": 1}


class DatasetFormatError(Exception):
    def __init__(self, message: str, record: int | None = None, offset: int | None = None):
        where = []
        if record is not None:
            where.append(f"record {record}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.record = record
        self.offset = offset


def encode_sample(sample: MultiViewSample) -> bytes:
    M, H, W, _ = sample.images.shape
    parts = [
        np.ascontiguousarray(sample.rig.intrinsics, dtype="<f8").tobytes(),
        np.ascontiguousarray(sample.rig.extrinsics, dtype="<f8").tobytes(),
        np.ascontiguousarray(sample.images, dtype="<f4").tobytes(),
        np.ascontiguousarray(sample.lidar_points, dtype="<f8").tobytes(),
        np.ascontiguousarray(sample.gt_boxes, dtype="<f8").tobytes(),
    ]
    payload = b"".join(parts)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, M, H, W, len(sample.lidar_points),
                          len(sample.gt_boxes), _TAGS[sample.domain_tag],
                          zlib.crc32(payload), len(payload))
    return header + payload


def decode_sample(buf: bytes, record: int = 0) -> MultiViewSample:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError("truncated header", record, len(buf))
    magic, version, M, H, W, N, K, tag, crc, length = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", record, 0)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"format version {version} != {FORMAT_VERSION}", record, 4)
    expected = 8 * (M * 9 + M * 16 + N * 3 + K * 8) + 4 * (M * H * W * 3)
    if length != expected:
        raise DatasetFormatError(f"payload length {length} inconsistent with shape header",
                                 record, 36)
    payload = buf[_HEADER.size:]
    if len(payload) < length:
        raise DatasetFormatError(f"truncated record: {len(payload)} of {length} payload bytes",
                                 record, len(buf))
    if len(payload) > length:
        raise DatasetFormatError("trailing bytes after record", record, _HEADER.size + length)
    if zlib.crc32(payload) != crc:
        raise DatasetFormatError("payload checksum mismatch", record, _HEADER.size)

    off = 0

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr.astype(dtype[1:], copy=True)

    intr = take("<f8", M * 9, (M, 3, 3))
    extr = take("<f8", M * 16, (M, 4, 4))
    images = take("<f4", M * H * W * 3, (M, H, W, 3))
    lidar = take("<f8", N * 3, (N, 3))
    boxes = take("<f8", K * 8, (K, 8))
    tag_name = {v: k for k, v in _TAGS.items()}.get(tag)
    if tag_name is None:
        raise DatasetFormatError(f"unknown domain tag {tag}", record, 28)
    return MultiViewSample(images=images, lidar_points=lidar, rig=CameraRig(intr, extr),
                           gt_boxes=boxes, domain_tag=tag_name)


def write_dataset(directory, samples: Iterable[MultiViewSample], spec: SceneSpec | None = None,
                  shift: DomainShiftConfig | None = None, split: str = "src") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.glob("record_*.bin"):
        stale.unlink()
    records = []
    for i, sample in enumerate(samples):
        name = f"record_{i:06d}.bin"
        data = encode_sample(sample)
        (directory / name).write_bytes(data)
        records.append({"file": name, "bytes": len(data)})
    manifest = {
        "format_version": FORMAT_VERSION,
        "split": split,
        "spec": spec.to_dict() if spec is not None else None,
        "shift": shift.to_dict() if shift is not None else None,
        "count": len(records),
        "records": records,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    manifest = json.loads(path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"manifest format version {version} != {FORMAT_VERSION}")
    return manifest


def read_dataset(directory) -> list[MultiViewSample]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    out = []
    for i, rec in enumerate(manifest["records"]):
        buf = (directory / rec["file"]).read_bytes()
        if len(buf) != rec["bytes"]:
            raise DatasetFormatError(
                f"record size {len(buf)} != manifest size {rec['bytes']}", i, min(len(buf), rec["bytes"]))
        out.append(decode_sample(buf, i))
    return out


def samples_equal(a: Sequence[MultiViewSample], b: Sequence[MultiViewSample]) -> bool:
    """Bitwise equality of two sample sequences."""
    if len(a) != len(b):
        return False
    return all(encode_sample(x) == encode_sample(y) for x, y in zip(a, b))
