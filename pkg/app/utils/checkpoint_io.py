"""체크포인트 입출력

형식: JSON 헤더 한 줄 + "\\n" + 헤더 순서대로 이어 붙인 little-endian 원시 배열.
헤더는 키 정렬 + 공백 없는 직렬화라 save → load → save가 같은 바이트를 만든다.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from app.core.errors import CheckpointFormatError, MissingArtifactError
from app.core.tensor import Tensor
from app.utils.logger import get_logger

logger = get_logger(__name__)

FORMAT_NAME = "draft-lab-ckpt"
FORMAT_VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}

ArrayLike = Union[np.ndarray, Tensor]


def _as_array(value: ArrayLike) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.dtype.kind == "f":
        return arr.astype("<f8" if arr.dtype.itemsize == 8 else "<f4", copy=False)
    if arr.dtype.kind in "iu":
        return arr.astype("<i8", copy=False)
    raise CheckpointFormatError(f"저장할 수 없는 dtype: {arr.dtype}")


def encode_checkpoint(tensors: Mapping[str, ArrayLike], meta: Optional[Dict[str, Any]] = None) -> bytes:
    """이름 정렬 순서로 헤더와 payload를 만든다"""
    entries = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(_as_array(tensors[name]))
        raw = arr.tobytes(order="C")
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": _DTYPE_NAMES[arr.dtype.str],
            "offset": offset,
            "nbytes": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": meta or {},
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return head.encode("utf-8") + b"\n" + b"".join(payloads)


def decode_checkpoint(blob: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    newline = blob.find(b"\n")
    if newline < 0:
        raise CheckpointFormatError("헤더 구분자(\\n)가 없습니다")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"헤더 JSON 파싱 실패: {e}") from e
    if header.get("format") != FORMAT_NAME:
        raise CheckpointFormatError(f"알 수 없는 체크포인트 형식: {header.get('format')}")

    body = memoryview(blob)[newline + 1:]
    tensors: Dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointFormatError(f"알 수 없는 dtype: {entry['dtype']}")
        start, size = int(entry["offset"]), int(entry["nbytes"])
        if start + size > len(body):
            raise CheckpointFormatError(f"payload가 잘렸습니다: {entry['name']}")
        arr = np.frombuffer(body[start:start + size], dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return tensors, header.get("meta", {})


def save_checkpoint(
    path: Union[str, Path],
    tensors: Mapping[str, ArrayLike],
    meta: Optional[Dict[str, Any]] = None,
) -> str:
    """체크포인트를 쓰고 payload digest를 반환"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = encode_checkpoint(tensors, meta)
        path.write_bytes(blob)
    except OSError as e:
        logger.error(f"❌ [CKPT_SAVE] 저장 실패: {path} ({e})")
        raise
    digest = hashlib.blake2b(blob, digest_size=16).hexdigest()
    logger.info(f"💾 [CKPT_SAVE] {path} (텐서 {len(tensors)}개, {digest[:12]})")
    return digest


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"체크포인트가 없습니다: {path}")
    tensors, meta = decode_checkpoint(path.read_bytes())
    logger.info(f"📂 [CKPT_LOAD] {path} (텐서 {len(tensors)}개)")
    return tensors, meta


def file_digest(path: Union[str, Path]) -> str:
    """파일 전체 해시 (파라미터 불변성 검사용)"""
    return hashlib.blake2b(Path(path).read_bytes(), digest_size=16).hexdigest()


def tensors_digest(tensors: Mapping[str, ArrayLike]) -> str:
    """메모리 상 파라미터 묶음의 해시 (헤더 메타 제외)"""
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(tensors):
        arr = np.ascontiguousarray(_as_array(tensors[name]))
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()
