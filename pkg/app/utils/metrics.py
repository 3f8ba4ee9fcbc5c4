"""JSONL 지표 기록기

metrics.jsonl은 실행 간 바이트 재현이 되도록 벽시계 시간을 빼고 쓰고,
wall_ms는 같은 디렉터리의 timings.jsonl에 따로 남긴다.
"""

import json
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Optional, Union

from pydantic import BaseModel

from app.schemas.records import MetricsRecord


class MetricsWriter:
    """스텝 지표를 한 줄씩 추가 (with 블록으로 사용)"""

    def __init__(self, out_dir: Union[str, Path], name: str = "metrics.jsonl"):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / name
        self.timings_path = self.out_dir / "timings.jsonl"
        self.records: List[MetricsRecord] = []
        self._fh: Optional[Any] = None
        self._timings: Optional[Any] = None

    def __enter__(self) -> "MetricsWriter":
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8", newline="\n")
        self._timings = self.timings_path.open("w", encoding="utf-8", newline="\n")
        return self

    def __exit__(self, *exc: Any) -> bool:
        for fh in (self._fh, self._timings):
            if fh is not None:
                fh.close()
        self._fh = self._timings = None
        return False

    def write(self, record: MetricsRecord) -> None:
        self.records.append(record)
        if self._fh is None or self._timings is None:
            return
        self._fh.write(record.model_dump_json(exclude={"wall_ms"}) + "\n")
        self._fh.flush()
        if record.wall_ms is not None:
            self._timings.write(json.dumps({"step": record.step, "wall_ms": round(record.wall_ms, 3)}) + "\n")


def write_jsonl(path: Union[str, Path], rows: Iterable[Union[BaseModel, Mapping[str, Any]]]) -> Path:
    """표 형태 결과(K 진단, 보상 곡선 등)를 JSONL로 저장"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            if isinstance(row, BaseModel):
                fh.write(row.model_dump_json() + "\n")
            else:
                fh.write(json.dumps(dict(row), sort_keys=True) + "\n")
    return path


def read_jsonl(path: Union[str, Path]) -> List[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
