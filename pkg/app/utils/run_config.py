"""key = value 실행 설정 파일 로더"""

from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar

from dotenv import dotenv_values
from pydantic import BaseModel

from app.core.errors import MissingArtifactError

ConfigT = TypeVar("ConfigT", bound=BaseModel)


def read_key_values(path: Optional[str]) -> Dict[str, Any]:
    """설정 파일을 dict로 읽는다 (값 없는 키는 제외)"""
    if path is None:
        return {}
    file = Path(path)
    if not file.exists():
        raise MissingArtifactError(f"설정 파일이 없습니다: {file}")
    return {k: v for k, v in dotenv_values(file).items() if v is not None and v != ""}


def load_run_config(
    model: Type[ConfigT],
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ConfigT:
    """파일 값 위에 CLI override를 덮어쓴 뒤 스키마 검증 (알 수 없는 키는 pydantic 오류)"""
    values = read_key_values(path)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return model.model_validate(values)
