"""app.* 로거: stderr(+선택적 파일) 출력

stdout은 CLI 결과 JSON/표 전용이라 로그는 항상 stderr로 보낸다.
"""

import logging
import sys
from pathlib import Path
from typing import List, Optional

from app.config import settings

LOG_FORMAT = logging.Formatter(fmt="%(asctime)s - %(name)s - %(levelname)s - %(message)s", datefmt="%Y-%m-%d %H:%M:%S")


def _level(name: str) -> int:
    return getattr(logging, name.upper(), logging.INFO)


def _handlers() -> List[logging.Handler]:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if settings.LOG_FILE:
        log_path = Path(settings.LOG_FILE)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_path, encoding="utf-8"))
    return handlers


def setup_logger(name: str, level: Optional[str] = None) -> logging.Logger:
    """핸들러가 없을 때만 붙인다 (같은 이름으로 여러 번 불려도 한 번)"""
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger
    log_level = _level(level or settings.LOG_LEVEL)
    logger.setLevel(log_level)
    logger.propagate = False
    try:
        handlers = _handlers()
    except OSError as e:
        handlers = [logging.StreamHandler(sys.stderr)]
        handlers[0].setFormatter(LOG_FORMAT)
        logger.addHandler(handlers[0])
        logger.warning(f"⚠️ [LOG] 로그 파일을 열 수 없어 stderr만 사용합니다: {e}")
        return logger
    for handler in handlers:
        handler.setLevel(log_level)
        handler.setFormatter(LOG_FORMAT)
        logger.addHandler(handler)
    return logger


def get_logger(name: str = __name__) -> logging.Logger:
    return setup_logger(name)


def set_level(level: str) -> None:
    """이미 만들어진 app.* 로거와 핸들러의 레벨을 일괄 변경"""
    log_level = _level(level)
    for name, logger in logging.Logger.manager.loggerDict.items():
        if isinstance(logger, logging.Logger) and name.startswith("app"):
            logger.setLevel(log_level)
            for handler in logger.handlers:
                handler.setLevel(log_level)
