"""app.* 로거 설정"""

import logging

from app.config import settings
from app.utils.logger import get_logger, set_level


def test_handlers_attached_once():
    logger = get_logger("app.test.once")
    again = get_logger("app.test.once")
    assert again is logger
    assert len(logger.handlers) == 1
    assert not logger.propagate


def test_logs_go_to_stderr(capsys):
    get_logger("app.test.stderr").info("🧪 [TEST] stderr 확인")
    captured = capsys.readouterr()
    assert "stderr 확인" in captured.err
    assert "stderr 확인" not in captured.out


def test_file_handler(tmp_path, monkeypatch):
    path = tmp_path / "logs" / "lab.log"
    monkeypatch.setattr(settings, "LOG_FILE", str(path))
    logger = get_logger("app.test.file")
    logger.warning("파일 기록")
    for handler in logger.handlers:
        handler.flush()
    assert "파일 기록" in path.read_text(encoding="utf-8")


def test_set_level_updates_existing_loggers():
    logger = get_logger("app.test.level")
    set_level("warning")
    try:
        assert logger.level == logging.WARNING
        assert all(h.level == logging.WARNING for h in logger.handlers)
    finally:
        set_level(settings.LOG_LEVEL)
