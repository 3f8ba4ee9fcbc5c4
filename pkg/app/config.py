"""애플리케이션 설정 관리"""

from typing import Literal

from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()


class Settings(BaseSettings):
    """프로세스 단위 설정 (환경 변수 접두사 DRAFT_LAB_)"""

    # 프로젝트 정보
    PROJECT_NAME: str = "draft-lab"
    PROJECT_VERSION: str = "1.0.0"

    # 수치 설정
    PRECISION: Literal["f32", "f64"] = "f32"
    DEBUG_CHECKPOINT: bool = False

    # 산출물 경로
    ARTIFACT_DIR: str = "runs"

    # 서버 설정 (serve 서브커맨드)
    HOST: str = "127.0.0.1"
    PORT: int = 8000

    # 로깅 설정
    LOG_LEVEL: str = "INFO"
    LOG_FILE: str = ""

    model_config = SettingsConfigDict(
        env_prefix="DRAFT_LAB_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


# 전역 설정 인스턴스
settings = Settings()
