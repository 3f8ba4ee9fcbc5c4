"""draft-lab HTTP 서버 (serve 서브커맨드)"""

import pydantic
from fastapi import FastAPI, Request, status
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from app.config import settings
from app.core.errors import NumericalError, ValidationError
from app.core.tensor import set_precision
from app.routers import health, rewards, samples
from app.utils.logger import get_logger

# FastAPI 애플리케이션 생성
app = FastAPI(
    title=settings.PROJECT_NAME,
    version=settings.PROJECT_VERSION,
    description="확산 모델 샘플링/보상 평가 API (읽기 전용)",
)

logger = get_logger("api")
set_precision(settings.PRECISION)

app.include_router(health.router)
app.include_router(samples.router)
app.include_router(rewards.router)


@app.exception_handler(RequestValidationError)
async def validation_exception_handler(request: Request, exc: RequestValidationError):
    """요청 본문 검증 실패"""
    logger.error(f"422 Unprocessable Entity: {exc.errors()}")
    return JSONResponse(
        status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
        content=jsonable_encoder({"detail": exc.errors()}),
    )


@app.exception_handler(pydantic.ValidationError)
async def settings_validation_handler(request: Request, exc: pydantic.ValidationError):
    """요청에서 만든 내부 설정 검증 실패"""
    logger.error(f"422 설정 검증 실패: {exc.errors()}")
    return JSONResponse(
        status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
        content=jsonable_encoder({"detail": exc.errors(include_url=False, include_context=False)}),
    )


@app.exception_handler(ValidationError)
async def lab_validation_handler(request: Request, exc: ValidationError):
    logger.error(f"400 Bad Request: {exc}")
    return JSONResponse(status_code=status.HTTP_400_BAD_REQUEST, content={"detail": str(exc)})


@app.exception_handler(NumericalError)
async def numerical_error_handler(request: Request, exc: NumericalError):
    logger.error(f"500 수치 실패: {exc}")
    return JSONResponse(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, content={"detail": str(exc)})


@app.get("/", tags=["기본"])
async def read_root():
    """루트 엔드포인트"""
    return {
        "message": f"Welcome to {settings.PROJECT_NAME}!",
        "status": "healthy",
        "version": settings.PROJECT_VERSION,
    }
