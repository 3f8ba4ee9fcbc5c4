"""헬스체크 라우터 - 메모리/테이프 활성값 모니터링 포함"""

import gc
from datetime import datetime, timezone

import psutil
from fastapi import APIRouter

from app.config import settings
from app.core.tensor import activation_meter, get_precision

router = APIRouter(prefix="/api/v1", tags=["Health"])


@router.get("/health")
async def health_check():
    """서버 상태 확인"""
    return {"status": "ok", "version": settings.PROJECT_VERSION}


@router.get("/health/memory")
async def memory_status():
    """프로세스 메모리와 자동미분 테이프 활성값"""
    try:
        process = psutil.Process()
        memory_info = process.memory_info()
        collected = gc.collect()
        return {
            "status": "ok",
            "memory": {
                "rss_mb": round(memory_info.rss / 1024 / 1024, 2),
                "vms_mb": round(memory_info.vms / 1024 / 1024, 2),
                "percent": round(process.memory_percent(), 2),
                "available_mb": round(psutil.virtual_memory().available / 1024 / 1024, 2),
            },
            "tape": {
                "live_nodes": activation_meter.live,
                "peak_nodes": activation_meter.peak,
                "precision": get_precision(),
            },
            "gc_stats": {"collected": collected, "counts": gc.get_count()},
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
    except Exception as e:
        return {
            "status": "error",
            "error": str(e),
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
