"""FastAPI 라우터 (health, samples, rewards)"""
