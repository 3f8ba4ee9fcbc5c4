"""Pydantic 스키마 패키지 (실행 설정, 기록, HTTP 본문)"""
