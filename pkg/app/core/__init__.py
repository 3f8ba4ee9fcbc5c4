"""텐서 코어 패키지 (역방향 자동 미분 테이프)"""
