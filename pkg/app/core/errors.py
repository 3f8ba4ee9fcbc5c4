"""draft-lab 예외 계층

CLI는 ValidationError 계열을 종료 코드 1로, NumericalError 계열을 종료 코드 2로 변환한다.
"""


class LabError(Exception):
    """draft-lab 공통 예외"""
    pass


class ValidationError(LabError):
    """입력/설정 검증 실패 (종료 코드 1)"""
    pass


class ShapeError(ValidationError):
    """텐서 shape 불일치"""
    pass


class CheckpointFormatError(ValidationError):
    """체크포인트 파일 형식 오류"""
    pass


class MissingArtifactError(ValidationError):
    """필요한 체크포인트/산출물이 없음"""
    pass


class TapeError(ValidationError):
    """테이프 사용 규칙 위반 (다른 테이프의 loss, 이미 소비된 테이프 등)"""
    pass


class NumericalError(LabError):
    """NaN/Inf 등 수치 실패 (종료 코드 2)"""
    pass


class NondeterministicSegmentError(NumericalError):
    """체크포인트 구간 재실행 결과가 기록된 출력과 다름"""
    pass
