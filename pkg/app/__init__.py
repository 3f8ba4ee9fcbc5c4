"""draft-lab: 미분 가능한 보상으로 확산 모델을 미세조정하는 실험 패키지"""

__version__ = "1.0.0"
__author__ = "draft-lab Team"
__description__ = "DRaFT 계열 보상 미세조정 (numpy 자동미분 + LoRA + DDIM)"
