"""카운터 기반 분할 난수 생성기

모든 확률적 추출은 (run seed, 용도 태그, step, index) 키로 결정된다.
같은 키는 항상 같은 값을 내므로 체크포인트 재실행과 실행 간 재현성이 유지된다.
"""

import hashlib
from typing import Sequence

import numpy as np


def derive_key(seed: int, tag: str, step: int = 0, index: int = 0) -> int:
    """키 튜플 → Philox 128비트 키"""
    material = f"{seed}|{tag}|{step}|{index}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(material, digest_size=16).digest(), "little")


class KeyedRng:
    """run seed에 묶인 키 기반 난수 생성기"""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, tag: str, step: int = 0, index: int = 0) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=derive_key(self.seed, tag, step, index)))

    def normal(self, tag: str, shape: Sequence[int], step: int = 0, index: int = 0) -> np.ndarray:
        return self.generator(tag, step, index).standard_normal(tuple(shape))

    def uniform(self, tag: str, shape: Sequence[int] = (), step: int = 0, index: int = 0) -> np.ndarray:
        return self.generator(tag, step, index).random(tuple(shape))

    def randint(self, tag: str, low: int, high: int, step: int = 0, index: int = 0) -> int:
        """[low, high] 양끝 포함 정수"""
        return int(self.generator(tag, step, index).integers(low, high + 1))

    def child(self, tag: str) -> "KeyedRng":
        return KeyedRng(derive_key(self.seed, tag) % (2 ** 63))

