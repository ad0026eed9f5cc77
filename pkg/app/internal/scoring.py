from abc import ABC, abstractmethod
from typing import Sequence

from app.internal.corpus import ImagePair


class Scorer(ABC):
    """A full-reference metric that scores one image pair."""

    label: str
    similarity: bool = False
    """True when higher scores mean more similar images (SSIM)."""

    @abstractmethod
    def score(self, pair: ImagePair) -> float:
        pass


class TrainableScorer(ABC):
    """
    A metric that has to be fitted to rated pairs before it can score.
    Evaluation fits one scorer per fold and only lets it score held-out pairs.
    """

    label: str
    similarity: bool = False

    @abstractmethod
    def fit(self, pairs: Sequence[ImagePair]) -> Scorer:
        pass
