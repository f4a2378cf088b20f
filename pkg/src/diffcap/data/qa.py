"""Question-answer formatting of change pairs for instruction-style fine-tuning."""

from dataclasses import dataclass
from typing import List, Optional

from .generate import ChangePair

# artifact-local prompt wording
QUESTION_TEMPLATES = (
    "describe the differences between these two images.",
    "what changed between the first image and the second image?",
    "list every change from the first picture to the second one.",
)


@dataclass(frozen=True)
class QaSample:
    question: str
    answer: str
    pair_id: str
    image_a: object = None
    image_b: object = None


def to_qa(pair: ChangePair, template_id: int = 0) -> List[QaSample]:
    """One sample per ground-truth caption, each answer a caption verbatim."""
    if not 0 <= template_id < len(QUESTION_TEMPLATES):
        raise ValueError(f"unknown template id {template_id}")
    q = QUESTION_TEMPLATES[template_id]
    return [QaSample(q, cap, pair.id, pair.image_a, pair.image_b) for cap in pair.captions]
