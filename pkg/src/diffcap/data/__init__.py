from .corpus import (
    DatasetStats,
    IngestResult,
    ManifestError,
    build_corpus,
    compute_stats,
    ingest_manifest,
    load_png,
    load_split,
    split_sizes,
)
from .generate import ALL_TYPES, ChangePair, GenerationError, generate_pair, spec_changes
from .qa import QUESTION_TEMPLATES, QaSample, to_qa
from .scene import ChangeType, SceneSpec, render
from .tokenizer import Vocabulary, split_words
