"""Knowledge-aware visual question generation for remote sensing imagery."""

from .checkpoint import Checkpoint, compose
from .dataset import KnowledgeTriplet, SampleRecord, build_dataset
from .estimator import KnowledgeQuestionGenerator, as_samples
from .fixtures import make_fixture
from .metrics import EvalPair, ScoreReport, evaluate
from .model import KRSVQG, DecodingParams, Features, ModelConfig
from .tokenizer import Vocabulary, build_vocab, decode, encode
from .training import AdamW, StagePlan, TrainConfig, run_stage

__version__ = "0.1.0"

__all__ = [
    "AdamW", "Checkpoint", "DecodingParams", "EvalPair", "Features", "KRSVQG",
    "KnowledgeQuestionGenerator", "as_samples", "make_fixture", "KnowledgeTriplet", "ModelConfig", "SampleRecord",
    "ScoreReport", "StagePlan", "TrainConfig", "Vocabulary", "build_dataset", "build_vocab",
    "compose", "decode", "encode", "evaluate", "run_stage",
]
