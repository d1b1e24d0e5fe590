"""Medical concept normalization with a jointly trained concept-embedding matrix."""

from .corpus import (
    ConceptInventory,
    Fold,
    FoldSet,
    MentionRecord,
    SyntheticNoise,
    build_inventory,
    generate_synthetic,
    load_dataset,
    preprocess_foldset,
    save_dataset,
    validation_split,
)
from .encoder import Encoder, ToyEncoder, Vocabulary, build_vocab
from .preprocess import AcronymLexicon, PreprocessConfig, load_lexicon, preprocess
from .trainer import ConceptNormalizer, HparamSpace, TrainConfig, TrainReport, random_search, train
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluator import EvalResult, PredictionOutcome, accuracy, error_report, evaluate, fold_average

__version__ = "0.1.0"
