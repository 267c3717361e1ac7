"""Coupled projected-LSTM branches for language and speaker recognition."""
from .errors import ArchiveFormatError, NumericError, ValidationError
from .features import CorpusManifest, FeatureSequence, SynthSpec, crop_short, generate_corpus
from .lstmp import LstmpParams, LstmpState, forward_sequence, init_params, step
from .multitask import FeedbackRouting, MultiTaskModel, init_multitask, mt_forward, mt_step
from .training import LossSpec, OptimizerSpec, backward_sequence, gradcheck, train
from .embedding import RVector, enroll, extract_rvector, extract_rvectors
from .scoring import cosine_score, lda_train, softmax_language_id, svm_train
from .metrics import MetricReport, build_sre_trials, compute_eer, compute_idr
from .config import ExperimentConfig, load_config

__version__ = "0.1.0"
