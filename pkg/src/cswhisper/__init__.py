"""Code-switching adaptation of a miniature Whisper-style speech recognizer.

Adapters, an LSTM encoder refiner with CTC supervision and language-aware
dual-path decoding on top of a frozen encoder-decoder, together with a
synthetic Mandarin-English corpus, a mixed error rate scorer and an
ablation harness.
"""

from .adapters import Adapter, AdapterHooks, FreezePolicy, adapt, classify_parameters
from .checkpoint import load_base, load_checkpoint, save_checkpoint
from .config import ModelConfig, SpecialTokens
from .ctc import brute_force_ctc, ctc_gradient, ctc_loss
from .data import CorpusManifest, Utterance, desk_corpora, generate_corpus, load_manifest
from .errors import (
    ConfigurationError,
    CSWhisperError,
    FeasibilityError,
    InputError,
    ParseError,
    ValidationError,
)
from .language_aware import FusionModule, LanguagePath, dual_decode_step, fuse, lid_aux_loss
from .metrics import ErrorReport, score, score_corpus
from .model import WhisperMini, build_prompt, greedy_decode
from .pipeline import TABLE_I, CSModel, Variant
from .refiner import CTCHead, EncoderRefiner, RefinerConfig, enc_ref_loss, refine
from .training import TrainConfig, ablate, evaluate, final_loss, train

__version__ = "0.1.0"
