"""Compositional set embeddings for multi-speaker identification and diarization.

A pair of small networks maps single-speaker enrollments into an embedding
space (f) and merges two embeddings into the embedding of the combined
speaker set (g).  Enrolling N speakers yields pseudo-enrollments for every
subset up to a size cap, so a mixture can be identified by nearest-neighbor
search over subsets, and overlapping speech can be diarized without ever
observing the overlapping pair at enrollment time.
"""

from .autodiff import (DegenerateNormalizationError, ShapeMismatchError,
                       Tensor, backward, check_gradients,
                       gradient_check_network, run_gradcheck)
from .config import ConfigError, RunConfig, build_config, load_config_file
from .diarization import (CMPEM_SEG, CMPEM_SEG_OVERLAP, SINGLEEM_SEG_OVERLAP,
                          SINGLEEM_TURN, STRATEGIES, DerBreakdown,
                          affinity_propagation, der_score, diarize)
from .inference import (CompositionalPredictor, GuessPredictor, Prediction,
                        SingleEmPredictor, build_enrollment_table,
                        evaluate_episode_batch, infer_set, infer_set_given_k,
                        single_em_infer)
from .nets import (CMPEM, CMPEML2, CompositionalModel, ModelFormatError,
                   SingleModel, compose_pair, embed_example, embed_features,
                   init_compositional_model, init_single_model, load_model,
                   save_model)
from .seeding import derive_rng, derive_seed_sequence
from .synth import (Episode, SpeakerBank, Stream, Timeline, generate_stream,
                    generate_timeline, make_bank, read_rttm, sample_episode,
                    synth_mixture, synth_utterance, write_rttm)
from .training import (TrainConfig, TrainingDivergedError, TrainResult, train,
                       train_single_embedding)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "check_gradients", "run_gradcheck",
    "gradient_check_network", "ShapeMismatchError",
    "DegenerateNormalizationError",
    "RunConfig", "ConfigError", "build_config", "load_config_file",
    "CMPEM", "CMPEML2", "CompositionalModel", "SingleModel",
    "ModelFormatError", "init_compositional_model", "init_single_model",
    "embed_features", "embed_example", "compose_pair", "save_model",
    "load_model",
    "derive_rng", "derive_seed_sequence",
    "SpeakerBank", "Episode", "Stream", "Timeline", "make_bank",
    "sample_episode", "synth_utterance", "synth_mixture", "generate_timeline",
    "generate_stream", "write_rttm", "read_rttm",
    "TrainConfig", "TrainResult", "TrainingDivergedError", "train",
    "train_single_embedding",
    "Prediction", "build_enrollment_table", "infer_set", "infer_set_given_k",
    "single_em_infer", "CompositionalPredictor", "SingleEmPredictor",
    "GuessPredictor", "evaluate_episode_batch",
    "SINGLEEM_TURN", "SINGLEEM_SEG_OVERLAP", "CMPEM_SEG", "CMPEM_SEG_OVERLAP",
    "STRATEGIES", "affinity_propagation", "diarize", "DerBreakdown",
    "der_score",
    "__version__",
]
