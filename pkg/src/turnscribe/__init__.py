"""Multi-turn temporal orchestration, speaker-aware caching and evaluation
for timestamped speaker-attributed ASR."""

from .audio import AudioBuffer, AudioSlice, load_wav_mono, segment_long_form, slice_audio
from .backends import HttpBackend, ModelBackend, ScriptedBackend
from .boundary import (
    BoundaryDecision,
    Observation,
    ObservationBuilder,
    build_observations,
    discretize_boundary,
    next_boundary_target,
    overlap_ratios,
    undiscretize_boundary,
)
from .cache import CacheEntry, CacheSelector, ObservationBuffer, cache_score, select_cache, simulate_training_cache
from .config import GlobalConfig
from .metrics import attribute_metrics, cer, cpcer, der, evaluate_session
from .orchestrator import TemporalTranscriber, consolidate, run_long_form, run_session
from .protocol import TurnOutput, build_prompt, parse_turn_output, serialize_turn_output
from .synth import CorruptionConfig, OracleBackend, SynthConfig, generate_session
from .timeline import Gender, Segment, SessionAnnotation, TimeInterval, reassign_labels, validate_session

__version__ = "0.1.0"
