"""EchoGuard: reverberation-based jamming of automatic speech recognition."""

__version__ = "0.1.0"

from .audio import AudioBuffer, read_wav, resample, write_wav
from .jammer import (AttenuationConfig, ConfigError, JammerConfig, OscillationSchedule, echoguard,
                     identity_config)
from .metrics import (EvalRecord, Report, aggregate_report, jamming_success_rate,
                      transcript_cosine, utility_index, wer)
from .oracle import MockAsrConfig, Oracle, OracleError, OracleSpec
from .room import OPTIMIZED_ROOM, RoomConfig, generate_directional_set, generate_rir
from .stoi import stoi
from .streaming import StreamProcessor

__all__ = [
    "AudioBuffer", "read_wav", "write_wav", "resample",
    "AttenuationConfig", "ConfigError", "JammerConfig", "OscillationSchedule", "echoguard",
    "identity_config", "EvalRecord", "Report", "aggregate_report", "jamming_success_rate",
    "transcript_cosine", "utility_index", "wer", "MockAsrConfig", "Oracle", "OracleError",
    "OracleSpec", "OPTIMIZED_ROOM", "RoomConfig", "generate_directional_set", "generate_rir",
    "stoi", "StreamProcessor",
]
