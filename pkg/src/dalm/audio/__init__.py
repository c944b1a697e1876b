from .adapters import AcousticAdapter, AdapterConfig, SemanticAdapter, fuse_prefix, subsampled_length
from .encoder import EncoderConfig, EncoderOutput, SpeechEncoder, encode
from .features import (
    AudioFeatures,
    MelConfig,
    Waveform,
    load_audio_features,
    load_features,
    log_mel,
    read_wav,
    save_features,
    write_wav,
)

__all__ = [
    "AcousticAdapter", "AdapterConfig", "SemanticAdapter", "fuse_prefix", "subsampled_length",
    "EncoderConfig", "EncoderOutput", "SpeechEncoder", "encode",
    "AudioFeatures", "MelConfig", "Waveform", "load_audio_features", "load_features", "log_mel",
    "read_wav", "save_features", "write_wav",
]
