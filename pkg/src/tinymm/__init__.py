"""Small vision-language model (ViT encoder, connector, decoder LM) trained from scratch on numpy."""

from .assembly import ModelConfig, TinyMM
from .connector import ConnectorConfig
from .conversation import ConversationRecord, TokenizedSample, Turn, Vocab
from .errors import CheckpointError, ConfigError, ValidationError
from .training import RecipeConfig, Trainer, load_checkpoint, train_stage
from .vision import VisionConfig, patch_count

__all__ = [
    "CheckpointError", "ConfigError", "ConnectorConfig", "ConversationRecord", "ModelConfig",
    "RecipeConfig", "TinyMM", "TokenizedSample", "Trainer", "Turn", "ValidationError",
    "VisionConfig", "Vocab", "load_checkpoint", "patch_count", "train_stage",
]
__version__ = "0.1.0"
