from typing import Any, Dict, Optional

from pydantic import BaseModel


class ErrorResponse(BaseModel):
    """Error response"""
    error: str
    code: str
    details: Optional[Dict[str, Any]] = None


class LabError(Exception):
    """Base class for every domain error raised by recency-lab"""

    code = "lab_error"
    exit_code = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_response(self) -> ErrorResponse:
        return ErrorResponse(error=self.message, code=self.code, details=self.details or None)


# datagen
class AlphabetExhausted(LabError):
    code = "alphabet_exhausted"


class TemplatePoolTooSmall(LabError):
    code = "template_pool_too_small"


# model
class TokenOutOfRange(LabError):
    code = "token_out_of_range"


class NonFiniteLoss(LabError):
    code = "non_finite_loss"


class CorruptCheckpoint(LabError):
    code = "corrupt_checkpoint"


# capture
class MisalignedPrompts(LabError):
    code = "misaligned_prompts"


class CorruptTensorFile(LabError):
    code = "corrupt_tensor_file"


# geometry
class EmptyGroup(LabError):
    code = "empty_group"


class ZeroVector(LabError):
    code = "zero_vector"


class DegenerateSpread(LabError):
    code = "degenerate_spread"


# probes
class SingleClass(LabError):
    code = "single_class"


class NonFiniteFeature(LabError):
    code = "non_finite_feature"


class EmptyEval(LabError):
    code = "empty_eval"


class SplitLeak(LabError):
    code = "split_leak"


# controls
class EmptyResult(LabError):
    code = "empty_result"


class TargetTooLarge(LabError):
    code = "target_too_large"


# cli / orchestration
class MissingArtifact(LabError):
    code = "missing_artifact"
    exit_code = 2


class ConfigInvalid(LabError):
    code = "config_invalid"
    exit_code = 3
