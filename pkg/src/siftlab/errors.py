"""Exception types shared across the pipeline."""


class SiftLabError(Exception):
    """Base class for all package errors."""


class ConfigError(SiftLabError):
    """Invalid or unparseable run configuration."""


# --- corpus ---------------------------------------------------------------


class MalformedRecord(SiftLabError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateId(SiftLabError):
    def __init__(self, record_id: str):
        super().__init__(f"duplicate record id {record_id!r}")
        self.record_id = record_id


class FeatureUnavailable(SiftLabError):
    def __init__(self, record_id: str, branch: str):
        super().__init__(f"no {branch} features for record {record_id!r}")
        self.record_id = record_id
        self.branch = branch


class InvalidSpec(SiftLabError):
    """Synthetic world specification violates its invariants."""


# --- datagen --------------------------------------------------------------


class MissingTranscript(SiftLabError):
    def __init__(self, record_id: str):
        super().__init__(f"record {record_id!r} has no transcript")
        self.record_id = record_id


class MissingAttributes(SiftLabError):
    def __init__(self, record_id: str):
        super().__init__(f"record {record_id!r} has no attributes")
        self.record_id = record_id


class EmptyInstructionPool(SiftLabError):
    """Instruction sampling requested from an empty pool."""


class TransportError(SiftLabError):
    """LLM endpoint unreachable or returned a retryable failure."""


class ProviderRefusal(SiftLabError):
    def __init__(self, record_id: str, detail: str = ""):
        super().__init__(f"provider refused record {record_id!r}: {detail}")
        self.record_id = record_id


class EmptyGeneration(SiftLabError):
    def __init__(self, record_id: str):
        super().__init__(f"empty generation for record {record_id!r}")
        self.record_id = record_id


class EmptyComponent(SiftLabError):
    """A dataset mix component has no examples."""


class UnknownConfigTag(SiftLabError):
    def __init__(self, tag: str):
        super().__init__(f"unknown generation config tag {tag!r}")
        self.tag = tag


# --- model ----------------------------------------------------------------


class DimMismatch(SiftLabError):
    """Feature or parameter dimensions disagree with the configuration."""


class LengthMismatch(SiftLabError):
    """Branch sequences of unequal length cannot be fused."""


class TemplateError(SiftLabError):
    """Chat template could not be applied to the example."""


class NoTargetTokens(SiftLabError):
    """Loss requested on an assembly with an empty loss mask."""


class DecodeBudgetExceeded(SiftLabError):
    def __init__(self, budget: int):
        super().__init__(f"no end-of-turn token within {budget} generated tokens")
        self.budget = budget


# --- training -------------------------------------------------------------


class NonFiniteLoss(SiftLabError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class StreamExhausted(SiftLabError):
    """Example stream ended before the stage's step budget was met."""


class IncompatibleCheckpoints(SiftLabError):
    """Checkpoints cannot be compared (different branches or shapes)."""


# --- eval -----------------------------------------------------------------


class ZeroVector(SiftLabError):
    """Cosine distance undefined for a zero-norm pooled vector."""


class SingleClass(SiftLabError):
    def __init__(self, attribute: str):
        super().__init__(f"attribute {attribute!r} has a single label value")
        self.attribute = attribute
