"""Exception hierarchy shared across the pipeline."""


class XrayGPTError(Exception):
    """Base class for all pipeline errors."""


class CorpusError(XrayGPTError):
    """Problems loading or validating a report corpus."""


class MalformedLineError(CorpusError):
    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        msg = f"malformed record at line {line_no}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DuplicateIdError(CorpusError):
    def __init__(self, report_id: str):
        self.report_id = report_id
        super().__init__(f"duplicate report id {report_id!r}")


class EmptyAfterCleaningError(XrayGPTError):
    """A findings or impression section became empty after cleaning."""


class EmptyCorpusError(XrayGPTError):
    """Vocabulary construction needs at least one record."""


class ServiceUnavailableError(XrayGPTError):
    """The external text service failed after all retries."""


class UnresolvedImageRefError(XrayGPTError):
    def __init__(self, ref: str):
        self.ref = ref
        super().__init__(f"image ref {ref!r} matches no feature row and no readable file")


class DimensionMismatchError(XrayGPTError):
    """Vector or matrix dimensions disagree with the configured sizes."""


class SequenceTooLongError(XrayGPTError):
    """Token sequence exceeds the decoder's maximum length."""


class EmptyMaskError(XrayGPTError):
    """Loss mask selects no positions."""


class ConfigError(XrayGPTError):
    """Invalid training or run configuration."""


class CheckpointError(XrayGPTError):
    """Base for checkpoint I/O problems."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is truncated or fails structural validation."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not the one this code writes."""


class CheckpointIncompatibleError(CheckpointError):
    """Checkpoint config fingerprint does not match the current run."""


class EmptyInputError(XrayGPTError):
    """An aggregate was asked for over an empty collection."""
