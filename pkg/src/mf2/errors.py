"""Exception types shared across the package.

Everything raised on purpose derives from :class:`MF2Error`, so the CLI can map
domain failures to exit code 1 without swallowing programming errors.
"""


class MF2Error(Exception):
    """Base class for domain errors."""


class InvalidArgument(MF2Error, ValueError):
    pass


class MalformedRecord(MF2Error):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateFrame(MF2Error):
    pass


class UnknownLabel(MF2Error):
    pass


class EmptyClass(MF2Error):
    pass


class InsufficientVideos(MF2Error):
    pass


class MissingLabel(MF2Error):
    pass


class UnknownCaptionType(MF2Error):
    pass


class AnnotationFailed(MF2Error):
    """A caption could not be produced even after the retry.

    Instances are collected as data by ``annotate_dataset`` rather than raised.
    """

    def __init__(self, sample_id: str, caption_type: str, reason: str = ""):
        super().__init__(f"{sample_id}/{caption_type}: {reason or 'invalid caption'}")
        self.sample_id = sample_id
        self.caption_type = caption_type
        self.reason = reason


class ShapeMismatch(MF2Error):
    pass


class DimMismatch(MF2Error):
    pass


class BadAUMap(MF2Error):
    pass


class EmptyText(MF2Error):
    pass


class UnknownMode(MF2Error):
    pass


class DegenerateBatch(MF2Error):
    pass


class LabelMismatch(MF2Error):
    pass


class EmptyMask(MF2Error):
    pass


class BatchTooSmall(MF2Error):
    pass


class MissingCaption(MF2Error):
    def __init__(self, au_id):
        super().__init__(f"missing caption for AU{au_id}" if isinstance(au_id, int) else f"missing caption: {au_id}")
        self.au_id = au_id


class UnlabeledSample(MF2Error):
    pass


class AlreadyAttached(MF2Error):
    pass


class NotAttached(MF2Error):
    pass


class ConfigMismatch(MF2Error):
    pass


class NaNLoss(MF2Error):
    pass


class UnknownClassId(MF2Error):
    pass


class NonBinary(MF2Error):
    pass


class UnknownKey(MF2Error, KeyError):
    def __str__(self):
        return self.args[0] if self.args else ""


class ConfigTypeError(MF2Error, TypeError):
    pass


class MissingFile(MF2Error, FileNotFoundError):
    pass
