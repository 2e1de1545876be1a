"""Exception hierarchy shared by every stage of the pipeline."""


class CanonNetError(Exception):
    """Base class for all library errors."""


class CanonicalizationError(CanonNetError):
    """A patch could not be brought into canonical form."""

    code = "CanonicalizationError"


class DegenerateInput(CanonicalizationError):
    code = "DegenerateInput"


class DegenerateSpectrum(CanonicalizationError):
    code = "DegenerateSpectrum"


class SignAmbiguous(CanonicalizationError):
    code = "SignAmbiguous"


class TiedEmbedding(CanonicalizationError):
    code = "TiedEmbedding"


class DegenerateCentroid(CanonicalizationError):
    code = "DegenerateCentroid"


class DegenerateLandmark(CanonicalizationError):
    code = "DegenerateLandmark"


class NoConvergence(CanonNetError):
    """Jacobi sweeps exhausted before the off-diagonal norm fell below tolerance."""


class RejectionLimit(CanonNetError):
    """Coefficient rejection sampling never produced the requested class."""


class FormatVersionMismatch(CanonNetError):
    pass


class CorruptRecord(CanonNetError):
    pass


class ShapeMismatch(CanonNetError):
    pass


class Diverged(CanonNetError):
    """Training loss became non-finite."""

    def __init__(self, message, last_finite_loss=None):
        super().__init__(message)
        self.last_finite_loss = last_finite_loss


class NoCorrespondences(CanonNetError):
    pass


# ordered so that batch code can store failures as small integers
CANON_ERRORS = (
    DegenerateInput,
    DegenerateSpectrum,
    SignAmbiguous,
    TiedEmbedding,
    DegenerateCentroid,
    DegenerateLandmark,
)
