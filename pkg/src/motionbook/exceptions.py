"""Exception hierarchy shared across the package.

Two broad families matter to callers: ``DataError`` (bad files, shapes,
formats, configs) and ``NumericalError`` (non-finite values, indefinite
covariances).  The CLI maps them to distinct exit codes.
"""


class MotionBookError(Exception):
    """Base class for all errors raised by this package."""


class DataError(MotionBookError):
    """Malformed input: files, shapes, formats, vocabularies, configs."""


class NumericalError(MotionBookError):
    """A numerical failure: NaN/Inf values or an indefinite covariance."""


# -- rotations / kinematics ------------------------------------------------

class DegenerateRotation(DataError):
    """A 6D rotation whose columns cannot be orthonormalized."""


class NotARotation(DataError):
    """A 3x3 matrix that is not orthonormal within tolerance."""


class ShapeMismatch(DataError):
    """Array shapes incompatible with the requested operation."""


class WrongJointCount(DataError):
    """A pose stream whose joint count does not match the codec."""


# -- motion features / files -------------------------------------------------

class FormatMismatch(DataError):
    """A motion sequence in the wrong feature format for the operation."""


class UnsupportedFormat(DataError):
    """An unknown feature format name or tag."""


class BadMagic(DataError):
    """A binary file that does not start with the expected magic."""


class TruncatedFile(DataError):
    """A binary file shorter than its header declares."""


class UnsupportedVersion(DataError):
    """A binary file with a version this build cannot read."""


# -- nn / training -----------------------------------------------------------

class NonFiniteValue(NumericalError):
    """A NaN or Inf produced by a tensor operation."""


class NonFiniteLoss(NumericalError):
    """Training aborted because the loss or its gradients went non-finite."""


class EmptyDataset(DataError):
    """A training call with no usable samples."""


# -- quantizers ----------------------------------------------------------------

class IndexOutOfRange(DataError):
    """A token/code index outside [0, K)."""


class EmptyHistogram(DataError):
    """A usage histogram with zero total count."""


# -- tokenizer / language model ---------------------------------------------

class TooShort(DataError):
    """A motion sequence shorter than the temporal downsampling window."""


class BadLength(DataError):
    """A token sequence whose length is not divisible by the part count."""


class TokenOutOfRange(DataError):
    """A motion token id outside the motion vocabulary range."""


class MissingPlaceholder(DataError):
    """An instruction template without the caption placeholder."""


class ContextOverflow(DataError):
    """An example longer than the model's context length."""


class VocabMismatch(DataError):
    """A checkpoint whose vocabulary does not match the tokenizer's K."""


# -- metrics -------------------------------------------------------------------

class TooFewSamples(DataError):
    """Too few samples to fit a Gaussian (N < 2)."""


class DimensionMismatch(DataError):
    """Gaussian statistics of different dimensionality."""


class IndefiniteCovariance(NumericalError):
    """A covariance with an eigenvalue below the negative tolerance."""


class BadBatchSize(DataError):
    """A retrieval batch whose size is not exactly 32."""


# -- data / config --------------------------------------------------------------

class InvalidConfig(DataError):
    """A config document that fails schema validation."""


class EmptyManifest(DataError):
    """A corpus manifest with no entries."""
