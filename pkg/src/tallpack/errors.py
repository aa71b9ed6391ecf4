"""Exception types shared across the package."""


class TallpackError(Exception):
    """Base class for every domain error raised by this package."""


class UsageError(TallpackError):
    """Invalid command-line usage (maps to exit code 2)."""


# checkpoint archives
class MalformedHeader(TallpackError):
    """Archive header is unparsable, inconsistent, or its offsets overlap."""


class UnsupportedDtype(TallpackError):
    """Archive declares a dtype outside {F32, F16, BF16}."""


class NonFiniteValue(TallpackError):
    """A loaded tensor contains NaN or Inf."""


class TruncatedFile(TallpackError):
    """File ends before the declared header or payload does."""


class IoError(TallpackError):
    """Underlying file I/O failed."""


# task-vector algebra
class IncompatibleShapes(TallpackError):
    """Key sets or tensor shapes disagree between operands."""


class FrozenKeyModified(TallpackError):
    """A tensor declared frozen differs between two checkpoints."""


class EmptyInput(TallpackError):
    """An operation that needs at least one element received none."""


# masks
class NonPositiveLambda(TallpackError):
    """Sparsity factor must be > 0."""


class OutOfRangeN(TallpackError):
    """Agreement level n must satisfy 0 <= n <= T."""


class EmptyGrid(TallpackError):
    """A hyper-parameter grid must be non-empty."""


# merging
class BadTrimFraction(TallpackError):
    """Trim fraction must lie in (0, 1]."""


# compressed archive
class KeyOrderMismatch(TallpackError):
    """Mask keys do not match the expected tensor-name order."""


class BitCountMismatch(TallpackError):
    """Packed bit count disagrees with the tensor shapes."""


class NonZeroPadding(TallpackError):
    """Padding bits past the declared bit count must be zero."""


class ManifestMismatch(TallpackError):
    """Archive manifest disagrees with the payload it describes."""


# baselines
class BadFraction(TallpackError):
    """Selection fraction must lie in (0, 1]."""


# synthetic fixtures
class IndivisibleP(TallpackError):
    """Disjoint-mode generation needs the task count to divide P."""


# metrics
class LengthMismatch(TallpackError):
    """Paired sequences must have equal length."""


class ZeroDenominator(TallpackError):
    """Reference accuracies must all be positive."""
