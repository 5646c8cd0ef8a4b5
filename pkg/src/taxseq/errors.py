"""Exception types shared across the package."""


class TaxseqError(Exception):
    """Base class for all taxseq errors."""


# -- taxonomy -----------------------------------------------------------


class CycleDetected(TaxseqError):
    pass


class MultipleParents(TaxseqError):
    pass


class UnknownParent(TaxseqError):
    pass


class EmptyHierarchy(TaxseqError):
    pass


class UnknownLabel(TaxseqError):
    pass


class NotClosureConsistent(TaxseqError):
    pass


# -- codec --------------------------------------------------------------


class CapacityExceeded(TaxseqError):
    pass


# -- numerics -----------------------------------------------------------


class ShapeMismatch(TaxseqError):
    pass


class InvalidProbability(TaxseqError):
    pass


class IndivisibleHeads(TaxseqError):
    pass


class AllIgnored(TaxseqError):
    pass


class DetachedGraph(TaxseqError):
    pass


# -- encoder / decoder ---------------------------------------------------


class MissingPrecomputed(TaxseqError):
    pass


class InitDimensionMismatch(TaxseqError):
    pass


# -- trainer / corpus ----------------------------------------------------


class NonFiniteLoss(TaxseqError):
    pass


class EmptyCorpus(TaxseqError):
    pass


class LengthMismatch(TaxseqError):
    pass


class MalformedLine(TaxseqError):
    pass


class MissingRawData(TaxseqError):
    pass


class ConfigError(TaxseqError):
    pass
