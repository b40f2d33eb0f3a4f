"""Shared exception types."""


class TodkatError(Exception):
    """Base class for errors raised by this package."""


class ContractError(TodkatError):
    """A function precondition was violated by the caller."""


class DataFormatError(TodkatError):
    """An input file is malformed (JSONL corpus, KB, vocab, checkpoint)."""


class TrainingDivergedError(TodkatError):
    """A loss became non-finite during optimization."""
