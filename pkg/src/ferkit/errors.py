"""Exception hierarchy shared across ferkit modules."""

from __future__ import annotations


class FerkitError(Exception):
    """Base class for every error raised by ferkit."""


class EmptyInput(FerkitError, ValueError):
    pass


class LabelNotInCandidates(FerkitError, ValueError):
    def __init__(self, label: str, candidates) -> None:
        self.label = label
        self.candidates = tuple(candidates)
        super().__init__(f"label {label!r} not in candidate set {list(self.candidates)}")


class MissingPlaceholder(FerkitError, ValueError):
    pass


class InvalidRecord(FerkitError, ValueError):
    pass


class InsufficientVariants(FerkitError):
    def __init__(self, wanted: int, variants: list[str]) -> None:
        self.wanted = wanted
        self.variants = list(variants)
        super().__init__(f"obtained {len(variants)} distinct variants, wanted {wanted}")


class NoResults(FerkitError):
    pass


# model client

class ClientError(FerkitError):
    """Any failure talking to a chat-completion endpoint."""


class AuthError(ClientError):
    pass


class ExhaustedRetries(ClientError):
    def __init__(self, attempts: int, last: str) -> None:
        self.attempts = attempts
        self.last = last
        super().__init__(f"gave up after {attempts} attempts: {last}")


class MalformedResponse(ClientError):
    pass


class RequestRejected(ClientError):
    """Non-retryable HTTP status other than 401/403."""

    def __init__(self, status: int, body: str) -> None:
        self.status = status
        super().__init__(f"HTTP {status}: {body[:200]}")


# rlvr numerics

class GroupTooSmall(FerkitError, ValueError):
    pass


class TokenOutOfVocab(FerkitError, ValueError):
    pass


class ShapeMismatch(FerkitError, ValueError):
    pass
