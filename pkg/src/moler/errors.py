"""Exception types shared across the package."""


class MolerError(Exception):
    pass


class CorpusFormatError(MolerError, ValueError):
    """A dataset file could not be parsed.

    ``line`` is the 1-based line number of the offending record, when known.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class DuplicateIdError(CorpusFormatError):
    pass


class ChatError(MolerError):
    """Base class for chat backend failures the pipeline may retry."""


class TransportError(ChatError):
    pass


class BackendStatusError(ChatError):
    def __init__(self, status, body=""):
        self.status = status
        super().__init__(f"backend returned HTTP {status}: {body[:200]}")


class EmptyCompletion(ChatError):
    pass


class NoScript(ChatError):
    def __init__(self, key):
        self.key = key
        super().__init__(f"mock backend has no scripted response for prompt hash {key}")


class EmbeddingError(MolerError):
    pass


class BadExpansionCount(MolerError, ValueError):
    def __init__(self, found, expected):
        self.found = list(found)
        self.expected = expected
        super().__init__(f"expected {expected} numbered expansions, parsed {len(self.found)}")


class EmptyPassage(MolerError, ValueError):
    pass


class NoRelevantDocuments(MolerError, ValueError):
    """Raised by per-query metrics when a query has nothing to find; evaluators skip it."""
