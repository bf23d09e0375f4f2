"""Exception hierarchy shared by all analysis stages."""


class TriageError(Exception):
    """Base error carrying a stable, machine-readable code."""

    code = "TRIAGE_ERROR"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def __str__(self):
        return f"{self.code}: {super().__str__()}"


class FormatError(TriageError):
    """Raised by the loader for unparseable executables."""

    code = "MALFORMED_HEADER"


class RulesetError(TriageError):
    code = "BAD_RULESET"


class SnapshotError(TriageError):
    code = "MAP_DUMP_MISMATCH"


class ForgeError(TriageError):
    code = "SPEC_CONFLICT"


class ProbeError(TriageError):
    code = "PROBE_ERROR"
