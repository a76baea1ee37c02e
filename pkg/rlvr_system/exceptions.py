from typing import List, Optional, Sequence


class RLVRException(Exception):

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)


class ParseError(RLVRException):

    def __init__(self, offset: int, expected: Sequence[str], found: str = "") -> None:
        expected_text = ", ".join(sorted(set(expected))) or "end of input"
        found_text = repr(found) if found else "end of input"
        message = (
            f"Parse error at byte {offset}: expected one of [{expected_text}], "
            f"found {found_text}"
        )
        super().__init__(message)
        self.offset = offset
        self.expected = sorted(set(expected))
        self.found = found


class UnsupportedCommand(RLVRException):

    def __init__(self, command: str, offset: int) -> None:
        message = f"Unsupported LaTeX command '\\{command}' at byte {offset}"
        super().__init__(message)
        self.command = command
        self.offset = offset


class UnbalancedBraces(RLVRException):

    def __init__(self, offset: int, boxes: Optional[List[str]] = None) -> None:
        message = f"Unbalanced braces: \\boxed{{ opened at offset {offset} never closes"
        super().__init__(message)
        self.offset = offset
        # Boxes that closed before the unbalanced one
        self.boxes = list(boxes or [])


class DegenerateBatchError(RLVRException):

    def __init__(self, steps: int, stage: int) -> None:
        message = (
            f"Every group had zero reward variance for {steps} consecutive steps "
            f"in stage {stage}; the curriculum band admits no learnable problems"
        )
        super().__init__(message)
        self.steps = steps
        self.stage = stage


class PlanInvalid(RLVRException):

    def __init__(self, invariant: str, detail: str) -> None:
        message = f"Curriculum plan violates '{invariant}': {detail}"
        super().__init__(message)
        self.invariant = invariant
        self.detail = detail


class InvalidSpec(RLVRException):

    def __init__(self, field: str, detail: str) -> None:
        message = f"Invalid task spec field '{field}': {detail}"
        super().__init__(message)
        self.field = field
        self.detail = detail


class LadderInvalid(RLVRException):

    def __init__(self, rates: Sequence[float]) -> None:
        rendered = ", ".join(f"{rate:.3e}" for rate in rates)
        message = f"Tier pass rates are not strictly decreasing: [{rendered}]"
        super().__init__(message)
        self.rates = list(rates)


class ChecksumMismatch(RLVRException):

    def __init__(self, expected: str, actual: str) -> None:
        message = (
            f"Parameter checksum mismatch: dump was generated at snapshot "
            f"'{expected}', replay parameters are '{actual}'"
        )
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class ConfigError(RLVRException):

    def __init__(self, key: str, detail: str) -> None:
        message = f"Invalid configuration at '{key}': {detail}"
        super().__init__(message)
        self.key = key
        self.detail = detail


class CheckpointFormatError(RLVRException):

    def __init__(self, path: str, detail: str) -> None:
        message = f"Checkpoint '{path}' is not readable: {detail}"
        super().__init__(message)
        self.path = path
        self.detail = detail


class DatasetFormatError(RLVRException):

    def __init__(self, path: str, missing: Sequence[str]) -> None:
        message = f"Dataset '{path}' missing required columns: {sorted(missing)}"
        super().__init__(message)
        self.path = path
        self.missing = sorted(missing)


class InvalidProblem(RLVRException):

    def __init__(self, problem_id: str, detail: str) -> None:
        message = f"Problem '{problem_id}' is invalid: {detail}"
        super().__init__(message)
        self.problem_id = problem_id
        self.detail = detail
