import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, runtime_checkable

import pandas as pd

from .exceptions import DatasetFormatError, RLVRException, UnbalancedBraces
from .expr import ProbeConfig, Verdict, expr_equivalent, parse_expression
from .jsonl import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

_BOXED = "\\boxed"
PROTOCOLS = ("raw", "boxed")


@runtime_checkable
class SemanticJudge(Protocol):

    def judge(self, pred: str, gold: str) -> int:
        ...


class StubJudge:
    """Stand-in for a model-based judge: never overturns a rule-based miss."""

    def judge(self, pred: str, gold: str) -> int:

        return 0


@dataclass(frozen=True)
class RewardReport:
    per_box: List[int]
    n_required: int
    n_extracted: int
    judge_used: bool = False
    boxes: List[str] = field(default_factory=list)

    @property
    def aggregate(self) -> float:
        return sum(self.per_box) / self.n_required

    @property
    def fully_correct(self) -> bool:
        return all(self.per_box)

    def to_dict(self) -> Dict[str, Any]:

        return {
            "per_box": list(self.per_box),
            "aggregate": self.aggregate,
            "n_required": self.n_required,
            "n_extracted": self.n_extracted,
            "judge_used": self.judge_used,
        }


def extract_boxed(completion: str) -> List[str]:
    """Return the contents of every top-level ``\\boxed{...}`` in order.

    Raises:
        UnbalancedBraces: a ``\\boxed{`` never closes; ``.boxes`` holds the
            boxes that closed before it.
    """
    boxes: List[str] = []
    i = 0
    n = len(completion)
    while True:
        start = completion.find(_BOXED, i)
        if start < 0:
            return boxes
        scan = start + len(_BOXED)
        while scan < n and completion[scan].isspace():
            scan += 1
        if scan >= n or completion[scan] != "{":
            # "\boxed" without a brace group, e.g. "\boxedfoo"
            i = start + len(_BOXED)
            continue

        depth = 1
        content_start = scan + 1
        scan += 1
        while scan < n and depth:
            ch = completion[scan]
            if ch == "\\" and scan + 1 < n and completion[scan + 1] in "{}":
                # Escaped brace is literal text
                scan += 2
                continue
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
            scan += 1
        if depth:
            raise UnbalancedBraces(start, boxes)
        boxes.append(completion[content_start:scan - 1].strip())
        i = scan


def render_completion(symbols: Sequence[str], protocol: str = "raw",
                      eos: str = "<eos>", separator: str = "|") -> str:
    """Turn emitted vocabulary symbols into gradeable completion text.

    Under ``raw`` the emission up to the first EOS is split on ``separator``
    and every segment becomes one ``\\boxed{}``; under ``boxed`` the symbols
    are concatenated as-is and must spell their own boxes.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    emitted: List[str] = []
    for symbol in symbols:
        if symbol == eos:
            break
        emitted.append(symbol)
    if protocol == "boxed":
        return "".join(emitted)

    segments: List[List[str]] = [[]]
    for symbol in emitted:
        if symbol == separator:
            segments.append([])
        else:
            segments[-1].append(symbol)
    return " ".join(f"{_BOXED}{{{''.join(segment)}}}" for segment in segments)


def verify_answer(pred: str, gold: str, judge: Optional[SemanticJudge] = None,
                  probe: Optional[ProbeConfig] = None) -> int:

    gold_expr = parse_expression(gold)
    try:
        pred_expr = parse_expression(pred)
    except RLVRException:
        logger.debug(f"Unparseable prediction {pred!r}")
        return judge.judge(pred, gold) if judge is not None else 0

    verdict = expr_equivalent(pred_expr, gold_expr, probe)
    if verdict.verdict is Verdict.EQUIVALENT:
        return 1
    if judge is not None:
        return judge.judge(pred, gold)
    return 0


def grade_trajectory(completion: str, golds: List[str], judge: Optional[SemanticJudge] = None,
                     probe: Optional[ProbeConfig] = None) -> RewardReport:

    if not golds:
        raise ValueError("At least one gold answer is required")

    try:
        boxes = extract_boxed(completion)
    except UnbalancedBraces as e:
        logger.debug(f"{e.message}; grading {len(e.boxes)} earlier boxes")
        boxes = e.boxes

    per_box: List[int] = []
    judge_used = False
    for k, gold in enumerate(golds):
        if k >= len(boxes):
            per_box.append(0)
            continue
        if judge is None:
            per_box.append(verify_answer(boxes[k], gold, None, probe))
            continue
        rule_bit = verify_answer(boxes[k], gold, None, probe)
        if rule_bit:
            per_box.append(1)
        else:
            judge_used = True
            per_box.append(int(judge.judge(boxes[k], gold)))

    return RewardReport(
        per_box=per_box,
        n_required=len(golds),
        n_extracted=len(boxes),
        judge_used=judge_used,
        boxes=boxes,
    )


def verify_records(input_path: str, output_path: str, judge: Optional[SemanticJudge] = None,
                   probe: Optional[ProbeConfig] = None) -> pd.DataFrame:
    """Grade JSONL records ``{completion, golds}`` and write ``{per_box, aggregate}``."""
    source = Path(input_path)
    df = read_jsonl(source)

    required_columns = {"completion", "golds"}
    if not required_columns.issubset(df.columns):
        raise DatasetFormatError(str(source), list(required_columns - set(df.columns)))

    rows = []
    for _, row in df.iterrows():
        report = grade_trajectory(str(row["completion"]), [str(g) for g in row["golds"]], judge, probe)
        rows.append({"per_box": report.per_box, "aggregate": report.aggregate})

    result = pd.DataFrame(rows, columns=["per_box", "aggregate"])
    write_jsonl(result, output_path)
    logger.info(f"Graded {len(result)} records from {source} into {output_path}")
    return result
