"""Score labels and the two Olympic combination rules."""

from __future__ import annotations

from dataclasses import dataclass

RULES = ("product", "sum")

# Event kinds and how their execution/difficulty parts combine.
EVENT_RULES = {"dive": "product", "vault": "sum"}
EXEC_MAX = {"dive": 30.0, "vault": 10.0}


def combine_score(execution: float, difficulty: float, rule: str = "product") -> float:
    """Overall score: diving multiplies execution by difficulty, vault adds them."""
    if rule == "product":
        return execution * difficulty
    if rule == "sum":
        return execution + difficulty
    raise ValueError(f"unknown combination rule {rule!r}; expected one of {RULES}")


@dataclass(frozen=True)
class ScoreLabel:
    execution: float
    difficulty: float
    overall: float
    rule: str = "product"

    def __post_init__(self):
        if self.overall != combine_score(self.execution, self.difficulty, self.rule):
            raise ValueError(
                f"overall {self.overall} != {self.rule} of execution {self.execution} "
                f"and difficulty {self.difficulty}"
            )

    @classmethod
    def from_parts(cls, execution: float, difficulty: float, rule: str = "product") -> "ScoreLabel":
        execution, difficulty = float(execution), float(difficulty)
        return cls(execution, difficulty, combine_score(execution, difficulty, rule), rule)

    def get(self, head: str) -> float:
        return {"exec": self.execution, "diff": self.difficulty, "overall": self.overall}[head]
