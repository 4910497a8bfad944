"""Uniform record for a-posteriori inequality checks: ``lhs <= rhs`` up to ``slack``."""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class Check:
    name: str
    lhs: float
    rhs: float
    slack: float = 0.0
    rtol: float = 0.0
    detail: dict = field(default_factory=dict)

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        return bool(self.margin >= -self.slack - self.rtol * abs(self.rhs))

    def to_dict(self) -> dict:
        d = {"lhs": float(self.lhs), "rhs": float(self.rhs), "slack": float(self.slack),
             "margin": float(self.margin), "pass": bool(self.passed)}
        if self.rtol:
            d["rtol"] = float(self.rtol)
        return d

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.name}: lhs={self.lhs:.6g} rhs={self.rhs:.6g} "
                f"slack={self.slack:.3g} margin={self.margin:.3g}")
