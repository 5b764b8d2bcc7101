"""
Domain models for training outputs and experiment records.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from app.core.exceptions import ArgumentError

CURVE_METRICS = ("train_loss", "eval_iou", "eval_loss")


@dataclass
class LearningCurve:
    """
    Downstream learning curve sampled at evaluation steps.

    Attributes:
        steps: Strictly increasing optimizer step counts.
        train_loss: Mean training loss since the previous sample.
        eval_iou: Macro IoU on the evaluation split.
        eval_loss: Jaccard loss on the evaluation split.
    """

    steps: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    eval_iou: List[float] = field(default_factory=list)
    eval_loss: List[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        lengths = {len(self.steps), len(self.train_loss), len(self.eval_iou), len(self.eval_loss)}
        if len(lengths) != 1:
            raise ArgumentError("LearningCurve series must have equal lengths")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ArgumentError("LearningCurve steps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.steps)

    def append(self, step: int, train_loss: float, eval_iou: float, eval_loss: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ArgumentError(f"Step {step} does not follow {self.steps[-1]}")
        self.steps.append(int(step))
        self.train_loss.append(float(train_loss))
        self.eval_iou.append(float(eval_iou))
        self.eval_loss.append(float(eval_loss))

    def series(self, metric: str) -> List[float]:
        if metric not in CURVE_METRICS:
            raise ArgumentError(f"Unknown curve metric '{metric}', expected one of {CURVE_METRICS}")
        return getattr(self, metric)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LearningCurve":
        return cls(
            steps=list(data.get("steps", [])),
            train_loss=list(data.get("train_loss", [])),
            eval_iou=list(data.get("eval_iou", [])),
            eval_loss=list(data.get("eval_loss", [])),
        )


class RunStatus(str, Enum):
    DONE = "DONE"
    FAILED = "FAILED"


@dataclass
class RunRecord:
    """
    One cell of a data-efficiency sweep.

    ``(pipeline, subset_size, seed)`` is unique within a sweep.
    """

    pipeline: str
    subset_size: int
    seed: int
    curve: LearningCurve
    test_loss: Optional[float]
    test_iou: Optional[float]
    wall_clock_seconds: float
    status: RunStatus
    error: Optional[str] = None
    subset_indices: List[int] = field(default_factory=list)
    weights_digest: Optional[str] = None

    @property
    def key(self) -> Tuple[str, int, int]:
        return (self.pipeline, self.subset_size, self.seed)

    def to_dict(self) -> dict:
        return {
            "pipeline": self.pipeline,
            "subset_size": self.subset_size,
            "seed": self.seed,
            "curve": self.curve.to_dict(),
            "test_loss": self.test_loss,
            "test_iou": self.test_iou,
            "wall_clock_seconds": self.wall_clock_seconds,
            "status": self.status.value,
            "error": self.error,
            "subset_indices": list(self.subset_indices),
            "weights_digest": self.weights_digest,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(
            pipeline=data["pipeline"],
            subset_size=int(data["subset_size"]),
            seed=int(data["seed"]),
            curve=LearningCurve.from_dict(data.get("curve", {})),
            test_loss=data.get("test_loss"),
            test_iou=data.get("test_iou"),
            wall_clock_seconds=float(data.get("wall_clock_seconds", 0.0)),
            status=RunStatus(data["status"]),
            error=data.get("error"),
            subset_indices=list(data.get("subset_indices", [])),
            weights_digest=data.get("weights_digest"),
        )

    def digest(self) -> str:
        """sha256 of every deterministic field (wall-clock time excluded)."""
        payload = self.to_dict()
        payload.pop("wall_clock_seconds")
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ScalingFit:
    """Power law ``error ~ intercept * n ** -exponent`` fitted in log-log space."""

    exponent: float
    intercept: float
    r_squared: float
    fit_range: Tuple[float, float]
    n_points: int


@dataclass(frozen=True)
class ConvergenceEstimate:
    """First step reaching the plateau threshold, or the last step if never."""

    step: int
    converged: bool
    plateau: float


@dataclass
class ProvenanceStage:
    """One executed pipeline stage."""

    name: str
    source: str
    epochs: int
    seed: int
    digest: str


@dataclass
class Provenance:
    """Ordered stage history of a pipeline run."""

    pipeline: str
    stages: List[ProvenanceStage] = field(default_factory=list)
    environment: Dict[str, Any] = field(default_factory=dict)

    def add(self, name: str, source: str, epochs: int, seed: int, digest: str) -> None:
        self.stages.append(ProvenanceStage(name, source, epochs, seed, digest))

    def to_dict(self) -> dict:
        return {
            "pipeline": self.pipeline,
            "stages": [asdict(stage) for stage in self.stages],
            "environment": dict(self.environment),
        }
