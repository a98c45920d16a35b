"""GAN training record models."""

import math
from enum import Enum
from typing import Any, Dict, List

from cxr_augment.models.base import BaseModel


class SelectionStrategy(str, Enum):
    """How synthetic images are chosen from a generated pool."""

    LATEST_EPOCH = "LATEST_EPOCH"
    CRITIC_SCORE = "CRITIC_SCORE"


class CriticStep(BaseModel):
    """One critic update."""

    step: int
    critic_loss: float
    gradient_penalty: float
    wasserstein_estimate: float


class GanTrainRecord(BaseModel):
    """Per-step losses of a WGAN-GP run.

    ``critic_steps`` has one entry per critic update; ``generator_losses``
    has one entry per generator update. The generator step index is the
    global step.
    """

    critic_steps: List[CriticStep]
    generator_losses: List[float]

    def __init__(
        self,
        critic_steps: List[CriticStep] = None,
        generator_losses: List[float] = None,
    ) -> None:
        super().__init__(
            critic_steps=list(critic_steps or []),
            generator_losses=list(generator_losses or []),
        )

    @property
    def critic_updates(self) -> int:
        return len(self.critic_steps)

    @property
    def generator_updates(self) -> int:
        return len(self.generator_losses)

    def add_critic_step(self, step: CriticStep) -> None:
        self.critic_steps.append(step)

    def add_generator_loss(self, loss: float) -> None:
        self.generator_losses.append(loss)

    def extend(self, other: "GanTrainRecord") -> None:
        self.critic_steps.extend(other.critic_steps)
        self.generator_losses.extend(other.generator_losses)

    def rows(self, n_critic: int) -> List[Dict[str, float]]:
        """One row per generator step, critic values averaged over its n_critic updates."""
        rows = []
        for step, g_loss in enumerate(self.generator_losses, start=1):
            window = self.critic_steps[(step - 1) * n_critic : step * n_critic]
            if not window:
                break
            rows.append(
                {
                    "step": step,
                    "critic_loss": sum(c.critic_loss for c in window) / len(window),
                    "generator_loss": g_loss,
                    "gradient_penalty": sum(c.gradient_penalty for c in window)
                    / len(window),
                    "wasserstein_estimate": sum(c.wasserstein_estimate for c in window)
                    / len(window),
                }
            )
        return rows

    def is_finite(self) -> bool:
        values = [c.critic_loss for c in self.critic_steps] + self.generator_losses
        return all(math.isfinite(v) for v in values)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GanTrainRecord":
        return cls(
            critic_steps=[CriticStep.from_dict(c) for c in data.get("critic_steps", [])],
            generator_losses=[float(v) for v in data.get("generator_losses", [])],
        )
