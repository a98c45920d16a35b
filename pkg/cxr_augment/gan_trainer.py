"""
Per-class WGAN-GP training, checkpointing, generation and image selection.

One trainer owns one generator/critic pair for a single class. Every
generator update is preceded by exactly ``n_critic`` critic updates on the
same real batch, each with fresh noise and fresh interpolation weights.

Randomness is split so that a run can be resumed at any generator step:
the epoch order comes from ``seed + epoch`` and all noise and epsilon draws
come from one torch generator whose state is stored in every checkpoint.
"""

import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
from torch import optim

from cxr_augment import plotting
from cxr_augment.artifacts import load_torch, save_torch, write_csv
from cxr_augment.config import GanTrainConfig, GeneratorConfig, CriticConfig
from cxr_augment.data import stack_pixels
from cxr_augment.exceptions import (
    CheckpointError,
    ConfigurationError,
    FingerprintMismatchError,
    MissingArtifactError,
    SelectionError,
    ShapeError,
    TrainingInstabilityError,
)
from cxr_augment.models.gan import CriticStep, GanTrainRecord, SelectionStrategy
from cxr_augment.models.labels import ClassLabel
from cxr_augment.models.sample import ImageSample, LabeledDataset, SampleSource
from cxr_augment.wgan import (
    Critic,
    Generator,
    build_critic,
    build_generator,
    critic_loss,
    generator_loss,
    gradient_penalty,
    init_weights,
    interpolate,
    noise,
    wasserstein_estimate,
)

logger = logging.getLogger("cxr-wgan")

CHECKPOINT_VERSION = 1
GRID_SIZE = 16
LOSS_COLUMNS = [
    "step",
    "critic_loss",
    "generator_loss",
    "gradient_penalty",
    "wasserstein_estimate",
]

PathLike = Union[str, Path]


class GanCheckpoint:
    """Resumable training state of one WGAN-GP run."""

    def __init__(
        self,
        fingerprint: str,
        config: Dict[str, Any],
        label: Optional[Dict[str, Any]],
        generator_state: Dict[str, torch.Tensor],
        critic_state: Dict[str, torch.Tensor],
        generator_optimizer: Dict[str, Any],
        critic_optimizer: Dict[str, Any],
        epoch: int,
        batch_position: int,
        step: int,
        rng_state: torch.Tensor,
        record: Dict[str, Any],
        diagnostic: bool = False,
        partial_critic_updates: int = 0,
        version: int = CHECKPOINT_VERSION,
    ) -> None:
        self.version = version
        self.fingerprint = fingerprint
        self.config = config
        self.label = label
        self.generator_state = generator_state
        self.critic_state = critic_state
        self.generator_optimizer = generator_optimizer
        self.critic_optimizer = critic_optimizer
        self.epoch = epoch
        self.batch_position = batch_position
        self.step = step
        self.rng_state = rng_state
        self.record = record
        self.diagnostic = diagnostic
        # Critic updates already applied for generator step ``step + 1``; non-zero only at an abort.
        self.partial_critic_updates = partial_critic_updates

    def to_payload(self) -> Dict[str, Any]:
        return dict(self.__dict__)

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> "GanCheckpoint":
        if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
            found = payload.get("version") if isinstance(payload, dict) else None
            raise CheckpointError(
                f"Unsupported checkpoint version {found}", {"version": found}
            )
        try:
            return cls(**payload)
        except TypeError as e:
            raise CheckpointError(f"Malformed checkpoint: {e}") from e


def save_checkpoint(checkpoint: GanCheckpoint, path: PathLike) -> Path:
    """Write ``checkpoint`` atomically."""
    path = save_torch(checkpoint.to_payload(), path)
    logger.info("Wrote checkpoint %s (step %d)", path, checkpoint.step)
    return path


def load_checkpoint(path: PathLike) -> GanCheckpoint:
    """Read a checkpoint written by ``save_checkpoint``.

    Raises:
        MissingArtifactError: if ``path`` does not exist
        CheckpointError: if the file is unreadable or of another version
    """
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"Checkpoint {path} does not exist", {"path": str(path)})
    return GanCheckpoint.from_payload(load_torch(path))


def _all_finite(module: torch.nn.Module) -> bool:
    return all(
        p.grad is None or bool(torch.isfinite(p.grad).all()) for p in module.parameters()
    )


class WganTrainer:
    """Owns the networks, optimizers and RNG of one per-class WGAN-GP run."""

    def __init__(self, cfg: GanTrainConfig, label: Optional[ClassLabel] = None) -> None:
        self.cfg = cfg
        self.label = label
        self.fingerprint = cfg.fingerprint()

        init_rng = torch.Generator().manual_seed(cfg.seed)
        self.generator: Generator = init_weights(build_generator(cfg.generator, label), init_rng)
        self.critic: Critic = init_weights(build_critic(cfg.critic), init_rng)
        betas = (cfg.beta1, cfg.beta2)
        self.generator_optimizer = optim.Adam(
            self.generator.parameters(), lr=cfg.learning_rate_generator, betas=betas
        )
        self.critic_optimizer = optim.Adam(
            self.critic.parameters(), lr=cfg.learning_rate_critic, betas=betas
        )

        self.noise_rng = torch.Generator().manual_seed(cfg.seed + 1)
        self.epoch = 0
        self.batch_position = 0
        self.step = 0
        self.partial_critic_updates = 0
        self.record = GanTrainRecord()
        self.checkpoints: List[Path] = []

    # State

    def checkpoint(self, diagnostic: bool = False) -> GanCheckpoint:
        return GanCheckpoint(
            fingerprint=self.fingerprint,
            config=self.cfg.model_dump(mode="json"),
            label=self.label.to_dict() if self.label is not None else None,
            generator_state={k: v.clone() for k, v in self.generator.state_dict().items()},
            critic_state={k: v.clone() for k, v in self.critic.state_dict().items()},
            generator_optimizer=self.generator_optimizer.state_dict(),
            critic_optimizer=self.critic_optimizer.state_dict(),
            epoch=self.epoch,
            batch_position=self.batch_position,
            step=self.step,
            rng_state=self.noise_rng.get_state(),
            record=self.record.to_dict(),
            diagnostic=diagnostic,
            partial_critic_updates=self.partial_critic_updates,
        )

    def restore(self, checkpoint: GanCheckpoint) -> None:
        """Load ``checkpoint`` into this trainer.

        Raises:
            FingerprintMismatchError: if it was written under an incompatible config
        """
        if checkpoint.fingerprint != self.fingerprint:
            raise FingerprintMismatchError(self.fingerprint, checkpoint.fingerprint)
        if checkpoint.diagnostic:
            logger.warning("Resuming from a diagnostic checkpoint written at an abort")
        if checkpoint.partial_critic_updates:
            logger.warning(
                "Critic state already holds %d of %d critic updates of step %d; they are applied again",
                checkpoint.partial_critic_updates,
                self.cfg.n_critic,
                checkpoint.step + 1,
            )
        self.generator.load_state_dict(checkpoint.generator_state)
        self.critic.load_state_dict(checkpoint.critic_state)
        self.generator_optimizer.load_state_dict(checkpoint.generator_optimizer)
        self.critic_optimizer.load_state_dict(checkpoint.critic_optimizer)
        self.noise_rng.set_state(checkpoint.rng_state)
        self.epoch = checkpoint.epoch
        self.batch_position = checkpoint.batch_position
        self.step = checkpoint.step
        self.record = GanTrainRecord.from_dict(checkpoint.record)

    @classmethod
    def from_checkpoint(cls, checkpoint: GanCheckpoint, cfg: GanTrainConfig) -> "WganTrainer":
        label = ClassLabel.from_dict(checkpoint.label) if checkpoint.label else None
        trainer = cls(cfg, label)
        trainer.restore(checkpoint)
        return trainer

    # Batching

    def _epoch_batches(self, n: int, epoch: int) -> List[torch.Tensor]:
        """Index batches of one epoch; a trailing batch smaller than 2 is dropped."""
        order = torch.randperm(n, generator=torch.Generator().manual_seed(self.cfg.seed + epoch))
        batches = list(torch.split(order, self.cfg.batch_size))
        if batches and len(batches[-1]) < 2:
            batches.pop()
        return batches

    def _done(self) -> bool:
        if self.epoch >= self.cfg.epochs:
            return True
        return self.cfg.max_steps is not None and self.step >= self.cfg.max_steps

    # Updates

    def _critic_update(self, real: torch.Tensor) -> CriticStep:
        batch = real.shape[0]
        z = noise(batch, self.cfg.z_dim, self.noise_rng)
        epsilon = torch.rand(batch, generator=self.noise_rng)
        with torch.no_grad():
            fake = self.generator(z)

        real_scores = self.critic(real)
        fake_scores = self.critic(fake)
        mixed = interpolate(real, fake, epsilon).requires_grad_(True)
        gp = gradient_penalty(self.critic, mixed, self.step + 1)
        loss = critic_loss(real_scores, fake_scores, gp, self.cfg.gp_weight)

        self.critic_optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if not torch.isfinite(loss) or not _all_finite(self.critic):
            raise TrainingInstabilityError(
                f"Non-finite critic loss at step {self.step + 1}",
                step=self.step + 1,
                details={"critic_loss": float(loss)},
            )
        self.critic_optimizer.step()
        return CriticStep(
            step=self.step + 1,
            critic_loss=float(loss.detach()),
            gradient_penalty=float(gp.detach()),
            wasserstein_estimate=wasserstein_estimate(real_scores.detach(), fake_scores.detach()),
        )

    def _generator_update(self, batch: int) -> float:
        z = noise(batch, self.cfg.z_dim, self.noise_rng)
        loss = generator_loss(self.critic(self.generator(z)))
        self.generator_optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if not torch.isfinite(loss) or not _all_finite(self.generator):
            raise TrainingInstabilityError(
                f"Non-finite generator loss at step {self.step + 1}",
                step=self.step + 1,
                details={"generator_loss": float(loss)},
            )
        self.generator_optimizer.step()
        return float(loss.detach())

    def train_step(self, real: torch.Tensor) -> None:
        """n_critic critic updates then one generator update on ``real``.

        Nothing is recorded until the whole step succeeds; ``partial_critic_updates``
        counts the critic updates applied so far within the step.
        """
        critic_steps = []
        for _ in range(self.cfg.n_critic):
            critic_steps.append(self._critic_update(real))
            self.partial_critic_updates += 1
        g_loss = self._generator_update(real.shape[0])
        for critic_step in critic_steps:
            self.record.add_critic_step(critic_step)
        self.record.add_generator_loss(g_loss)
        self.step += 1
        self.partial_critic_updates = 0

    # Loop

    def fit(self, data: torch.Tensor, output_dir: Optional[PathLike] = None) -> GanTrainRecord:
        """Train on ``data`` (N x C x S x S in [-1, 1]) until the epoch or step budget is spent.

        Args:
            data: Real images of a single class
            output_dir: Where checkpoints, snapshots and loss files go; nothing is written if None

        Returns:
            The full training record, including steps restored from a checkpoint

        Raises:
            ShapeError: if ``data`` does not match the critic input
            TrainingInstabilityError: on a non-finite loss, after writing a diagnostic checkpoint
        """
        expected = (self.cfg.critic.in_channels, self.cfg.image_size, self.cfg.image_size)
        if data.dim() != 4 or tuple(data.shape[1:]) != expected:
            raise ShapeError(
                f"Training data must be N x {expected[0]} x {expected[1]} x {expected[2]}, "
                f"got {tuple(data.shape)}"
            )
        if data.shape[0] < 2:
            raise ConfigurationError("WGAN-GP training needs at least 2 images")

        out = Path(output_dir) if output_dir is not None else None
        self.generator.train()
        self.critic.train()
        n = data.shape[0]

        try:
            while not self._done():
                batches = self._epoch_batches(n, self.epoch)
                epoch_start = self.record.generator_updates
                while self.batch_position < len(batches) and not self._done():
                    self.train_step(data[batches[self.batch_position]])
                    self.batch_position += 1
                if self.batch_position < len(batches):
                    break
                self.epoch += 1
                self.batch_position = 0
                self._end_of_epoch(epoch_start, out)
        except TrainingInstabilityError as e:
            e.details["partial_critic_updates"] = self.partial_critic_updates
            logger.error(
                "Training aborted at step %d after %d of %d critic updates: %s",
                e.step,
                self.partial_critic_updates,
                self.cfg.n_critic,
                e.message,
            )
            if out is not None:
                self.checkpoints.append(
                    save_checkpoint(self.checkpoint(diagnostic=True), out / "checkpoints" / "aborted.pt")
                )
                self._write_losses(out)
            raise

        if out is not None:
            self.checkpoints.append(
                save_checkpoint(self.checkpoint(), out / "checkpoints" / "latest.pt")
            )
            self._write_losses(out)
            save_generator(self.generator, self.cfg, out / "generator.pt", self.epoch)
            save_critic(self.critic, self.cfg, out / "critic.pt")
        return self.record

    def _end_of_epoch(self, epoch_start: int, out: Optional[Path]) -> None:
        rows = self.record.rows(self.cfg.n_critic)[epoch_start:]
        if rows:
            logger.info(
                "Epoch %d/%d step %d: critic %.4f generator %.4f W %.4f",
                self.epoch,
                self.cfg.epochs,
                self.step,
                sum(r["critic_loss"] for r in rows) / len(rows),
                sum(r["generator_loss"] for r in rows) / len(rows),
                sum(r["wasserstein_estimate"] for r in rows) / len(rows),
            )
        if out is None:
            return
        if self.epoch % self.cfg.snapshot_every == 0:
            self.write_snapshot(out / "snapshots" / f"epoch_{self.epoch}.png")
            save_generator(
                self.generator, self.cfg, out / "generators" / f"epoch_{self.epoch}.pt", self.epoch
            )
        if self.epoch % self.cfg.checkpoint_every == 0:
            self.checkpoints.append(
                save_checkpoint(self.checkpoint(), out / "checkpoints" / f"epoch_{self.epoch}.pt")
            )

    def write_snapshot(self, path: PathLike) -> Path:
        """Write a 4 x 4 grid from a fixed noise batch; training RNG is untouched."""
        z = noise(GRID_SIZE, self.cfg.z_dim, torch.Generator().manual_seed(self.cfg.seed))
        was_training = self.generator.training
        self.generator.eval()
        with torch.no_grad():
            images = self.generator(z)
        self.generator.train(was_training)
        return plotting.save_image_grid(images, path, nrow=4)

    def _write_losses(self, out: Path) -> None:
        rows = self.record.rows(self.cfg.n_critic)
        write_csv(rows, out / "losses.csv", columns=LOSS_COLUMNS)
        if rows:
            plotting.plot_losses(rows, out / "losses.png")


def train(
    data: LabeledDataset,
    cfg: GanTrainConfig,
    resume: Optional[GanCheckpoint] = None,
    output_dir: Optional[PathLike] = None,
) -> Tuple[Generator, GanTrainRecord, List[Path]]:
    """Train a WGAN-GP on a single-class dataset.

    Returns:
        The trained generator, the loss record and the checkpoint paths written

    Raises:
        ConfigurationError: if the dataset is empty or spans several classes
        FingerprintMismatchError: if ``resume`` was written under another config
    """
    if len(data) == 0:
        raise ConfigurationError("Cannot train a GAN on an empty dataset")
    classes = {sample.label for sample in data}
    if len(classes) != 1:
        raise ConfigurationError(
            f"GAN training data must hold one class, found {sorted(c.name for c in classes)}"
        )
    label = next(iter(classes))

    if resume is not None:
        trainer = WganTrainer.from_checkpoint(resume, cfg)
        logger.info("Resuming %s from epoch %d step %d", label.name, trainer.epoch, trainer.step)
    else:
        trainer = WganTrainer(cfg, label)
    trainer.fit(stack_pixels(data), output_dir)
    return trainer.generator, trainer.record, trainer.checkpoints


# Generator and critic artifacts


def save_generator(
    generator: Generator, cfg: GanTrainConfig, path: PathLike, epoch: int
) -> Path:
    return save_torch(
        {
            "version": CHECKPOINT_VERSION,
            "fingerprint": cfg.fingerprint(),
            "generator_config": cfg.generator.model_dump(mode="json"),
            "label": generator.label.to_dict() if generator.label is not None else None,
            "epoch": epoch,
            "state": generator.state_dict(),
        },
        path,
    )


def load_generator(path: PathLike) -> Tuple[Generator, int]:
    """Rebuild a generator saved by ``save_generator``; returns it with its epoch.

    Raises:
        MissingArtifactError: if ``path`` does not exist
    """
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"Generator artifact {path} does not exist", {"path": str(path)})
    payload = load_torch(path)
    label = ClassLabel.from_dict(payload["label"]) if payload.get("label") else None
    generator = build_generator(GeneratorConfig(**payload["generator_config"]), label)
    generator.load_state_dict(payload["state"])
    generator.eval()
    return generator, int(payload["epoch"])


def save_critic(critic: Critic, cfg: GanTrainConfig, path: PathLike) -> Path:
    return save_torch(
        {
            "version": CHECKPOINT_VERSION,
            "fingerprint": cfg.fingerprint(),
            "critic_config": cfg.critic.model_dump(mode="json"),
            "state": critic.state_dict(),
        },
        path,
    )


def load_critic(path: PathLike) -> Critic:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"Critic artifact {path} does not exist", {"path": str(path)})
    payload = load_torch(path)
    critic = build_critic(CriticConfig(**payload["critic_config"]))
    critic.load_state_dict(payload["state"])
    critic.eval()
    return critic


# Generation and selection


def generate(
    generator: Generator,
    n: int,
    seed: int,
    epoch: Optional[int] = None,
    batch_size: int = 64,
) -> List[ImageSample]:
    """Draw ``n`` synthetic samples tagged with the generator's class label.

    The generator runs in inference mode. The same seed yields identical pixels.
    """
    if n < 0:
        raise ConfigurationError(f"Cannot generate {n} images")
    if n == 0:
        return []
    if generator.label is None:
        raise ConfigurationError("Generator carries no class label")

    z = noise(n, generator.cfg.z_dim, torch.Generator().manual_seed(seed))
    was_training = generator.training
    generator.eval()
    with torch.no_grad():
        images = torch.cat([generator(chunk) for chunk in torch.split(z, batch_size)])
    generator.train(was_training)

    tag = f"e{epoch}" if epoch is not None else "final"
    return [
        ImageSample(
            pixels=images[i],
            label=generator.label,
            source=SampleSource.SYNTHETIC,
            origin=f"{generator.label.name}_{tag}_{i:05d}",
            epoch=epoch,
            index=i,
        )
        for i in range(n)
    ]


def score_images(
    critic: Critic, samples: Sequence[ImageSample], batch_size: int = 64
) -> List[ImageSample]:
    """Return copies of ``samples`` carrying the critic's score."""
    if not samples:
        return []
    critic.eval()
    scored = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            scores = critic(torch.stack([s.pixels for s in chunk]))
            for sample, score in zip(chunk, scores.tolist()):
                scored.append(
                    ImageSample(
                        sample.pixels,
                        sample.label,
                        sample.source,
                        sample.origin,
                        sample.epoch,
                        sample.index,
                        float(score),
                    )
                )
    return scored


def _generation_order(sample: ImageSample) -> Tuple[int, int]:
    return (sample.epoch or 0, sample.index or 0)


def select_images(
    pool: Sequence[ImageSample], n: int, strategy: SelectionStrategy
) -> List[ImageSample]:
    """Keep ``n`` images from ``pool``.

    LATEST_EPOCH keeps the last ``n`` by (epoch, index), returned in
    generation order. CRITIC_SCORE keeps the ``n`` highest scores, returned
    by descending score; ties keep generation order.

    Raises:
        SelectionError: if the pool holds fewer than ``n`` images
        ConfigurationError: on a negative ``n`` or unscored CRITIC_SCORE input
    """
    if n < 0:
        raise ConfigurationError(f"Cannot select {n} images")
    if len(pool) < n:
        raise SelectionError(len(pool), n)
    ordered = sorted(pool, key=_generation_order)
    if n == 0:
        return []

    if strategy == SelectionStrategy.LATEST_EPOCH:
        return ordered[-n:]

    if any(s.score is None or math.isnan(s.score) for s in ordered):
        raise ConfigurationError("CRITIC_SCORE selection needs a finite score on every image")
    return sorted(ordered, key=lambda s: -s.score)[:n]
