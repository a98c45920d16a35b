"""
Frozen-backbone image classifiers.

Each backbone comes from its torchvision blueprint with the final
classification layer swapped for a fresh ``num_classes`` layer. Under
feature extraction every other parameter is frozen and the backbone stays
in inference mode during training, so batch-norm statistics and dropout
never touch it.

Pretrained weights are the 1000-class model-zoo state dicts. They are
loaded before the head is replaced.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn, optim
from torch.utils.data import DataLoader
from torchvision import models

from cxr_augment.artifacts import (
    fetch_pretrained,
    load_torch,
    save_torch,
    sha256_file,
    verify_checksum,
)
from cxr_augment.config import CLASSIFIER_IMAGE_SIZE, ClassifierTrainConfig
from cxr_augment.data import SampleDataset
from cxr_augment.exceptions import (
    ConfigurationError,
    LabelError,
    MissingArtifactError,
    PretrainedWeightsError,
    ShapeError,
    TrainingInstabilityError,
)
from cxr_augment.models.classifier import (
    BackboneId,
    EpochRecord,
    LayerInfo,
    LearningCurve,
    ModelSummary,
)
from cxr_augment.models.metrics import PredictionSet
from cxr_augment.models.sample import LabeledDataset

logger = logging.getLogger("cxr-classifier")

MODEL_VERSION = 1
INPUT_SHAPE = (3, CLASSIFIER_IMAGE_SIZE, CLASSIFIER_IMAGE_SIZE)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

PathLike = Union[str, Path]


def _vgg16() -> nn.Module:
    return models.vgg16_bn(weights=None)


def _resnet50() -> nn.Module:
    return models.resnet50(weights=None)


def _googlenet() -> nn.Module:
    # Auxiliary towers are not built: with only the final layer trainable they never learn.
    return models.googlenet(weights=None, aux_logits=False, init_weights=True)


def _mnasnet() -> nn.Module:
    return models.mnasnet1_0(weights=None)


# Builder and the attribute path of the final classification layer.
BLUEPRINTS: Dict[BackboneId, Tuple[Callable[[], nn.Module], Tuple[Union[str, int], ...]]] = {
    BackboneId.VGG16: (_vgg16, ("classifier", 6)),
    BackboneId.RESNET50: (_resnet50, ("fc",)),
    BackboneId.GOOGLENET: (_googlenet, ("fc",)),
    BackboneId.MNASNET: (_mnasnet, ("classifier", 1)),
}


def _parent_of_head(network: nn.Module, path: Tuple[Union[str, int], ...]) -> nn.Module:
    module = network
    for key in path[:-1]:
        module = module[key] if isinstance(key, int) else getattr(module, key)
    return module


def _get_head(network: nn.Module, path: Tuple[Union[str, int], ...]) -> nn.Linear:
    parent = _parent_of_head(network, path)
    key = path[-1]
    return parent[key] if isinstance(key, int) else getattr(parent, key)


def _set_head(network: nn.Module, path: Tuple[Union[str, int], ...], head: nn.Module) -> None:
    parent = _parent_of_head(network, path)
    key = path[-1]
    if isinstance(key, int):
        parent[key] = head
    else:
        setattr(parent, key, head)


class ClassifierModel(nn.Module):
    """A backbone network with a replaced head and a frozen/trainable partition."""

    def __init__(
        self,
        backbone: BackboneId,
        network: nn.Module,
        num_classes: int,
        feature_extract: bool,
        class_names: Optional[List[str]] = None,
        input_normalization: str = "minus_one_one",
        pretrained_tag: Optional[str] = None,
    ) -> None:
        super().__init__()
        self.backbone = backbone
        self.network = network
        self.num_classes = num_classes
        self.feature_extract = feature_extract
        self.class_names = list(class_names) if class_names else [str(i) for i in range(num_classes)]
        self.input_normalization = input_normalization
        self.pretrained_tag = pretrained_tag
        self.best_state: Optional[Dict[str, torch.Tensor]] = None
        self.best_epoch: Optional[int] = None
        self.register_buffer("_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    @property
    def head(self) -> nn.Linear:
        return _get_head(self.network, BLUEPRINTS[self.backbone][1])

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.network.parameters() if p.requires_grad]

    def trainable_names(self) -> List[str]:
        return [name for name, p in self.network.named_parameters() if p.requires_grad]

    def frozen_state(self) -> Dict[str, torch.Tensor]:
        """Copies of every frozen parameter, keyed by name."""
        return {
            name: p.detach().clone()
            for name, p in self.network.named_parameters()
            if not p.requires_grad
        }

    def train(self, mode: bool = True) -> "ClassifierModel":
        super().train(mode)
        if mode and self.feature_extract:
            self.network.eval()
            self.head.train()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or tuple(x.shape[1:]) != INPUT_SHAPE:
            raise ShapeError(
                f"Classifier expects B x 3 x 224 x 224 input, got {tuple(x.shape)}",
                {"expected": list(INPUT_SHAPE), "found": list(x.shape)},
            )
        if self.input_normalization == "imagenet":
            x = ((x + 1.0) / 2.0 - self._mean) / self._std
        return self.network(x)


def load_pretrained(
    network: nn.Module,
    weights_path: Optional[PathLike] = None,
    sha256: Optional[str] = None,
    url: Optional[str] = None,
    cache_dir: Optional[PathLike] = None,
) -> str:
    """Load a model-zoo state dict into ``network``; returns the file checksum.

    Raises:
        PretrainedWeightsError: reason ``missing``, ``checksum`` or ``download``
    """
    if weights_path is None and url is None:
        raise PretrainedWeightsError(
            "Pretrained weights requested but no weights_path or weights_url given", "missing"
        )
    if weights_path is None or not Path(weights_path).is_file():
        if url is None:
            raise PretrainedWeightsError(
                f"Pretrained weights file {weights_path} does not exist", "missing", str(weights_path)
            )
        weights_path = fetch_pretrained(url, cache_dir or Path.home() / ".cache" / "cxr_augment")
    path = verify_checksum(weights_path, sha256)

    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as e:
        raise PretrainedWeightsError(f"Cannot read weights {path}: {e}", "missing", str(path)) from e
    state = {k: v for k, v in state.items() if not k.startswith("aux")}
    network.load_state_dict(state)
    return sha256_file(path)


def build_classifier(
    backbone: Union[BackboneId, str],
    num_classes: int = 3,
    feature_extract: bool = True,
    pretrained: bool = False,
    class_names: Optional[List[str]] = None,
    seed: int = 0,
    weights_path: Optional[PathLike] = None,
    weights_sha256: Optional[str] = None,
    weights_url: Optional[str] = None,
    cache_dir: Optional[PathLike] = None,
    input_normalization: str = "minus_one_one",
) -> ClassifierModel:
    """Build ``backbone`` with a fresh ``num_classes`` head.

    Random initialization is seeded by ``seed`` without touching the global RNG.

    Raises:
        ConfigurationError: if the backbone is unknown or num_classes < 1
        PretrainedWeightsError: if pretrained weights are requested but unusable
    """
    if isinstance(backbone, str):
        try:
            backbone = BackboneId.parse(backbone)
        except ValueError as e:
            raise ConfigurationError(str(e), {"backbone": backbone}) from e
    if num_classes < 1:
        raise ConfigurationError(f"num_classes must be >= 1, got {num_classes}")

    builder, head_path = BLUEPRINTS[backbone]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        network = builder()
        tag = None
        if pretrained:
            tag = load_pretrained(network, weights_path, weights_sha256, weights_url, cache_dir)
        old_head = _get_head(network, head_path)
        head = nn.Linear(old_head.in_features, num_classes)

    if feature_extract:
        for p in network.parameters():
            p.requires_grad = False
    _set_head(network, head_path, head)

    model = ClassifierModel(
        backbone,
        network,
        num_classes,
        feature_extract,
        class_names=class_names,
        input_normalization=input_normalization,
        pretrained_tag=tag,
    )
    logger.debug(
        "Built %s: %d trainable of %d parameters",
        backbone.value,
        sum(p.numel() for p in model.trainable_parameters()),
        sum(p.numel() for p in network.parameters()),
    )
    return model


def build_from_config(
    cfg: ClassifierTrainConfig, class_names: List[str], cache_dir: Optional[PathLike] = None
) -> ClassifierModel:
    return build_classifier(
        cfg.backbone,
        num_classes=len(class_names),
        feature_extract=cfg.feature_extract,
        pretrained=cfg.pretrained,
        class_names=class_names,
        seed=cfg.seed,
        weights_path=cfg.weights_path,
        weights_sha256=cfg.weights_sha256,
        weights_url=cfg.weights_url,
        cache_dir=cache_dir,
        input_normalization=cfg.input_normalization,
    )


def summarize_classifier(model: ClassifierModel) -> ModelSummary:
    """Leaf-module inventory with trainable, frozen and total parameter counts."""
    layers = []
    for name, module in model.network.named_modules():
        if name and not list(module.children()):
            params = list(module.parameters(recurse=False))
            layers.append(
                LayerInfo(
                    name=name,
                    type=type(module).__name__,
                    parameters=sum(p.numel() for p in params),
                    trainable=sum(p.numel() for p in params if p.requires_grad),
                )
            )
    total = sum(p.numel() for p in model.network.parameters())
    trainable = sum(p.numel() for p in model.trainable_parameters())
    return ModelSummary(
        backbone=model.backbone,
        layers=layers,
        trainable_parameters=trainable,
        frozen_parameters=total - trainable,
        total_parameters=total,
    )


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Raises:
        LabelError: if a label lies outside [0, K)
    """
    k = logits.shape[-1]
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(
            f"Labels must lie in [0, {k}), got {sorted(set(labels.tolist()))}",
            {"num_classes": k},
        )
    return F.cross_entropy(logits, labels)


def _loader(
    dataset: LabeledDataset, cfg: ClassifierTrainConfig, augment: bool, shuffle: bool
) -> Tuple[SampleDataset, DataLoader]:
    view = SampleDataset(
        dataset,
        target_shape=INPUT_SHAPE,
        policy=cfg.augmentation if augment else None,
        seed=cfg.seed,
    )
    loader = DataLoader(
        view,
        batch_size=cfg.batch_size,
        shuffle=shuffle,
        num_workers=cfg.num_workers,
        generator=torch.Generator().manual_seed(cfg.seed) if shuffle else None,
    )
    return view, loader


def _evaluate(model: ClassifierModel, loader: DataLoader, device: str) -> Tuple[float, float]:
    model.eval()
    total_loss, correct, seen = 0.0, 0, 0
    with torch.no_grad():
        for x, y in loader:
            x, y = x.to(device), y.to(device)
            logits = model(x)
            total_loss += float(cross_entropy(logits, y)) * len(y)
            correct += int((logits.argmax(dim=1) == y).sum())
            seen += len(y)
    return total_loss / seen, correct / seen


def train_classifier(
    model: ClassifierModel,
    train: LabeledDataset,
    validation: LabeledDataset,
    cfg: ClassifierTrainConfig,
    device: str = "cpu",
) -> Tuple[ClassifierModel, LearningCurve]:
    """Train the trainable partition of ``model`` for ``cfg.num_epochs`` epochs.

    The best-validation-accuracy trainable state is kept on ``model.best_state``
    next to the final weights.

    Raises:
        ConfigurationError: if either dataset is empty
        TrainingInstabilityError: if a batch loss is non-finite
    """
    if len(train) == 0 or len(validation) == 0:
        raise ConfigurationError(
            f"Classifier training needs non-empty datasets, got {len(train)} train / {len(validation)} validation"
        )
    params = model.trainable_parameters()
    if not params:
        raise ConfigurationError("Model has no trainable parameters")

    model.to(device)
    train_view, train_loader = _loader(train, cfg, augment=True, shuffle=True)
    _, val_loader = _loader(validation, cfg, augment=False, shuffle=False)
    optimizer = optim.Adam(params, lr=cfg.learning_rate)
    curve = LearningCurve()
    best_accuracy = -1.0
    step = 0

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(1, cfg.num_epochs + 1):
            train_view.set_epoch(epoch)
            model.train()
            total_loss, correct, seen = 0.0, 0, 0
            for x, y in train_loader:
                x, y = x.to(device), y.to(device)
                step += 1
                logits = model(x)
                loss = cross_entropy(logits, y)
                if not torch.isfinite(loss):
                    logger.error("Non-finite classifier loss at epoch %d step %d", epoch, step)
                    raise TrainingInstabilityError(
                        f"Non-finite classifier loss at epoch {epoch}",
                        step=step,
                        details={"epoch": epoch, "backbone": model.backbone.value},
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                total_loss += float(loss.detach()) * len(y)
                correct += int((logits.detach().argmax(dim=1) == y).sum())
                seen += len(y)

            val_loss, val_accuracy = _evaluate(model, val_loader, device)
            record = EpochRecord(
                epoch=epoch,
                train_loss=total_loss / seen,
                validation_loss=val_loss,
                train_accuracy=correct / seen,
                validation_accuracy=val_accuracy,
            )
            curve.append(record)
            logger.info(
                "%s epoch %d/%d: loss %.4f acc %.4f | val loss %.4f val acc %.4f",
                model.backbone.value,
                epoch,
                cfg.num_epochs,
                record.train_loss,
                record.train_accuracy,
                record.validation_loss,
                record.validation_accuracy,
            )
            if val_accuracy > best_accuracy:
                best_accuracy = val_accuracy
                model.best_epoch = epoch
                model.best_state = _trainable_state(model)

    model.eval()
    return model, curve


def _trainable_state(model: ClassifierModel) -> Dict[str, torch.Tensor]:
    if not model.feature_extract:
        return {k: v.detach().clone() for k, v in model.network.state_dict().items()}
    names = set(model.trainable_names())
    return {k: v.detach().clone() for k, v in model.network.state_dict().items() if k in names}


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def predict(
    model: ClassifierModel,
    dataset: LabeledDataset,
    batch_size: int = 50,
    device: str = "cpu",
) -> PredictionSet:
    """Argmax predictions (ties to the lowest index) and softmax probabilities per sample."""
    class_names = model.class_names
    if len(dataset) == 0:
        return PredictionSet([], [], np.zeros((0, model.num_classes)), class_names)
    view = SampleDataset(dataset, target_shape=INPUT_SHAPE)
    loader = DataLoader(view, batch_size=batch_size, shuffle=False)
    model.to(device)
    model.eval()
    chunks, labels = [], []
    with torch.no_grad():
        for x, y in loader:
            chunks.append(model(x.to(device)).double().cpu().numpy())
            labels.append(y.numpy())
    logits = np.concatenate(chunks)
    return PredictionSet(
        true_labels=np.concatenate(labels),
        predicted_labels=np.argmax(logits, axis=1),
        probabilities=softmax(logits),
        class_names=class_names,
    )


# Model artifact


def save_classifier(model: ClassifierModel, path: PathLike, fingerprint: str) -> Path:
    """Write the versioned model artifact: final weights plus best-validation state."""
    return save_torch(
        {
            "version": MODEL_VERSION,
            "backbone": model.backbone.value,
            "num_classes": model.num_classes,
            "class_names": model.class_names,
            "feature_extract": model.feature_extract,
            "input_normalization": model.input_normalization,
            "pretrained_tag": model.pretrained_tag,
            "fingerprint": fingerprint,
            "state": model.network.state_dict(),
            "best_state": model.best_state,
            "best_epoch": model.best_epoch,
        },
        path,
    )


def load_classifier(path: PathLike, weights: str = "final") -> Tuple[ClassifierModel, str]:
    """Rebuild a saved classifier; ``weights`` is ``final`` or ``best``.

    Returns:
        The model and the training config fingerprint stored with it

    Raises:
        MissingArtifactError: if ``path`` does not exist
    """
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"Model artifact {path} does not exist", {"path": str(path)})
    payload = load_torch(path)
    model = build_classifier(
        payload["backbone"],
        num_classes=payload["num_classes"],
        feature_extract=payload["feature_extract"],
        class_names=payload["class_names"],
        input_normalization=payload["input_normalization"],
    )
    model.network.load_state_dict(payload["state"])
    model.pretrained_tag = payload.get("pretrained_tag")
    model.best_state = payload.get("best_state")
    model.best_epoch = payload.get("best_epoch")
    if weights == "best" and model.best_state:
        model.network.load_state_dict(model.best_state, strict=False)
    model.eval()
    return model, payload["fingerprint"]
