"""Myocardium segmentation: small encoder-decoder net, soft-Dice training,
thresholded inference and the Dice overlap metric used for reporting."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .nn import functional as F
from .nn import layers as L
from .nn.engine import DivergenceError, Tensor, backward, no_grad
from .nn.optim import AdamState, adam_step
from .nn.params import ParamTree
from .nn.rng import RngStream
from .phantom import Sample, SiteDataset

_EVAL_CHUNK = 64


@dataclass(frozen=True)
class SegNetSpec:
    """Three-resolution encoder-decoder with skip connections."""

    in_channels: int = 1
    out_channels: int = 1
    widths: tuple[int, int, int] = (16, 32, 32)
    dec_widths: tuple[int, int] = (24, 16)

    def build_params(self, stream: RngStream | None = None) -> ParamTree:
        w0, w1, w2 = self.widths
        d1, d0 = self.dec_widths
        p = ParamTree()
        L.add_conv_gn(p, "enc0", self.in_channels, w0, stream)
        L.add_conv_gn(p, "enc0b", w0, w0, stream)
        L.add_conv_gn(p, "down1", w0, w1, stream)
        L.add_conv_gn(p, "enc1", w1, w1, stream)
        L.add_conv_gn(p, "down2", w1, w2, stream)
        L.add_conv_gn(p, "mid", w2, w2, stream)
        L.add_conv_gn(p, "dec1", w2 + w1, d1, stream)
        L.add_conv_gn(p, "dec0", d1 + w0, d0, stream)
        L.add_conv(p, "head", d0, self.out_channels, 3, stream)
        return p

    def param_shapes(self) -> dict[str, tuple]:
        return self.build_params(None).shapes()

    def arch_hash(self) -> str:
        text = f"seg-net|{self!r}|" + "|".join(
            f"{p}:{'x'.join(map(str, shape))}" for p, shape in self.param_shapes().items()
        )
        return hashlib.sha256(text.encode()).hexdigest()


class SegNet:
    def __init__(self, spec: SegNetSpec, params: ParamTree):
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec: SegNetSpec, stream: RngStream) -> "SegNet":
        return cls(spec, spec.build_params(stream))

    def logits(self, images) -> Tensor:
        p = self.params
        x = Tensor(images)
        e0 = L.conv_gn_silu(p, "enc0", x)
        e0 = L.conv_gn_silu(p, "enc0b", e0)
        h = L.conv_gn_silu(p, "down1", e0, stride=2)
        e1 = L.conv_gn_silu(p, "enc1", h)
        h = L.conv_gn_silu(p, "down2", e1, stride=2)
        h = L.conv_gn_silu(p, "mid", h)
        h = F.concat_channels([F.upsample_nearest2x(h), e1])
        h = L.conv_gn_silu(p, "dec1", h)
        h = F.concat_channels([F.upsample_nearest2x(h), e0])
        h = L.conv_gn_silu(p, "dec0", h)
        return L.conv(p, "head", h, padding=1)


def seg_forward(net: SegNet, image: np.ndarray) -> np.ndarray:
    """Probability map for a single (H, W) image in [0, 1]."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"expected a single H,W image, got shape {img.shape}")
    with no_grad():
        logits = net.logits(img[None, None, :, :])
        probs = F.sigmoid(logits)
    return probs.data[0, 0]


def dice_loss(probs: Tensor, mask: Tensor, smoothing: float = 1.0) -> Tensor:
    """Soft Dice: 1 - (2*sum(p*m)+s) / (sum(p)+sum(m)+s)."""
    if probs.data.shape != mask.data.shape:
        raise ValueError(
            f"probs shape {probs.data.shape} != mask shape {mask.data.shape}"
        )
    inter = F.sum_all(F.mul(probs, mask))
    denom = F.add(F.add(F.sum_all(probs), F.sum_all(mask)), smoothing)
    ratio = F.div(F.add(F.mul(inter, 2.0), smoothing), denom)
    return F.sub(Tensor(np.asarray(1.0)), ratio)


def dice_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    for name, m in (("pred", pred), ("truth", truth)):
        if not np.all(np.isin(np.unique(m), (0, 1))):
            raise ValueError(f"{name} mask is not binary")
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    inter = int(np.logical_and(pred, truth).sum())
    return 2.0 * inter / total


@dataclass
class SegTrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 3e-3
    seed: int = 11
    patience: int = 12
    threshold: float = 0.5

    def validate(self) -> None:
        if min(self.epochs, self.batch_size, self.patience) < 1 or self.lr <= 0:
            raise ValueError("epochs, batch size, lr and patience must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")


@dataclass
class TrainingLog:
    epoch_losses: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_dice: float = 0.0


class TrainingDiverged(DivergenceError):
    def __init__(self, message: str, checkpoint: ParamTree, log):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log


@dataclass
class MetricRow:
    """One Dice result: a model from `train_source` scored on `test_source`."""

    train_source: str
    test_source: str
    dice: float
    per_slice: list[float]

    def validate(self) -> None:
        if abs(self.dice - float(np.mean(self.per_slice))) > 1e-6:
            raise ValueError("dice must equal the mean of per_slice")


def _stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])[:, None, :, :].astype(np.float32)


def _predict_masks(net: SegNet, samples: list[Sample], threshold: float) -> np.ndarray:
    """Thresholded predictions, chunked to keep peak memory flat."""
    outs = []
    with no_grad():
        for lo in range(0, len(samples), _EVAL_CHUNK):
            imgs = _stack_images(samples[lo : lo + _EVAL_CHUNK])
            logits = net.logits(imgs).data
            outs.append(logits[:, 0] > _logit(threshold))
    return np.concatenate(outs, axis=0).astype(np.uint8)


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def _mean_val_dice(net: SegNet, val: list[Sample], threshold: float) -> float:
    preds = _predict_masks(net, val, threshold)
    return float(np.mean([dice_score(p, s.mask) for p, s in zip(preds, val)]))


def train_segmentation(train: list[Sample], val: list[Sample],
                       cfg: SegTrainConfig) -> tuple[ParamTree, TrainingLog]:
    """Soft-Dice Adam training; keeps the checkpoint with the best validation
    Dice and stops early after `patience` epochs without improvement."""
    cfg.validate()
    if not train or not val:
        raise ValueError("train and val sets must be non-empty")
    if any(not s.provenance.is_real for s in val):
        raise ValueError("validation set must contain only real samples")
    train = sorted(train, key=lambda s: (str(s.provenance), s.patient_id, s.slice_index))
    images = _stack_images(train)
    masks = np.stack([s.mask for s in train])[:, None, :, :].astype(np.float32)

    net = SegNet.init(SegNetSpec(), RngStream(cfg.seed, stream=0))
    shuffle = RngStream(cfg.seed, stream=1)
    state = AdamState.for_params(net.params, lr=cfg.lr)
    log = TrainingLog()
    best = net.params.copy()
    n = len(train)

    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            try:
                probs = F.sigmoid(net.logits(images[idx]))
                loss = dice_loss(probs, Tensor(masks[idx]))
                net.params.zero_grad()
                backward(loss, net.params.tensors())
            except DivergenceError as err:
                raise TrainingDiverged(
                    f"segmentation training diverged in epoch {epoch + 1}: {err}",
                    best, log,
                ) from err
            grads = {path: p.grad for path, p in net.params.items()}
            adam_step(net.params, grads, state)
            losses.append(loss.item())
        log.epoch_losses.append(float(np.mean(losses)))

        vd = _mean_val_dice(net, val, cfg.threshold)
        log.val_dice.append(vd)
        if vd > log.best_val_dice:
            log.best_val_dice = vd
            log.best_epoch = epoch
            best = net.params.copy()
        elif epoch - log.best_epoch >= cfg.patience:
            break
    return best, log


def evaluate(params: ParamTree, ds: SiteDataset, threshold: float = 0.5,
             train_source: str = "", split: str = "test") -> MetricRow:
    """Mean per-slice Dice of thresholded predictions on one real split."""
    samples = sorted(ds.samples_for(split), key=lambda s: (s.patient_id, s.slice_index))
    if not samples:
        raise ValueError(f"dataset {ds.site_id!r} has no {split!r} samples")
    if any(not s.provenance.is_real for s in samples):
        raise ValueError("evaluation sets must contain only real samples")
    net = SegNet(SegNetSpec(), params)
    preds = _predict_masks(net, samples, threshold)
    per_slice = [dice_score(p, s.mask) for p, s in zip(preds, samples)]
    row = MetricRow(
        train_source=train_source,
        test_source=f"Hospital {ds.site_id}",
        dice=float(np.mean(per_slice)),
        per_slice=[float(d) for d in per_slice],
    )
    row.validate()
    return row
