"""Mask-conditioned denoising diffusion generator.

A small three-resolution conv net predicts the injected noise from the noisy
image concatenated with the conditioning mask; the forward process is the
usual closed-form Gaussian corruption, and generation is plain ancestral
sampling from t=T down to 1. Sampling is batched across masks, with each
mask consuming noise from its own RNG stream so chunked or parallel
execution reproduces the serial result bit for bit.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .nn import functional as F
from .nn import layers as L
from .nn.engine import DivergenceError, Tensor, backward, no_grad
from .nn.optim import AdamState, adam_step
from .nn.params import ParamTree
from .nn.rng import RngStream
from .phantom import Provenance, Sample, SiteDataset

SAMPLING_CLIP = (-1.5, 2.5)
_SAMPLING_CHUNK = 64


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process constants; arrays are indexed 1..T (slot 0 unused,
    except alpha_bars[0] == 1 by convention)."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_sigma: np.ndarray

    def validate(self) -> None:
        b = self.betas[1:]
        if not (b > 0).all() or not (b < 1).all():
            raise ValueError("betas must lie in (0, 1)")
        if not (np.diff(b) >= 0).all():
            raise ValueError("betas must be non-decreasing")
        if self.alpha_bars[0] != 1.0 or not (np.diff(self.alpha_bars) < 0).all():
            raise ValueError("alpha_bars must start at 1 and strictly decrease")


def build_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    betas = np.zeros(T + 1, dtype=np.float64)
    betas[1:] = beta_min + (np.arange(T) / (T - 1)) * (beta_max - beta_min)
    alphas = 1.0 - betas
    alphas[0] = 1.0
    alpha_bars = np.cumprod(alphas)
    sched = NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_sigma=np.sqrt(betas),
    )
    sched.validate()
    return sched


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward noising; t may be an int or a per-sample vector.

    t == 0 is the identity boundary (alpha_bar = 1)."""
    t_arr = np.asarray(t)
    if t_arr.min() < 0 or t_arr.max() > sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T}]")
    if eps.shape != x0.shape:
        raise ValueError("eps shape must match x0")
    ab = sched.alpha_bars[t_arr].astype(x0.dtype)
    if t_arr.ndim == 1:  # per-sample t for batched x0
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float32))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float32) / (half - 1))
    args = t_arr[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass(frozen=True)
class EpsilonNetSpec:
    """Noise-prediction net: mask-concat conditioning, three resolutions."""

    in_channels: int = 2  # noisy image + conditioning mask
    out_channels: int = 1
    widths: tuple[int, int, int] = (32, 64, 64)
    dec_widths: tuple[int, int] = (48, 32)
    temb_dim: int = 64
    temb_hidden: int = 128

    def build_params(self, stream: RngStream | None = None) -> ParamTree:
        w0, w1, w2 = self.widths
        d1, d0 = self.dec_widths
        p = ParamTree()
        L.add_linear(p, "time.fc1", self.temb_dim, self.temb_hidden, stream)
        L.add_linear(p, "time.fc2", self.temb_hidden, self.temb_hidden, stream)
        L.add_linear(p, "time.proj0", self.temb_hidden, w0, stream)
        L.add_linear(p, "time.proj1", self.temb_hidden, w1, stream)
        L.add_linear(p, "time.proj2", self.temb_hidden, w2, stream)
        L.add_conv_gn(p, "enc0", self.in_channels, w0, stream)
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
        text = f"epsilon-net|{self!r}|" + "|".join(
            f"{p}:{'x'.join(map(str, shape))}" for p, shape in self.param_shapes().items()
        )
        return hashlib.sha256(text.encode()).hexdigest()


class EpsilonNet:
    def __init__(self, spec: EpsilonNetSpec, params: ParamTree):
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec: EpsilonNetSpec, stream: RngStream) -> "EpsilonNet":
        return cls(spec, spec.build_params(stream))

    def predict(self, x_noisy, mask, t) -> Tensor:
        """Predicted noise for (N,1,H,W) inputs at integer steps t (N,)."""
        p = self.params
        x = F.concat_channels([Tensor(x_noisy), Tensor(mask)])
        e = Tensor(sinusoidal_embedding(t, self.spec.temb_dim))
        e = F.silu(L.linear(p, "time.fc1", e))
        e = F.silu(L.linear(p, "time.fc2", e))
        biases = []
        for i in range(3):
            b = L.linear(p, f"time.proj{i}", e)
            biases.append(F.reshape(b, (b.shape[0], b.shape[1], 1, 1)))

        e0 = L.conv_gn_silu(p, "enc0", x, bias=biases[0])
        h = L.conv_gn_silu(p, "down1", e0, stride=2, bias=biases[1])
        e1 = L.conv_gn_silu(p, "enc1", h)
        h = L.conv_gn_silu(p, "down2", e1, stride=2, bias=biases[2])
        h = L.conv_gn_silu(p, "mid", h)
        h = F.concat_channels([F.upsample_nearest2x(h), e1])
        h = L.conv_gn_silu(p, "dec1", h)
        h = F.concat_channels([F.upsample_nearest2x(h), e0])
        h = L.conv_gn_silu(p, "dec0", h)
        return L.conv(p, "head", h, padding=1)


@dataclass
class DiffusionTrainConfig:
    epochs: int = 36
    batch_size: int = 8
    lr: float = 2e-3
    seed: int = 7
    T: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def validate(self) -> None:
        if min(self.epochs, self.batch_size, self.T) < 1 or self.lr <= 0:
            raise ValueError("epochs, batch size, lr and T must be positive")
        if self.T < 10:
            raise ValueError("T must be at least 10")
        if not 0 < self.beta_min <= self.beta_max < 1:
            raise ValueError("bad beta range")


@dataclass
class TrainingLog:
    epoch_losses: list[float] = field(default_factory=list)


class TrainingDiverged(DivergenceError):
    """Training hit a non-finite loss/gradient; carries the last good state."""

    def __init__(self, message: str, checkpoint: ParamTree, log):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log


def _predict(net, x_noisy, mask, t) -> Tensor:
    return net.predict(x_noisy, mask, t) if hasattr(net, "predict") else net(x_noisy, mask, t)


def ddpm_loss(net, images: np.ndarray, masks: np.ndarray, t: np.ndarray,
              eps: np.ndarray, sched: NoiseSchedule) -> Tensor:
    """Mean squared error between injected and predicted noise."""
    xt = q_sample(images, t, eps, sched)
    pred = _predict(net, xt, masks, t)
    diff = F.sub(pred, Tensor(eps))
    return F.mean_all(F.mul(diff, diff))


def _batch_arrays(samples: list[Sample]):
    images = np.stack([s.image for s in samples])[:, None, :, :].astype(np.float32)
    masks = np.stack([s.mask for s in samples])[:, None, :, :].astype(np.float32)
    return images, masks


def train_diffusion(ds: SiteDataset, cfg: DiffusionTrainConfig) -> tuple[ParamTree, TrainingLog]:
    """Adam-optimized epsilon net on the dataset's train split."""
    cfg.validate()
    train = ds.samples_for("train")
    if not train:
        raise ValueError(f"dataset {ds.site_id!r} has an empty train split")
    train = sorted(train, key=lambda s: (s.patient_id, s.slice_index))
    sched = build_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    images, masks = _batch_arrays(train)

    init = RngStream(cfg.seed, stream=0)
    shuffle = RngStream(cfg.seed, stream=1)
    t_stream = RngStream(cfg.seed, stream=2)
    eps_stream = RngStream(cfg.seed, stream=3)

    spec = EpsilonNetSpec()
    net = EpsilonNet.init(spec, init)
    state = AdamState.for_params(net.params, lr=cfg.lr)
    log = TrainingLog()
    n = len(train)
    checkpoint = net.params.copy()

    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            bs = len(idx)
            t = t_stream.integers(1, cfg.T, (bs,))
            eps = eps_stream.gaussian((bs, 1) + images.shape[2:])
            try:
                loss = ddpm_loss(net, images[idx], masks[idx], t, eps, sched)
                net.params.zero_grad()
                backward(loss, net.params.tensors())
            except DivergenceError as err:
                raise TrainingDiverged(
                    f"diffusion training diverged in epoch {epoch + 1}: {err}",
                    checkpoint, log,
                ) from err
            grads = {path: p.grad for path, p in net.params.items()}
            adam_step(net.params, grads, state)
            losses.append(loss.item())
        log.epoch_losses.append(float(np.mean(losses)))
        checkpoint = net.params.copy()
    return net.params, log


# ---------------------------------------------------------------- sampling


def _sample_batch(net, masks: np.ndarray, sched: NoiseSchedule,
                  streams: list[RngStream]) -> np.ndarray:
    """Ancestral sampling for a batch of masks, one noise stream per mask."""
    n = masks.shape[0]
    shape = masks.shape[1:]
    lo, hi = SAMPLING_CLIP
    x = np.stack([st.gaussian(shape) for st in streams])
    t_vec = np.empty(n, dtype=np.int64)
    with no_grad():
        for t in range(sched.T, 0, -1):
            t_vec.fill(t)
            eps = _predict(net, x, masks, t_vec).data
            coef = sched.betas[t] / np.sqrt(1.0 - sched.alpha_bars[t])
            x = (x - np.float32(coef) * eps) / np.float32(np.sqrt(sched.alphas[t]))
            if t > 1:
                z = np.stack([st.gaussian(shape) for st in streams])
                x += np.float32(sched.posterior_sigma[t]) * z
            np.clip(x, lo, hi, out=x)
    return np.clip(x, 0.0, 1.0)


def sample_conditional(net, mask: np.ndarray, sched: NoiseSchedule,
                       stream: RngStream) -> np.ndarray:
    """One synthetic image for one binary mask."""
    m = np.asarray(mask, dtype=np.float32)
    out = _sample_batch(net, m[None, None, :, :], sched, [stream])
    return out[0, 0]


def synthesize_dataset(net, local_ds: SiteDataset, sched: NoiseSchedule, seed: int,
                       generator_site_id: str) -> SiteDataset:
    """One synthetic image per local train mask; patient ids are preserved so
    downstream splits stay patient-consistent."""
    train = sorted(local_ds.samples_for("train"),
                   key=lambda s: (s.patient_id, s.slice_index))
    if not train:
        raise ValueError("no train-split masks to condition on")
    masks = np.stack([s.mask for s in train])[:, None, :, :].astype(np.float32)
    streams = [RngStream(seed, stream=i) for i in range(len(train))]

    chunks = [
        (masks[lo : lo + _SAMPLING_CHUNK], streams[lo : lo + _SAMPLING_CHUNK])
        for lo in range(0, len(train), _SAMPLING_CHUNK)
    ]
    workers = int(os.environ.get("FDM_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(lambda c: _sample_batch(net, c[0], sched, c[1]), chunks))
    else:
        outs = [_sample_batch(net, m, sched, s) for m, s in chunks]
    images = np.concatenate(outs, axis=0)[:, 0]

    prov = Provenance.synthetic(generator_site_id)
    samples = [
        Sample(images[i].astype(np.float32), src.mask.copy(), src.patient_id,
               src.slice_index, prov)
        for i, src in enumerate(train)
    ]
    splits = {s.patient_id: "train" for s in samples}
    out = SiteDataset(site_id=f"syn.{generator_site_id}", samples=samples, splits=splits)
    out.validate()
    return out
