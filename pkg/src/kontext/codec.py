"""Deterministic per-patch linear autoencoder: 8×8×3 pixel patches <-> 16-channel latents."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from kontext import autodiff as ad
from kontext.autodiff import GradTape, Tensor
from kontext.errors import ContractError, NumericalError
from kontext.nn import Linear, Module
from kontext.optim import AdamW

log = logging.getLogger(__name__)

PATCH = 8
CHANNELS = 16


def check_image(img: np.ndarray) -> None:
    if img.ndim not in (3, 4) or img.shape[-1] != 3:
        raise ContractError(f"expected (..., H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[-3:-1]
    if h % PATCH or w % PATCH:
        raise ContractError(f"image dims {h}x{w} not divisible by {PATCH}")
    if h < 16 or w < 16:
        raise ContractError(f"image dims {h}x{w} below the 16x16 minimum")


def patchify(img: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """(B, H, W, 3) -> (B, H/p, W/p, p*p*3), patches flattened row-major."""
    b, h, w, c = img.shape
    x = img.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h // patch, w // patch, patch * patch * c)


def unpatchify(p: np.ndarray, patch: int = PATCH) -> np.ndarray:
    b, gh, gw, _ = p.shape
    x = p.reshape(b, gh, gw, patch, patch, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * patch, gw * patch, 3)


class PatchCodec(Module):
    def __init__(self, seed: int = 0, channels: int = CHANNELS):
        rng = np.random.default_rng(seed)
        d = PATCH * PATCH * 3
        self.enc = Linear(rng, d, channels, std=d**-0.5)
        self.dec = Linear(rng, channels, d, std=channels**-0.5)
        self.latent_mean = Tensor(np.zeros(channels, np.float32))
        self.latent_std = Tensor(np.ones(channels, np.float32))

    @property
    def channels(self) -> int:
        return self.enc.d_out

    def encode(self, img: np.ndarray) -> np.ndarray:
        """(H, W, 3) or (B, H, W, 3) -> standardized latent (.., H/8, W/8, C)."""
        img = np.asarray(img, dtype=np.float32)
        check_image(img)
        single = img.ndim == 3
        p = patchify(img[None] if single else img)
        z = p @ self.enc.weight.data.T + self.enc.bias.data
        z = (z - self.latent_mean.data) / self.latent_std.data
        return z[0] if single else z

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32)
        if z.shape[-1] != self.channels or z.ndim not in (3, 4):
            raise ContractError(f"latent must be (..., h, w, {self.channels}), got {z.shape}")
        single = z.ndim == 3
        z = z[None] if single else z
        raw = z * self.latent_std.data + self.latent_mean.data
        p = raw @ self.dec.weight.data.T + self.dec.bias.data
        img = np.clip(unpatchify(p), 0.0, 1.0)
        return img[0] if single else img

    def roundtrip(self, img: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(img))

    def reconstruction_loss(self, patches: np.ndarray) -> Tensor:
        x = Tensor(patches.reshape(-1, patches.shape[-1]))
        recon = self.dec(self.enc(x))
        return ad.mse(recon, x)

    def fit_standardization(self, images: np.ndarray) -> None:
        z = patchify(images) @ self.enc.weight.data.T + self.enc.bias.data
        z = z.reshape(-1, self.channels).astype(np.float64)
        self.latent_mean.data = z.mean(0).astype(np.float32)
        self.latent_std.data = np.maximum(z.std(0), 1e-4).astype(np.float32)


@dataclass
class CodecTrainResult:
    losses: list[float]
    steps: int


def codec_images(seed: int, index: int, batch: int) -> np.ndarray:
    """A batch of toy images drawn across all task families (targets and conditioning images)."""
    from kontext import toyworld as tw

    out = []
    k = 0
    while len(out) < batch:
        task = tw.TASKS[(index * batch + k) % len(tw.TASKS)]
        s = tw.generate(task, seed, index * batch + k)
        out.append(s.target)
        out.extend(img for img, _ in s.cond_images)
        k += 1
    return np.stack(out[:batch])


def train_codec(codec: PatchCodec, steps: int, lr: float = 1e-2, batch: int = 16, seed: int = 0, log_every: int = 0) -> CodecTrainResult:
    """Minimize patch reconstruction MSE on procedurally drawn toy images."""
    params = [codec.enc.weight, codec.enc.bias, codec.dec.weight, codec.dec.bias]
    opt = AdamW(params, lr=lr)
    losses: list[float] = []
    for step in range(steps):
        imgs = codec_images(seed, step, batch)
        opt.zero_grad()
        with GradTape() as tape:
            loss = codec.reconstruction_loss(patchify(imgs))
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"codec loss became {value} at step {step}", step=step, task="codec")
        tape.backward(loss)
        warm = min(1.0, (step + 1) / 100)
        opt.step(lr * warm * (0.5 + 0.5 * np.cos(np.pi * step / steps)))
        losses.append(value)
        if log_every and step % log_every == 0:
            log.info("codec step %d loss %.5f", step, value)
    if steps:
        codec.fit_standardization(np.concatenate([codec_images(seed + 7919, i, 32) for i in range(8)]))
    return CodecTrainResult(losses, steps)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(((np.asarray(a, np.float64) - b) ** 2).mean())
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)
