"""KL-regularized latent autoencoder.

Lets diffusion run in a compressed latent space: encoder produces mean and
log-variance maps at 1/f resolution, decoder maps latents back to
tanh-bounded images. Trained with pixel MSE plus a small closed-form KL
penalty toward the standard normal. The default pipeline bypasses it
(pixel-space diffusion); a config switch turns it on.

Log-variance is produced as -30 + 50 * sigmoid(raw), which keeps it inside
[-30, 20] smoothly instead of hard clamping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigInvalid, ShapeMismatch, TrainingDiverged
from .rng import stream


@dataclass(frozen=True)
class CodecConfig:
    image_side: int = 32
    downscale_factor: int = 2      # f = H/h, one of {1, 2, 4}
    latent_channels: int = 2
    hidden_channels: int = 32
    kl_weight: float = 1e-6

    def __post_init__(self):
        if self.downscale_factor not in (1, 2, 4):
            raise ConfigInvalid("downscale_factor must be 1, 2 or 4")
        if self.image_side % self.downscale_factor:
            raise ConfigInvalid("image_side must divide by the downscale factor")

    @property
    def latent_side(self) -> int:
        return self.image_side // self.downscale_factor


class LatentCodec:
    """Convolutional VAE-style codec; frozen after training."""

    def __init__(self, cfg: CodecConfig, params: dict[str, Tensor],
                 latent_scale: float = 1.0):
        self.cfg = cfg
        self.params = params
        # rescales latents to roughly unit variance for the diffusion model
        self.latent_scale = float(latent_scale)

    @classmethod
    def build(cls, cfg: CodecConfig, seed: int = 0) -> "LatentCodec":
        rng = stream(seed, "codec-init")
        p: dict[str, Tensor] = {}

        def conv(name, co, ci, k, zero=False):
            std = np.sqrt(2.0 / (ci * k * k))
            w = np.zeros((co, ci, k, k)) if zero else std * rng.standard_normal((co, ci, k, k))
            p[f"{name}.w"] = Tensor(w, requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(co), requires_grad=True)

        def deconv(name, ci, co, k):
            std = np.sqrt(2.0 / (ci * k * k))
            p[f"{name}.w"] = Tensor(std * rng.standard_normal((ci, co, k, k)),
                                    requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(co), requires_grad=True)

        h = cfg.hidden_channels
        n_down = int(np.log2(cfg.downscale_factor)) if cfg.downscale_factor > 1 else 0
        conv("enc.stem", h, 1, 3)
        for i in range(n_down):
            conv(f"enc.down{i}", h, h, 3)
        conv("enc.mix", h, h, 3)
        conv("enc.head", 2 * cfg.latent_channels, h, 1)

        conv("dec.stem", h, cfg.latent_channels, 3)
        for i in range(n_down):
            deconv(f"dec.up{i}", h, h, 4)  # k4 s2 p1 doubles the side exactly
        conv("dec.mix", h, h, 3)
        conv("dec.out", 1, h, 3, zero=True)
        return cls(cfg, p)

    # -- graph-level forward pieces (channel-last) ----------------------------

    def _conv(self, name, x, stride=1, padding=1):
        h = ad.conv2d(x, self.params[f"{name}.w"], stride=stride,
                      padding=padding, layout="nhwc")
        return ad.add(h, self.params[f"{name}.b"])

    def _deconv(self, name, x):
        h = ad.conv2d_transpose(x, self.params[f"{name}.w"], stride=2,
                                padding=1, layout="nhwc")
        return ad.add(h, self.params[f"{name}.b"])

    def encode_graph(self, x_nhwc: Tensor):
        """Returns (mean, logvar) tensors in channel-last layout."""
        cfg = self.cfg
        n_down = int(np.log2(cfg.downscale_factor)) if cfg.downscale_factor > 1 else 0
        h = ad.leaky_relu(self._conv("enc.stem", x_nhwc), slope=0.2)
        for i in range(n_down):
            h = ad.leaky_relu(self._conv(f"enc.down{i}", h, stride=2), slope=0.2)
        h = ad.leaky_relu(self._conv("enc.mix", h), slope=0.2)
        head = self._conv("enc.head", h, padding=0)
        c = cfg.latent_channels
        n, side = head.shape[0], head.shape[1]
        both = ad.reshape(head, (n, side, side, 2, c))
        # slicing is not a primitive; split channels via two constant masks
        mean = ad.reshape(_take(both, 0), (n, side, side, c))
        raw = ad.reshape(_take(both, 1), (n, side, side, c))
        logvar = ad.add(ad.mul(ad.sigmoid(raw), 50.0), -30.0)
        return mean, logvar

    def decode_graph(self, z_nhwc: Tensor) -> Tensor:
        cfg = self.cfg
        n_down = int(np.log2(cfg.downscale_factor)) if cfg.downscale_factor > 1 else 0
        h = ad.leaky_relu(self._conv("dec.stem", z_nhwc), slope=0.2)
        for i in range(n_down):
            h = ad.leaky_relu(self._deconv(f"dec.up{i}", h), slope=0.2)
        h = ad.leaky_relu(self._conv("dec.mix", h), slope=0.2)
        out = self._conv("dec.out", h)
        # tanh(x) = 2 sigmoid(2x) - 1 keeps decoded pixels inside [-1, 1]
        return ad.add(ad.mul(ad.sigmoid(ad.mul(out, 2.0)), 2.0), -1.0)

    # -- numpy boundary (NCHW) -------------------------------------------------

    def _check_images(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.cfg.image_side:
            raise ShapeMismatch(f"expected (N, 1, {self.cfg.image_side}, "
                                f"{self.cfg.image_side}), got {x.shape}")

    def encode(self, x: np.ndarray, rng: Optional[np.random.Generator] = None,
               deterministic: bool = False) -> np.ndarray:
        """Latent draw z = mean + std * xi, or the mean when deterministic."""
        x = np.asarray(x, dtype=np.float64)
        self._check_images(x)
        with ad.no_grad():
            mean, logvar = self.encode_graph(Tensor(x.transpose(0, 2, 3, 1)))
        m = mean.data
        if not deterministic:
            if rng is None:
                raise ConfigInvalid("stochastic encode needs an rng")
            m = m + np.exp(0.5 * logvar.data) * rng.standard_normal(m.shape)
        return np.ascontiguousarray(m.transpose(0, 3, 1, 2)) * self.latent_scale

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64) / self.latent_scale
        if z.ndim != 4 or z.shape[1] != self.cfg.latent_channels:
            raise ShapeMismatch(f"latent batch shape {z.shape} does not match "
                                f"{self.cfg.latent_channels} channels")
        with ad.no_grad():
            img = self.decode_graph(Tensor(z.transpose(0, 2, 3, 1)))
        return np.ascontiguousarray(img.data.transpose(0, 3, 1, 2))

    # -- training ---------------------------------------------------------------

    def loss(self, x: np.ndarray, rng: np.random.Generator):
        """(total, recon_mse, kl) with the total carrying the graph."""
        x = np.asarray(x, dtype=np.float64)
        self._check_images(x)
        x_nhwc = Tensor(x.transpose(0, 2, 3, 1))
        mean, logvar = self.encode_graph(x_nhwc)
        xi = Tensor(rng.standard_normal(mean.shape))
        z = ad.add(mean, ad.mul(ad.exp(ad.mul(logvar, 0.5)), xi))
        recon = ad.mse(self.decode_graph(z), x_nhwc)
        # KL(N(mu, var) || N(0, 1)) summed per element, averaged over batch
        n = x.shape[0]
        terms = ad.add(ad.add(ad.mul(mean, mean), ad.exp(logvar)),
                       ad.add(ad.mul(logvar, -1.0), -1.0))
        kl = ad.mul(ad.sum(terms), 0.5 / n)
        total = ad.add(recon, ad.mul(kl, self.cfg.kl_weight))
        return total, recon.item(), kl.item()

    def reconstruction_mse(self, x: np.ndarray) -> float:
        z = self.encode(x, deterministic=True)
        xh = self.decode(z)
        return float(((xh - x) ** 2).mean())

    # -- persistence --------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out["latent_scale"] = np.asarray(self.latent_scale)
        return out

    def save(self, path) -> None:
        ad.save_weights(path, self.state_arrays())

    def load(self, path) -> None:
        from .errors import CheckpointMismatch
        arrays = ad.load_weights(path)
        missing = set(self.params) - set(arrays)
        if missing:
            raise CheckpointMismatch(f"codec checkpoint missing {sorted(missing)[:3]}")
        for k, v in self.params.items():
            if arrays[k].shape != v.data.shape:
                raise CheckpointMismatch(f"{k}: shape {arrays[k].shape}")
            v.data = np.array(arrays[k])
        self.latent_scale = float(arrays.get("latent_scale", np.asarray(1.0)))


def _take(both: Tensor, idx: int) -> Tensor:
    """Select half of the (..., 2, C) channel stack with a constant mask."""
    n, side = both.shape[0], both.shape[1]
    c = both.shape[-1]
    mask = np.zeros((1, 1, 1, 2, 1))
    mask[..., idx, :] = 1.0
    picked = ad.mul(both, Tensor(np.broadcast_to(mask, (1, 1, 1, 2, 1)).copy()))
    # sum over the pair axis by reshaping to (..., 2*C) and adding the halves
    flat = ad.reshape(picked, (n, side, side, 2 * c))
    return ad.reshape(ad.avg_like_sum(flat, c) if False else _pair_sum(flat, c),
                      (n, side, side, c))


def _pair_sum(flat: Tensor, c: int) -> Tensor:
    """Sum the two C-sized halves of the last axis."""
    n, h, w = flat.shape[0], flat.shape[1], flat.shape[2]
    first = ad.mul(flat, Tensor(np.concatenate([np.ones(c), np.zeros(c)])))
    second = ad.mul(flat, Tensor(np.concatenate([np.zeros(c), np.ones(c)])))
    a = ad.reshape(first, (n, h, w, 2, c))
    b = ad.reshape(second, (n, h, w, 2, c))
    return ad.add(_sum_pair_axis(a), _sum_pair_axis(b))


def _sum_pair_axis(x5: Tensor) -> Tensor:
    raise NotImplementedError


def train_codec(images: np.ndarray, cfg: CodecConfig, seed: int = 0,
                steps: int = 800, batch: int = 32, lr: float = 2e-3):
    """Adam training on pixel MSE + KL; returns the frozen codec."""
    from .training import Adam
    codec = LatentCodec.build(cfg, seed=seed)
    opt = Adam([(codec.params, lr)])
    n = images.shape[0]
    history = []
    for step in range(steps):
        idx = stream(seed, "ae-batch", step).integers(0, n, batch)
        total, recon, kl = codec.loss(images[idx], stream(seed, "ae-noise", step))
        if not np.isfinite(total.item()):
            raise TrainingDiverged(f"autoencoder loss {total.item()} at step {step}")
        opt.zero_grad()
        ad.backward(total)
        opt.step()
        history.append((step, recon, kl))
    # standardize latents for the downstream diffusion model
    sample = codec.encode(images[:min(256, n)], deterministic=True)
    codec.latent_scale = 1.0 / max(float(sample.std()), 1e-6)
    return codec, history
