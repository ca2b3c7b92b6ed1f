"""Slice auto-encoder, patch siamese auto-encoder, their losses and trainers.

The slice model (AE) is five stride-2 convolutions from 2 input channels up a
doubling ladder to 256 bottleneck channels, mirrored by five transposed
convolutions; batch normalization and ReLU follow every convolution except the
sigmoid output.  Transposed-conv output paddings are solved against the
recorded encoder sizes so odd input extents round-trip exactly.

The patch model (SAE) is a single shared-parameter branch applied to both
sides of a pair: 3 valid convolutions with one maxpool give a (16, 2, 2)
latent from a (2, 15, 15) patch, and 4 full convolutions with one upsample
reconstruct the patch.  The pair loss adds per-patch mean squared error and
subtracts alpha times the cosine similarity of the two latents, so similar
pairs are pulled together in latent space while reconstruction keeps the map
from collapsing.

Training is plain mini-batch Adam with a seeded shuffle; with a fixed seed a
run is bit-reproducible.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import (
    AdamState,
    Conv2D,
    LayerSpec,
    Sequential,
    adam_step,
    chain_shapes,
    load_checkpoint,
    save_checkpoint,
)

AE_CHANNEL_LADDER = (2, 16, 32, 64, 128, 256)
SAE_PATCH_SIZE = 15
SAE_CHANNELS = 16


class ModelError(Exception):
    """Architecture misuse (wrong input shape, malformed checkpoint kind)."""


class TrainingDivergedError(Exception):
    """A batch produced a non-finite loss; message carries epoch and batch id."""


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float = 1e-3
    alpha: float = 0.005
    seed: int = 0
    checkpoint_every: int = 0
    deterministic: bool = True


def ae_train_defaults(seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=160, batch_size=40, learning_rate=1e-3, seed=seed)


def sae_train_defaults(seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=30, batch_size=225, learning_rate=1e-3, alpha=0.005, seed=seed)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    wall_time_s: float


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def ae_loss(x: np.ndarray, xhat: np.ndarray) -> float:
    """Mean over the batch of the per-sample L1 reconstruction error."""
    if x.shape != xhat.shape:
        raise ModelError(f"loss shapes differ: {x.shape} vs {xhat.shape}")
    b = x.shape[0]
    return float(np.abs(x - xhat).sum() / b)


def ae_loss_grad(x: np.ndarray, xhat: np.ndarray) -> tuple[float, np.ndarray]:
    if x.shape != xhat.shape:
        raise ModelError(f"loss shapes differ: {x.shape} vs {xhat.shape}")
    b = x.shape[0]
    diff = xhat - x
    loss = float(np.abs(diff).sum() / b)
    return loss, np.sign(diff) / np.asarray(b, dtype=xhat.dtype)


def cosine_sim(z1: np.ndarray, z2: np.ndarray) -> float:
    """Cosine similarity of two flattened latent vectors, in [-1, 1].

    Defined as 0 (with a warning) when both vectors are zero, so a collapsed
    latent never divides by zero.
    """
    z1 = np.asarray(z1, dtype=np.float64).reshape(-1)
    z2 = np.asarray(z2, dtype=np.float64).reshape(-1)
    n1 = np.linalg.norm(z1)
    n2 = np.linalg.norm(z2)
    if n1 == 0.0 or n2 == 0.0:
        warnings.warn("cosine similarity of a zero latent defined as 0", RuntimeWarning)
        return 0.0
    return float(np.dot(z1, z2) / (n1 * n2))


def _pair_cosine(z1f: np.ndarray, z2f: np.ndarray):
    """Batched cosine with zero-latent guard; returns cos and both partials."""
    dots = (z1f * z2f).sum(axis=1)
    n1 = np.sqrt((z1f * z1f).sum(axis=1))
    n2 = np.sqrt((z2f * z2f).sum(axis=1))
    ok = (n1 > 0) & (n2 > 0)
    denom = np.where(ok, n1 * n2, 1.0)
    cos = np.where(ok, dots / denom, 0.0)
    okf = ok[:, None]
    d1 = np.where(okf, z2f / denom[:, None] - (cos / np.where(ok, n1 * n1, 1.0))[:, None] * z1f, 0.0)
    d2 = np.where(okf, z1f / denom[:, None] - (cos / np.where(ok, n2 * n2, 1.0))[:, None] * z2f, 0.0)
    return cos, d1, d2, bool((~ok).any())


def sae_loss(
    x1: np.ndarray,
    x2: np.ndarray,
    xhat1: np.ndarray,
    xhat2: np.ndarray,
    z1: np.ndarray,
    z2: np.ndarray,
    alpha: float,
) -> float:
    """Pair loss: per-patch MSE of both reconstructions minus the scaled
    cosine similarity of the two latents, averaged over the batch."""
    for a, b in ((x1, xhat1), (x2, xhat2)):
        if a.shape != b.shape:
            raise ModelError(f"loss shapes differ: {a.shape} vs {b.shape}")
    bsz = x1.shape[0]
    mse1 = np.square(x1 - xhat1).reshape(bsz, -1).mean(axis=1)
    mse2 = np.square(x2 - xhat2).reshape(bsz, -1).mean(axis=1)
    cos, _, _, _ = _pair_cosine(z1.reshape(bsz, -1), z2.reshape(bsz, -1))
    return float(np.mean(mse1 + mse2 - alpha * cos))


def sae_loss_grad(x1, x2, xhat1, xhat2, z1, z2, alpha):
    """Loss plus gradients with respect to both reconstructions and latents."""
    bsz = x1.shape[0]
    n_el = x1[0].size
    d1 = xhat1 - x1
    d2 = xhat2 - x2
    mse1 = np.square(d1).reshape(bsz, -1).mean(axis=1)
    mse2 = np.square(d2).reshape(bsz, -1).mean(axis=1)
    z1f = z1.reshape(bsz, -1)
    z2f = z2.reshape(bsz, -1)
    cos, dc1, dc2, had_zero = _pair_cosine(z1f, z2f)
    loss = float(np.mean(mse1 + mse2 - alpha * cos))
    scale = 2.0 / (n_el * bsz)
    dxhat1 = (scale * d1).astype(xhat1.dtype)
    dxhat2 = (scale * d2).astype(xhat2.dtype)
    dz1 = (-(alpha / bsz) * dc1).reshape(z1.shape).astype(z1.dtype)
    dz2 = (-(alpha / bsz) * dc2).reshape(z2.shape).astype(z2.dtype)
    if had_zero:
        warnings.warn("zero latent in a pair batch; its cosine term contributed 0", RuntimeWarning)
    return loss, dxhat1, dxhat2, dz1, dz2


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------


def plan_ae_specs(
    input_hw: tuple[int, int], channels: tuple[int, ...] = AE_CHANNEL_LADDER
) -> tuple[list[LayerSpec], list[LayerSpec], tuple[int, int, int]]:
    """Encoder/decoder specs for a given slice size, plus the bottleneck shape.

    Decoder output paddings are solved so each transposed convolution lands
    exactly on the matching encoder size (0 for odd targets, 1 for even).
    """
    enc: list[LayerSpec] = []
    for cin, cout in zip(channels[:-1], channels[1:]):
        enc.append(
            LayerSpec(
                "conv",
                in_channels=cin,
                out_channels=cout,
                kernel=(3, 3),
                stride=(2, 2),
                padding=(1, 1),
                bias=False,
            )
        )
        enc.append(LayerSpec("batchnorm", in_channels=cout))
        enc.append(LayerSpec("relu"))

    shapes = chain_shapes(enc, (channels[0], *input_hw))
    bottleneck = shapes[-1]
    # Spatial size before each encoder stage, outermost first.
    stage_sizes = [input_hw] + [s[1:] for s in shapes[2::3]]

    dec: list[LayerSpec] = []
    rev = tuple(reversed(channels))
    for i, (cin, cout) in enumerate(zip(rev[:-1], rev[1:])):
        src = stage_sizes[len(stage_sizes) - 1 - i]
        tgt = stage_sizes[len(stage_sizes) - 2 - i]
        out_pad = (tgt[0] - (2 * src[0] - 1), tgt[1] - (2 * src[1] - 1))
        last = i == len(rev) - 2
        dec.append(
            LayerSpec(
                "conv_transpose",
                in_channels=cin,
                out_channels=cout,
                kernel=(3, 3),
                stride=(2, 2),
                padding=(1, 1),
                output_padding=out_pad,
                init="glorot" if last else "he",
                bias=last,
            )
        )
        if last:
            dec.append(LayerSpec("sigmoid"))
        else:
            dec.append(LayerSpec("batchnorm", in_channels=cout))
            dec.append(LayerSpec("relu"))
    return enc, dec, bottleneck


def sae_specs(channels: int = SAE_CHANNELS) -> tuple[list[LayerSpec], list[LayerSpec]]:
    """Patch branch: valid-padding encoder with one maxpool, full-padding
    decoder with one upsample and a 2x2 sigmoid output head."""
    c = channels
    enc = [
        LayerSpec("conv", in_channels=2, out_channels=c, kernel=(3, 3), padding="valid"),
        LayerSpec("relu"),
        LayerSpec("maxpool", factor=2),
        LayerSpec("conv", in_channels=c, out_channels=c, kernel=(3, 3), padding="valid"),
        LayerSpec("relu"),
        LayerSpec("conv", in_channels=c, out_channels=c, kernel=(3, 3), padding="valid"),
        LayerSpec("relu"),
    ]
    dec = [
        LayerSpec("conv", in_channels=c, out_channels=c, kernel=(3, 3), padding="full"),
        LayerSpec("relu"),
        LayerSpec("conv", in_channels=c, out_channels=c, kernel=(3, 3), padding="full"),
        LayerSpec("relu"),
        LayerSpec("upsample", factor=2),
        LayerSpec("conv", in_channels=c, out_channels=c, kernel=(3, 3), padding="full"),
        LayerSpec("relu"),
        LayerSpec("conv", in_channels=c, out_channels=2, kernel=(2, 2), padding="full", init="glorot"),
        LayerSpec("sigmoid"),
    ]
    return enc, dec


class AEModel:
    """Slice auto-encoder; built for one fixed slice size."""

    kind = "ae"

    def __init__(
        self,
        input_hw: tuple[int, int],
        channels: tuple[int, ...] = AE_CHANNEL_LADDER,
        seed: int = 0,
        dtype=np.float32,
    ):
        self.input_hw = tuple(int(v) for v in input_hw)
        self.channels = tuple(channels)
        enc, dec, bottleneck = plan_ae_specs(self.input_hw, self.channels)
        self.bottleneck_shape = bottleneck
        rng = np.random.default_rng(seed)
        self.encoder = Sequential(enc, rng, dtype)
        self.decoder = Sequential(dec, rng, dtype)
        self.checkpoint_id: str | None = None

    def _check_input(self, x: np.ndarray) -> None:
        want = (self.channels[0], *self.input_hw)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ModelError(f"expected input (B, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._check_input(x)
        return self.decoder.forward(self.encoder.forward(x, train), train)

    def encode(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._check_input(x)
        return self.encoder.forward(x, train)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, train=False)

    def params(self) -> dict[str, np.ndarray]:
        out = {f"enc.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.params().items()})
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {f"enc.{k}": v for k, v in self.encoder.grads().items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.grads().items()})
        return out

    def state(self) -> dict[str, np.ndarray]:
        out = {f"enc.{k}": v for k, v in self.encoder.state().items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.state().items()})
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        self.encoder.set_params({k[4:]: v for k, v in values.items() if k.startswith("enc.")})
        self.decoder.set_params({k[4:]: v for k, v in values.items() if k.startswith("dec.")})

    def set_state(self, values: dict[str, np.ndarray]) -> None:
        self.encoder.set_state({k[4:]: v for k, v in values.items() if k.startswith("enc.")})
        self.decoder.set_state({k[4:]: v for k, v in values.items() if k.startswith("dec.")})

    def astype(self, dtype) -> None:
        self.encoder.astype(dtype)
        self.decoder.astype(dtype)

    def loss_and_grads(self, x: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        xhat = self.forward(x, train=True)
        loss, dxhat = ae_loss_grad(x, xhat)
        self.encoder.backward(self.decoder.backward(dxhat))
        return loss, self.grads()

    def loss_only(self, x: np.ndarray) -> float:
        return ae_loss(x, self.forward(x, train=True))

    @property
    def provenance(self) -> str:
        return f"ae:{self.checkpoint_id or 'unsaved'}"


class SAEModel:
    """Siamese patch auto-encoder; both branches are the same parameter set.

    There is exactly one encoder and one decoder object; pair batches are
    concatenated and pushed through them once, which makes the weight sharing
    structural rather than a synchronized copy.
    """

    kind = "sae"

    def __init__(
        self,
        patch_size: int = SAE_PATCH_SIZE,
        channels: int = SAE_CHANNELS,
        alpha: float = 0.005,
        seed: int = 0,
        dtype=np.float32,
    ):
        if patch_size != SAE_PATCH_SIZE:
            # The valid/pool/full geometry below reconstructs exactly 15x15.
            raise ModelError(f"patch size must be {SAE_PATCH_SIZE}, got {patch_size}")
        self.patch_size = patch_size
        self.channels = channels
        self.alpha = alpha
        enc, dec = sae_specs(channels)
        rng = np.random.default_rng(seed)
        self.encoder = Sequential(enc, rng, dtype)
        self.decoder = Sequential(dec, rng, dtype)
        self.latent_shape = chain_shapes(enc, (2, patch_size, patch_size))[-1]
        self.checkpoint_id: str | None = None

    @property
    def left_branch(self) -> tuple[Sequential, Sequential]:
        return (self.encoder, self.decoder)

    @property
    def right_branch(self) -> tuple[Sequential, Sequential]:
        return (self.encoder, self.decoder)

    def _check_input(self, x: np.ndarray) -> None:
        want = (2, self.patch_size, self.patch_size)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ModelError(f"expected patches (B, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")

    def encode(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._check_input(x)
        return self.encoder.forward(x, train)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        self._check_input(x)
        return self.decoder.forward(self.encoder.forward(x, False), False)

    def forward_pair(self, x1: np.ndarray, x2: np.ndarray, train: bool):
        self._check_input(x1)
        self._check_input(x2)
        b = x1.shape[0]
        z = self.encoder.forward(np.concatenate([x1, x2], axis=0), train)
        xhat = self.decoder.forward(z, train)
        return xhat[:b], xhat[b:], z[:b], z[b:]

    def params(self) -> dict[str, np.ndarray]:
        out = {f"enc.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.params().items()})
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {f"enc.{k}": v for k, v in self.encoder.grads().items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.grads().items()})
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        self.encoder.set_params({k[4:]: v for k, v in values.items() if k.startswith("enc.")})
        self.decoder.set_params({k[4:]: v for k, v in values.items() if k.startswith("dec.")})

    def set_state(self, values: dict[str, np.ndarray]) -> None:
        pass  # no running statistics in the patch branch

    def astype(self, dtype) -> None:
        self.encoder.astype(dtype)
        self.decoder.astype(dtype)

    def loss_and_grads(self, batch) -> tuple[float, dict[str, np.ndarray]]:
        x1, x2 = batch
        b = x1.shape[0]
        xc = np.concatenate([x1, x2], axis=0)
        z = self.encoder.forward(xc, train=True)
        xhat = self.decoder.forward(z, train=True)
        loss, dxh1, dxh2, dz1, dz2 = sae_loss_grad(
            x1, x2, xhat[:b], xhat[b:], z[:b], z[b:], self.alpha
        )
        dz = self.decoder.backward(np.concatenate([dxh1, dxh2], axis=0))
        dz += np.concatenate([dz1, dz2], axis=0)
        self.encoder.backward(dz)
        return loss, self.grads()

    def loss_only(self, batch) -> float:
        x1, x2 = batch
        xh1, xh2, z1, z2 = self.forward_pair(x1, x2, train=True)
        return sae_loss(x1, x2, xh1, xh2, z1, z2, self.alpha)

    # -- dense voxel-wise application ------------------------------------
    #
    # Center-mode error maps evaluate the branch at every eligible voxel of a
    # slice.  Overlapping patches share almost all encoder work, so the
    # encoder runs densely on the whole slice (once per maxpool phase, since
    # pooling windows align with the patch origin parity), and the decoder is
    # evaluated only down to the patch's center pixel.  Both shortcuts compute
    # the same function as the per-patch forward; tests pin the equivalence.

    def slice_center_latents(self, image: np.ndarray, centers: np.ndarray) -> np.ndarray:
        """Latents of the patches centered at `centers` ((n, 2) of (y, x))
        within one (2, H, W) slice; equals encode() on the gathered patches."""
        from numpy.lib.stride_tricks import sliding_window_view

        conv1, relu1, pool = self.encoder.layers[0], self.encoder.layers[1], self.encoder.layers[2]
        conv2, relu2 = self.encoder.layers[3], self.encoder.layers[4]
        conv3, relu3 = self.encoder.layers[5], self.encoder.layers[6]
        a1 = relu1.forward(conv1.forward(image[None].astype(self.encoder.dtype), False), False)
        windows = {}
        for p in (0, 1):
            for q in (0, 1):
                pooled = pool.forward(a1[:, :, p:, q:], False)
                z = relu3.forward(
                    conv3.forward(relu2.forward(conv2.forward(pooled, False), False), False),
                    False,
                )
                windows[(p, q)] = sliding_window_view(z[0], (2, 2), axis=(1, 2))
        half = self.patch_size // 2
        centers = np.asarray(centers)
        out = np.empty((len(centers), *self.latent_shape), dtype=a1.dtype)
        r = centers[:, 0] - half
        c = centers[:, 1] - half
        for p in (0, 1):
            for q in (0, 1):
                sel = (r % 2 == p) & (c % 2 == q)
                if sel.any():
                    win = windows[(p, q)]
                    gathered = win[:, (r[sel] - p) // 2, (c[sel] - q) // 2]  # (16, n, 2, 2)
                    out[sel] = gathered.transpose(1, 0, 2, 3)
        return out

    def decode_center_values(self, z: np.ndarray) -> np.ndarray:
        """Center pixel of the decoded patch for a latent batch; equals
        reconstruct()[:, :, 7, 7] without computing the full reconstruction."""
        dec = self.decoder.layers
        d0 = dec[1].forward(dec[0].forward(z, False), False)  # (B,16,4,4)
        d1 = dec[3].forward(dec[2].forward(d0, False), False)  # (B,16,6,6)
        # Only decoder rows/cols 4..7 of the upsampled grid reach the center.
        u_sub = d1[:, :, 2:4, 2:4].repeat(2, axis=2).repeat(2, axis=3)  # (B,16,4,4)
        c5, c7 = dec[5], dec[7]
        conv5 = Conv2D(c5.in_channels, c5.out_channels, c5.kernel, (1, 1), (0, 0), True, z.dtype)
        conv5.W, conv5.b = c5.W, c5.b
        s = dec[6].forward(conv5.forward(u_sub, False), False)  # (B,16,2,2)
        conv7 = Conv2D(c7.in_channels, c7.out_channels, c7.kernel, (1, 1), (0, 0), True, z.dtype)
        conv7.W, conv7.b = c7.W, c7.b
        t = dec[8].forward(conv7.forward(s, False), False)  # (B,2,1,1)
        return t[:, :, 0, 0]

    @property
    def provenance(self) -> str:
        return f"sae:{self.checkpoint_id or 'unsaved'}"


def reconstruct_slice(model: AEModel, pixels: np.ndarray) -> np.ndarray:
    """Inference reconstruction of one (C, H, W) slice; output stays in [0, 1]."""
    return model.reconstruct(pixels[None])[0]


def reconstruct_patch(model: SAEModel, pixels: np.ndarray) -> np.ndarray:
    """Inference reconstruction of one (2, 15, 15) patch; output stays in [0, 1]."""
    return model.reconstruct(pixels[None])[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _run_epochs(model, data_len, config, batch_fn, checkpoint_fn=None):
    state = AdamState(learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed + 1)
    curve: list[EpochStats] = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(data_len)
        total = 0.0
        for bi, start in enumerate(range(0, data_len, config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss, grads = batch_fn(idx)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {bi}")
            adam_step(model.params(), grads, state)
            total += loss * len(idx)
        curve.append(EpochStats(epoch, total / data_len, time.perf_counter() - t0))
        if checkpoint_fn and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            checkpoint_fn(epoch)
    return curve


def as_slice_array(slices) -> np.ndarray:
    if isinstance(slices, np.ndarray):
        return slices
    return np.stack([s.pixels for s in slices]).astype(np.float32)


def as_pair_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        return pairs
    left = np.stack([p.left.pixels for p in pairs]).astype(np.float32)
    right = np.stack([p.right.pixels for p in pairs]).astype(np.float32)
    return left, right


def train_ae(
    slices,
    config: TrainConfig,
    model: AEModel | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[AEModel, list[EpochStats]]:
    """Train the slice auto-encoder; returns the model and the loss curve."""
    x = as_slice_array(slices)
    if len(x) == 0:
        raise ModelError("empty slice dataset")
    if model is None:
        model = AEModel(x.shape[2:], seed=config.seed)

    def batch_fn(idx):
        return model.loss_and_grads(x[idx])

    ckpt = None
    if checkpoint_dir is not None:
        ckpt = lambda epoch: save_ae(model, Path(checkpoint_dir) / f"ae_epoch{epoch:04d}.anom")
    curve = _run_epochs(model, len(x), config, batch_fn, ckpt)
    return model, curve


def train_sae(
    pairs,
    config: TrainConfig,
    model: SAEModel | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[SAEModel, list[EpochStats]]:
    """Train the siamese patch auto-encoder on similar pairs."""
    left, right = as_pair_arrays(pairs)
    if len(left) == 0:
        raise ModelError("empty pair dataset")
    if model is None:
        model = SAEModel(alpha=config.alpha, seed=config.seed)
    model.alpha = config.alpha

    def batch_fn(idx):
        return model.loss_and_grads((left[idx], right[idx]))

    ckpt = None
    if checkpoint_dir is not None:
        ckpt = lambda epoch: save_sae(model, Path(checkpoint_dir) / f"sae_epoch{epoch:04d}.anom")
    curve = _run_epochs(model, len(left), config, batch_fn, ckpt)
    return model, curve


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_ae(model: AEModel, path: str | Path, meta: dict | None = None) -> str:
    arch = {"input_hw": list(model.input_hw), "channels": list(model.channels)}
    arrays = dict(model.params())
    arrays.update(model.state())
    cid = save_checkpoint(path, "ae", arch, arrays, meta)
    model.checkpoint_id = cid
    return cid


def save_sae(model: SAEModel, path: str | Path, meta: dict | None = None) -> str:
    arch = {"patch_size": model.patch_size, "channels": model.channels, "alpha": model.alpha}
    cid = save_checkpoint(path, "sae", arch, dict(model.params()), meta)
    model.checkpoint_id = cid
    return cid


def load_ae(path: str | Path) -> AEModel:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "ae":
        raise ModelError(f"{path}: expected an 'ae' checkpoint, found {ckpt.kind!r}")
    model = AEModel(tuple(ckpt.arch["input_hw"]), tuple(ckpt.arch["channels"]))
    model.set_params({k: ckpt.arrays[k] for k in model.params()})
    model.set_state({k: ckpt.arrays[k] for k in model.state()})
    model.checkpoint_id = ckpt.checkpoint_id
    return model


def load_sae(path: str | Path) -> SAEModel:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "sae":
        raise ModelError(f"{path}: expected an 'sae' checkpoint, found {ckpt.kind!r}")
    model = SAEModel(
        patch_size=int(ckpt.arch["patch_size"]),
        channels=int(ckpt.arch["channels"]),
        alpha=float(ckpt.arch["alpha"]),
    )
    model.set_params(ckpt.arrays)
    model.checkpoint_id = ckpt.checkpoint_id
    return model
