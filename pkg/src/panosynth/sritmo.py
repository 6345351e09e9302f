"""Joint super-resolution and inverse tone mapping on the sphere.

An LDR patch is encoded into pixel-aligned latent codes anchored at the
sphere coordinates of the source pixel centers.  Any continuous position
inside the patch gets a latent vector by area interpolation of its four
anchor neighbors; a four-layer MLP regresses the high-resolution LDR color
(exposing its second-layer activations), and a two-layer MLP maps those
activations plus the raw angles to log-radiance.  Training is end-to-end
from (low-res LDR, sampled high-res ground truth) pairs at mixed scales.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import nn
from .raster import HdrImage, LdrImage
from .sphere import pixel_to_sphere

LOG_FLOOR = 1e-6  # zero-radiance ground truth clamps here before log
LOG_BOUND = 6.0   # smooth saturation of the log head: |log radiance| <= 6


class SrItmoError(ValueError):
    pass


@dataclass(frozen=True)
class PatchExtent:
    """Angular footprint of a patch inside a source panorama.

    `pano_hw` fixes the angular resolution, `origin` the footprint's top-left
    source pixel and `size` its extent in source pixels.  An image covering
    the footprint may be rasterized at any resolution (training inputs are
    downsampled crops); a standalone image acts as its own panorama.
    """

    pano_hw: tuple
    origin: tuple = (0, 0)
    size: tuple = None

    def __post_init__(self):
        if self.size is None:
            object.__setattr__(self, "size", tuple(self.pano_hw))

    def angles_at(self, image_hw, i, j, verbatim_axes=False):
        """Angles at fractional pixel coords of an image over this footprint."""
        ih, iw = image_hw
        oi, oj = self.origin
        sh, sw = self.size
        src_i = oi + (np.asarray(i, dtype=np.float64) + 0.5) * sh / ih - 0.5
        src_j = oj + (np.asarray(j, dtype=np.float64) + 0.5) * sw / iw - 0.5
        # footprints never cross the seam, so longitudes stay monotone
        return pixel_to_sphere(src_i, src_j, *self.pano_hw, verbatim_axes=verbatim_axes)

    def axis_anchors(self, image_hw, verbatim_axes=False):
        """Per-axis anchor angles (theta (w,), phi (h,)) at pixel centers."""
        ih, iw = image_hw
        theta, _ = self.angles_at(image_hw, np.zeros(iw), np.arange(iw), verbatim_axes)
        _, phi = self.angles_at(image_hw, np.arange(ih), np.zeros(ih), verbatim_axes)
        return theta, phi


@dataclass(frozen=True)
class LatentGrid:
    """Pixel-aligned latent codes with their spherical anchor angles."""

    codes: np.ndarray        # (h, w, c)
    theta: np.ndarray        # (w,) anchor longitudes, strictly increasing
    phi: np.ndarray          # (h,) anchor latitudes, strictly increasing

    def __post_init__(self):
        h, w = self.codes.shape[:2]
        if self.theta.shape != (w,) or self.phi.shape != (h,):
            raise SrItmoError("anchor axes must match the code grid")
        if np.any(np.diff(self.theta) <= 0) or np.any(np.diff(self.phi) <= 0):
            raise SrItmoError("anchors must be strictly monotone")

    @property
    def shape(self):
        return self.codes.shape[:2]


def _bound_log(raw):
    """Saturate the log-radiance head so exp cannot run away off-manifold."""
    return ad.mul(ad.tanh(ad.mul(raw, 1.0 / LOG_BOUND)), LOG_BOUND)


def interpolation_weights(latents, theta_q, phi_q):
    """Area weights and flat anchor indices for queries on the latent grid.

    Returns (idx00, idx01, idx10, idx11, w00, w01, w10, w11) where each idx
    array indexes the row-major flattened grid and the four weights are the
    normalized areas of the rectangles diagonal to each anchor (equal to
    bilinear weights on the rectangular anchor cell).  Queries outside the
    grid clamp to the border.
    """
    h, w = latents.shape
    # normalized local coordinates; anchors are uniformly spaced in angle
    x = (np.asarray(theta_q, dtype=np.float64) - latents.theta[0]) / (
        latents.theta[1] - latents.theta[0]
    )
    y = (np.asarray(phi_q, dtype=np.float64) - latents.phi[0]) / (
        latents.phi[1] - latents.phi[0]
    )
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
    fx = x - x0
    fy = y - y0
    # snap float residue so queries at anchors reproduce them exactly
    for f in (fx, fy):
        f[f < 1e-9] = 0.0
        f[f > 1.0 - 1e-9] = 1.0
    idx = y0 * w + x0
    return (
        (idx, idx + 1, idx + w, idx + w + 1),
        ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx),
    )


def interpolate(latents, theta_q, phi_q):
    """Latent vectors at continuous sphere positions (ndarray in/out)."""
    idxs, weights = interpolation_weights(latents, theta_q, phi_q)
    flat = latents.codes.reshape(-1, latents.codes.shape[-1])
    out = np.zeros((np.size(theta_q), flat.shape[1]), dtype=np.float64)
    for idx, wgt in zip(idxs, weights):
        out += wgt[:, None] * flat[idx]
    return out


def _interpolate_t(codes_flat, idxs, weights, dtype):
    """Differentiable interpolation: weighted gathers on the code Tensor."""
    parts = []
    for idx, wgt in zip(idxs, weights):
        gathered = ad.embedding_lookup(codes_flat, idx)
        parts.append(ad.mul(gathered, wgt[:, None].astype(dtype)))
    return ad.add(ad.add(parts[0], parts[1]), ad.add(parts[2], parts[3]))


@dataclass
class SrItmoConfig:
    code_dim: int = 64
    enc_width: int = 64
    hidden: int = 256
    patch_size: int = 32
    single_mlp: bool = False
    steps: int = 3000
    batch_pairs: int = 4
    samples_per_step: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    dtype: object = np.float32


class _ResBlock(nn.Module):
    def __init__(self, rng, width, dtype):
        self.c1 = nn.Conv2d(rng, width, width, 3, padding=1, dtype=dtype)
        self.c2 = nn.Conv2d(rng, width, width, 3, padding=1, dtype=dtype)

    def __call__(self, x):
        h = self.c2(ad.relu(self.c1(x)))
        return ad.add(x, h)


class _Encoder(nn.Module):
    """Pixel-aligned conv encoder: stem + three residual blocks + head."""

    def __init__(self, rng, cfg):
        self.stem = nn.Conv2d(rng, 3, cfg.enc_width, 3, padding=1, dtype=cfg.dtype)
        self.blocks = [_ResBlock(rng, cfg.enc_width, cfg.dtype) for _ in range(3)]
        self.head = nn.Conv2d(rng, cfg.enc_width, cfg.code_dim, 3, padding=1,
                              dtype=cfg.dtype)

    def __call__(self, x):
        h = ad.relu(self.stem(x))
        for block in self.blocks:
            h = block(h)
        return self.head(h)


class SrItmoModel(nn.Module):
    """Encoder plus the two query MLPs (or the single-MLP ablation)."""

    def __init__(self, cfg, rng=None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = _Encoder(rng, cfg)
        hid = cfg.hidden
        if cfg.single_mlp:
            self.joint = [
                nn.Linear(rng, cfg.code_dim + 2, hid, cfg.dtype),
                nn.Linear(rng, hid, hid, cfg.dtype),
                nn.Linear(rng, hid, hid, cfg.dtype),
                nn.Linear(rng, hid, hid, cfg.dtype),
                nn.Linear(rng, hid, 6, cfg.dtype),
            ]
        else:
            self.sr1 = nn.Linear(rng, cfg.code_dim, hid, cfg.dtype)
            self.sr2 = nn.Linear(rng, hid, hid, cfg.dtype)
            self.sr3 = nn.Linear(rng, hid, hid, cfg.dtype)
            self.sr4 = nn.Linear(rng, hid, 3, cfg.dtype)
            self.itmo1 = nn.Linear(rng, hid + 2, hid, cfg.dtype)
            self.itmo2 = nn.Linear(rng, hid, 3, cfg.dtype)
        self.trained = False

    def encode_latents(self, patch, extent):
        """LdrImage patch -> LatentGrid anchored at its pixel centers."""
        h, w = patch.height, patch.width
        if h < 2 or w < 2:
            raise SrItmoError(f"patch must be at least 2x2, got {h}x{w}")
        x = ad.Tensor(patch.pixels.transpose(2, 0, 1)[None].astype(self.cfg.dtype))
        codes = self.encoder(x).data[0].transpose(1, 2, 0)
        theta, phi = extent.axis_anchors((h, w))
        return LatentGrid(codes=codes, theta=theta, phi=phi)

    def _forward_queries(self, codes_flat, idxs, weights, theta_q, phi_q):
        """Shared query path on Tensors; returns (rgb_raw, log_hdr)."""
        dt = self.cfg.dtype
        z = _interpolate_t(codes_flat, idxs, weights, dt)
        ang = ad.Tensor(np.stack([theta_q, phi_q], axis=1).astype(dt))
        if self.cfg.single_mlp:
            h = ad.concat([z, ang], axis=1)
            for layer in self.joint[:-1]:
                h = ad.relu(layer(h))
            out = self.joint[-1](h)
            return out[:, :3], _bound_log(out[:, 3:])
        h1 = ad.relu(self.sr1(z))
        c_hr = ad.relu(self.sr2(h1))  # exposed second-layer activations
        h3 = ad.relu(self.sr3(c_hr))
        rgb = self.sr4(h3)
        it = ad.relu(self.itmo1(ad.concat([c_hr, ang], axis=1)))
        log_hdr = _bound_log(self.itmo2(it))
        return rgb, log_hdr

    def query(self, latents, theta_q, phi_q):
        """Query (theta, phi) arrays -> (ldr rgb in [0,1], linear hdr rgb)."""
        theta_q = np.atleast_1d(np.asarray(theta_q, dtype=np.float64))
        phi_q = np.atleast_1d(np.asarray(phi_q, dtype=np.float64))
        idxs, weights = interpolation_weights(latents, theta_q, phi_q)
        flat = ad.Tensor(
            latents.codes.reshape(-1, latents.codes.shape[-1]).astype(self.cfg.dtype)
        )
        rgb, log_hdr = self._forward_queries(flat, idxs, weights, theta_q, phi_q)
        return (
            np.clip(rgb.data.astype(np.float64), 0.0, 1.0),
            np.exp(log_hdr.data.astype(np.float64)),
        )

    def query_sr(self, latents, theta_q, phi_q):
        """LDR colors plus the hidden features consumed by the range branch."""
        theta_q = np.atleast_1d(np.asarray(theta_q, dtype=np.float64))
        phi_q = np.atleast_1d(np.asarray(phi_q, dtype=np.float64))
        if self.cfg.single_mlp:
            raise SrItmoError("query_sr is undefined for the single-MLP ablation")
        idxs, weights = interpolation_weights(latents, theta_q, phi_q)
        flat = ad.Tensor(
            latents.codes.reshape(-1, latents.codes.shape[-1]).astype(self.cfg.dtype)
        )
        z = _interpolate_t(flat, idxs, weights, self.cfg.dtype)
        h1 = ad.relu(self.sr1(z))
        c_hr = ad.relu(self.sr2(h1))
        rgb = self.sr4(ad.relu(self.sr3(c_hr)))
        return np.clip(rgb.data.astype(np.float64), 0.0, 1.0), c_hr.data.copy()

    def query_hdr(self, c_hr, theta_q, phi_q):
        """Linear radiance from hidden features and raw angles (exp of log)."""
        if self.cfg.single_mlp:
            raise SrItmoError("query_hdr is undefined for the single-MLP ablation")
        dt = self.cfg.dtype
        ang = np.stack(
            [np.atleast_1d(theta_q), np.atleast_1d(phi_q)], axis=1
        ).astype(dt)
        h = ad.relu(self.itmo1(ad.concat([ad.Tensor(np.asarray(c_hr, dtype=dt)),
                                          ad.Tensor(ang)], axis=1)))
        return np.exp(_bound_log(self.itmo2(h)).data.astype(np.float64))

    def upscale(self, ldr, factor, extent, verbatim_axes=False):
        """Resample an LDR patch at `factor` times its resolution.

        Queries a uniformly denser lattice over the same angular footprint;
        non-integer and beyond-training factors are fine.  Returns
        (LdrImage, HdrImage).

        The scale-invariant range objective leaves the output's global scale
        unconstrained, so the radiance raster is re-anchored with the same
        luminance calibration the training pairs were built with, against the
        model's own LDR prediction (input-only information).
        """
        if factor < 1.0:
            raise SrItmoError(f"upscale factor must be >= 1, got {factor}")
        h, w = ldr.height, ldr.width
        out_h, out_w = int(round(h * factor)), int(round(w * factor))
        latents = self.encode_latents(ldr, extent)
        gi, gj = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
        theta_q, phi_q = extent.angles_at(
            (out_h, out_w), gi.ravel(), gj.ravel(), verbatim_axes
        )
        rgb, hdr = self.query(latents, theta_q, phi_q)
        ldr_out = LdrImage(rgb.reshape(out_h, out_w, 3))
        hdr_out = HdrImage(hdr.reshape(out_h, out_w, 3))
        from .raster import CalibrationError, calibrate

        try:
            hdr_out = calibrate(hdr_out, ldr_out)
        except CalibrationError:  # all-bright frame: keep the raw scale
            pass
        return ldr_out, hdr_out


# ---------------------------------------------------------------------------
# losses


def loss_sr(pred_ldr, gt_ldr):
    """Mean over samples of the channel-summed L1 error (Tensor-friendly)."""
    pred = pred_ldr if isinstance(pred_ldr, ad.Tensor) else ad.Tensor(pred_ldr)
    if pred.data.size == 0:
        raise SrItmoError("loss_sr needs at least one sample")
    gt = np.asarray(gt_ldr, dtype=pred.data.dtype)
    return ad.tensor_mean(ad.tensor_sum(ad.absolute(ad.sub(pred, gt)), axis=-1))


def _log_ratio_variance(d):
    return ad.tensor_var(ad.reshape(d, (-1,)))


def loss_itmo(pred_hdr, gt_hdr):
    """Variance of the log ratio between prediction and ground truth.

    Scale-invariant by construction: any positive global rescale of the
    prediction leaves the loss unchanged.  Inputs must be positive linear
    radiance; ground-truth zeros should be clamped upstream.
    """
    pred = pred_hdr if isinstance(pred_hdr, ad.Tensor) else ad.Tensor(pred_hdr)
    if pred.data.size < 2:
        raise SrItmoError("loss_itmo needs at least two values")
    gt = np.asarray(gt_hdr, dtype=np.float64)
    if np.any(pred.data <= 0.0) or np.any(gt <= 0.0):
        raise SrItmoError("loss_itmo requires positive radiance values")
    d = ad.sub(ad.log(pred), np.log(gt).astype(pred.data.dtype))
    return _log_ratio_variance(d)


def loss_itmo_from_log(pred_log, gt_hdr):
    """Training-path variant: prediction already in log space."""
    gt = np.maximum(np.asarray(gt_hdr, dtype=np.float64), LOG_FLOOR)
    d = ad.sub(pred_log, np.log(gt).astype(pred_log.data.dtype))
    return _log_ratio_variance(d)


# ---------------------------------------------------------------------------
# training


def train_sritmo(pairs, cfg, log=None):
    """Jointly fit encoder and query MLPs on ScenePair-style records.

    Each pair must expose ldr_lr (LdrImage), extent (PatchExtent), and the
    per-sample arrays theta/phi/hdr/ldr_hr.  Deterministic per cfg.seed.
    """
    if not pairs:
        raise SrItmoError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    model = SrItmoModel(cfg, rng)
    opt = ad.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = model.parameters()
    for step in range(cfg.steps):
        pick = rng.choice(len(pairs), size=min(cfg.batch_pairs, len(pairs)),
                          replace=False)
        batch = [pairs[int(i)] for i in pick]
        stack = np.stack(
            [p.ldr_lr.pixels.transpose(2, 0, 1) for p in batch]
        ).astype(cfg.dtype)
        codes = model.encoder(ad.Tensor(stack))  # (B, c, h, w)
        b, c, h, w = codes.shape
        codes_flat = ad.reshape(ad.transpose(codes, (0, 2, 3, 1)), (b * h * w, c))

        idx_parts, wgt_parts, th_parts, ph_parts = [], [], [], []
        gt_hdr, gt_ldr = [], []
        for bi, pair in enumerate(batch):
            n = pair.theta.shape[0]
            take = min(cfg.samples_per_step, n)
            sel = rng.choice(n, size=take, replace=False)
            a_theta, a_phi = pair.extent.axis_anchors((h, w))
            lat = LatentGrid(codes=np.zeros((h, w, 1)), theta=a_theta, phi=a_phi)
            idxs, weights = interpolation_weights(lat, pair.theta[sel], pair.phi[sel])
            idx_parts.append(np.stack(idxs) + bi * h * w)
            wgt_parts.append(np.stack(weights))
            th_parts.append(pair.theta[sel])
            ph_parts.append(pair.phi[sel])
            gt_hdr.append(pair.hdr[sel])
            gt_ldr.append(pair.ldr_hr[sel])
        idxs = tuple(np.concatenate([p[k] for p in idx_parts]) for k in range(4))
        weights = tuple(np.concatenate([p[k] for p in wgt_parts]) for k in range(4))
        theta_q = np.concatenate(th_parts)
        phi_q = np.concatenate(ph_parts)
        rgb, log_hdr = model._forward_queries(codes_flat, idxs, weights, theta_q, phi_q)

        l_sr = loss_sr(rgb, np.concatenate(gt_ldr))
        l_itmo = loss_itmo_from_log(log_hdr, np.concatenate(gt_hdr))
        loss = ad.add(l_sr, l_itmo)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        if log is not None and (step % 100 == 0 or step == cfg.steps - 1):
            log.append((step, float(loss.item()), float(l_sr.item()),
                        float(l_itmo.item())))
    model.trained = True
    return model
