"""Data-consistency projection, self-supervised training loop, and sampler.

Training never lets the model see the loss-mask columns: the model input
path is built from the train-mask data only, while the measured loss-mask
columns enter through the loss target. Inference runs the reverse grid from
a partially noised zero-filled image, applying data consistency with the
full acquired mask at every step.
"""

import time
from dataclasses import asdict, dataclass

import numpy as np

from .diffusion import (loss_weight, make_schedule, posterior_params_strided,
                        sample_forward_jump, sample_yt)
from .kspace import EncodingOperator, fft2c, ifft2c, zero_filled
from .losses import LossReport, disc_loss, gen_loss, recon_loss_masked, total_loss
from .masks import SamplingMask, apply_mask, partition_mask
from .metrics import nmse, psnr, ssim
from .nets import Denoiser, DenoiserSpec, Discriminator, DiscriminatorSpec, adam_step
from .stats import MetricReport


def complex_to_channels(x):
    """(..., H, W) complex -> (..., H, W, 2) float channels."""
    x = np.asarray(x)
    return np.stack([x.real, x.imag], axis=-1)


def channels_to_complex(c):
    c = np.asarray(c)
    return c[..., 0] + 1j * c[..., 1]


@dataclass
class TrainConfig:
    """Knobs of the self-supervised training and inference runs."""

    R: float = 4.0
    rho: float = 0.5
    lr: float = 2e-4
    batch_size: int = 4
    epochs: int = 25
    T: int = 100
    stride_k: int = 25
    adv_weight: float = 0.1
    init_noise_var: float = 0.1
    center_fraction: float = 0.04
    seed: int = 0
    beta_1: float = 1e-4
    beta_T: float = 0.02
    hidden: int = 24
    disc_width: int = 10
    dtype: str = "float32"
    t_start: int = 0                 # 0 means T // 4
    max_steps: int = 0               # 0 means no cap
    rho_convention: str = "fraction_of_acquired"
    dc_mode: str = "measured_outside"
    checkpoint_every: int = 500

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        for name in ("R", "lr", "batch_size", "epochs", "T", "stride_k",
                     "init_noise_var", "center_fraction"):
            if getattr(self, name) <= 0 and name != "init_noise_var":
                raise ValueError(f"{name} must be positive")
        if self.stride_k < 2 or 2 * self.stride_k > self.T:
            raise ValueError("stride_k must satisfy 2 <= k and 2k <= T")
        if self.T % self.stride_k != 0:
            raise ValueError("stride_k must divide T so the step grid is regular")

    @property
    def train_grid(self):
        """Steps t with t + k still inside the schedule."""
        return list(range(self.stride_k, self.T - self.stride_k + 1, self.stride_k))

    @property
    def inference_start(self):
        return self.t_start if self.t_start else max(2, self.T // 4)

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self):
        return asdict(self)


@dataclass
class SliceData:
    """One acquired slice: masked k-space plus its sampling mask."""

    slice_id: int
    kspace: np.ndarray        # (coils, rows, cols), zero at unsampled columns
    acquired: SamplingMask


@dataclass
class ReconResult:
    image: np.ndarray
    model_calls: int
    wall_time: float
    config: dict
    final_kspace: np.ndarray = None


def build_models(cfg, n_cond_channels=2):
    den_spec = DenoiserSpec(
        channels=(2 + 1 + n_cond_channels,) + (cfg.hidden,) * 4 + (2,))
    disc_spec = DiscriminatorSpec(width=cfg.disc_width)
    dtype = cfg.np_dtype()
    return (Denoiser(den_spec, seed=cfg.seed, dtype=dtype),
            Discriminator(disc_spec, seed=cfg.seed + 1, dtype=dtype))


def dc_project_kspace(pred_img, measured_ks, sens, mask, mode="measured_outside"):
    """Per-coil k-space of the prediction with measured columns swapped in.

    ``"measured_outside"`` keeps the measured values at acquired columns and
    the prediction elsewhere; ``"literal"`` is the inverted assignment
    (prediction at acquired columns) retained for comparison.
    """
    coils = sens.shape[0]
    out = np.empty((coils,) + pred_img.shape, dtype=np.complex128)
    keep_pred = ~mask.sampled if mode == "measured_outside" else mask.sampled
    for c in range(coils):
        pk = fft2c(sens[c] * pred_img)
        out[c] = np.where(keep_pred, pk, measured_ks[c])
    return out


def dc_project(pred_img, measured_ks, sens, mask, mode="measured_outside"):
    """Data-consistency projection returned as a coil-combined image."""
    pred_img = np.asarray(pred_img)
    measured_ks = np.asarray(measured_ks)
    if measured_ks.shape != (sens.shape[0],) + pred_img.shape:
        raise ValueError("measured k-space shape does not match sens/prediction")
    ks = dc_project_kspace(pred_img, measured_ks, sens, mask, mode)
    out = np.zeros(pred_img.shape, dtype=np.complex128)
    for c in range(sens.shape[0]):
        out += np.conj(sens[c]) * ifft2c(ks[c])
    return out


def dc_backward(grad_img, sens, mask, mode="measured_outside"):
    """Adjoint of the linear part of the DC projection.

    The projection is affine in the prediction with a self-adjoint linear
    part (complement-mask normal operator), so the backward pass applies the
    same operator to the upstream gradient.
    """
    keep_pred = ~mask.sampled if mode == "measured_outside" else mask.sampled
    out = np.zeros(grad_img.shape, dtype=np.complex128)
    for c in range(sens.shape[0]):
        pk = fft2c(sens[c] * grad_img)
        out += np.conj(sens[c]) * ifft2c(np.where(keep_pred, pk, 0.0))
    return out


def _loss_noise_pair(y_t, y0_in, y0_pred, eps, measured_ks, sens, t, sched):
    """Coil-stacked noise tensors whose loss-mask k-space difference is the
    measured-data residual of the prediction.

    The true-noise target is built so that at the loss columns it encodes
    the acquired measurement rather than the (zero there) train-mask input;
    everywhere else it matches the prediction-side tensor exactly.
    """
    ab = sched.alpha_bar[t]
    coef = np.sqrt(ab) / np.sqrt(1.0 - ab)
    coils = sens.shape[0]
    shape = (coils,) + y_t.shape
    eps_pred = np.empty(shape, np.complex128)
    eps_true = np.empty(shape, np.complex128)
    pred_part = (y_t - np.sqrt(ab) * y0_pred) / np.sqrt(1.0 - ab)
    for c in range(coils):
        eps_pred[c] = sens[c] * pred_part
        eps_true[c] = sens[c] * (eps + coef * y0_in) - coef * ifft2c(measured_ks[c])
    return eps_true, eps_pred


def _recon_grad_wrt_pred(y0_pred, measured_ks, sens, loss_mask, t, sched, n_kept):
    """Gradient of the restricted noise loss w.r.t. the predicted image."""
    ab = sched.alpha_bar[t]
    coef_sq = ab / (1.0 - ab)
    w = loss_weight(t, sched)
    cols = loss_mask.sampled
    g = np.zeros(y0_pred.shape, np.complex128)
    for c in range(sens.shape[0]):
        resid = np.where(cols, fft2c(sens[c] * y0_pred) - measured_ks[c], 0.0)
        g += np.conj(sens[c]) * ifft2c(resid)
    return (2.0 * w * coef_sq / n_kept) * g


class Trainer:
    """Owns both model states and advances them one batch at a time."""

    def __init__(self, denoiser, disc, sens, cfg):
        self.denoiser = denoiser
        self.disc = disc
        self.sens = np.asarray(sens, dtype=np.complex128)
        self.cfg = cfg
        self.sched = make_schedule(cfg.T, cfg.beta_1, cfg.beta_T)
        self.global_step = 0

    def _rng(self, *tags):
        return np.random.default_rng([self.cfg.seed & 0x7FFFFFFF, *tags])

    def train_step(self, batch):
        """One discriminator + generator update over a batch of slices."""
        cfg, sched, sens = self.cfg, self.sched, self.sens
        grid = cfg.train_grid
        step = self.global_step
        B = len(batch)
        k = cfg.stride_k

        parts, t_list = [], []
        y0_in_l, cond_l, y_t_l, y_tk_l, eps_l = [], [], [], [], []
        for item in batch:
            rng = self._rng(1, item.slice_id, step)
            part = partition_mask(item.acquired, cfg.rho,
                                  seed=int(rng.integers(2**31)),
                                  convention=cfg.rho_convention)
            ks_train = apply_mask(item.kspace, part.train)
            op = EncodingOperator(sens, part.train, sens.shape[1], sens.shape[2])
            y0_in = zero_filled(ks_train, op)
            t = int(grid[rng.integers(len(grid))])
            shape = y0_in.shape
            eps = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            y_t = sample_yt(y0_in, t, eps, sched)
            eps2 = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            y_tk = sample_forward_jump(y_t, t, t + k, eps2, sched)
            parts.append(part)
            t_list.append(t)
            y0_in_l.append(y0_in)
            cond_l.append(y0_in)
            y_t_l.append(y_t)
            y_tk_l.append(y_tk)
            eps_l.append(eps)

        y_t_ch = complex_to_channels(np.stack(y_t_l))
        y_tk_ch = complex_to_channels(np.stack(y_tk_l))
        cond_ch = complex_to_channels(np.stack(cond_l))
        t_frac = np.array([t / cfg.T for t in t_list])

        # generator predicts the clean image from y_t, consistency on the
        # train mask; the later step y_{t+k} anchors the fake-sample posterior
        # and conditions the discriminator
        pred_raw = self.denoiser.forward(y_t_ch, t_frac, cond_ch,
                                         train=True, keep_cache=True)
        if not np.all(np.isfinite(pred_raw)):
            raise FloatingPointError(
                f"non-finite generator output at step {step} "
                f"(slices {[b.slice_id for b in batch]})")
        pred_c = channels_to_complex(np.asarray(pred_raw, np.float64))
        y0_pred, y_hat_t, c_pred = [], [], []
        for i, item in enumerate(batch):
            y0p = dc_project(pred_c[i], apply_mask(item.kspace, parts[i].train),
                             sens, parts[i].train, cfg.dc_mode)
            t = t_list[i]
            mu, var = posterior_params_strided(y_tk_l[i], y0p, t + k, t, sched)
            rng = self._rng(2, item.slice_id, step)
            z = rng.standard_normal(y0p.shape) + 1j * rng.standard_normal(y0p.shape)
            y0_pred.append(y0p)
            y_hat_t.append(mu + np.sqrt(var) * z)
            ab_tk, ab_t = sched.alpha_bar[t + k], sched.alpha_bar[t]
            a_eff = ab_tk / ab_t
            c_pred.append(np.sqrt(ab_t) * (1.0 - a_eff) / (1.0 - ab_tk))
        y_hat_ch = complex_to_channels(np.stack(y_hat_t))

        # discriminator phase: real pair, fake pair, input-gradient penalty
        d_real = self.disc.forward(y_t_ch, y_tk_ch, train=True, keep_cache=True)
        self.disc.backward(-1.0 / (B * np.clip(d_real, 1e-12, None)))
        d_fake = self.disc.forward(y_hat_ch, y_tk_ch, train=True, keep_cache=True)
        self.disc.backward(1.0 / (B * np.clip(1.0 - d_fake, 1e-12, None)))
        gi = self.disc.input_grad(y_hat_ch, y_tk_ch, train=True)
        pen = np.sum(np.asarray(gi, np.float64) ** 2, axis=(1, 2, 3))
        self.disc.penalty_param_grads(y_hat_ch, y_tk_ch, gi, scale=1.0 / B,
                                      train=True)
        l_d = disc_loss(d_real, d_fake, pen)
        adam_step(self.disc.state, cfg.lr)

        # generator phase against the updated, frozen discriminator
        d_fake2 = self.disc.forward(y_hat_ch, y_tk_ch, train=False, keep_cache=True)
        l_g = gen_loss(d_fake2)
        g_adv_ch = self.disc.backward(
            -cfg.adv_weight / (B * np.clip(d_fake2, 1e-12, None)),
            accumulate=False)[..., :2]
        g_adv = channels_to_complex(np.asarray(g_adv_ch, np.float64))

        l_recon = 0.0
        upstream = np.empty_like(pred_c)
        for i, item in enumerate(batch):
            t = t_list[i]
            ks_loss = apply_mask(item.kspace, parts[i].loss)
            eps_true, eps_pred = _loss_noise_pair(
                y_t_l[i], y0_in_l[i], y0_pred[i], eps_l[i], ks_loss, sens, t, sched)
            l_recon += recon_loss_masked(eps_true, eps_pred, parts[i].loss,
                                          t, sched) / B
            n_kept = sens.shape[0] * sens.shape[1] * len(parts[i].loss.indices())
            g_rec = _recon_grad_wrt_pred(y0_pred[i], ks_loss, sens,
                                         parts[i].loss, t, sched, n_kept) / B
            g_y0 = g_rec + c_pred[i] * g_adv[i]
            upstream[i] = dc_backward(g_y0, sens, parts[i].train, cfg.dc_mode)
        self.denoiser.backward(complex_to_channels(upstream))
        adam_step(self.denoiser.state, cfg.lr)

        l_final = total_loss(l_recon, l_d, l_g, cfg.adv_weight)
        if not np.isfinite(l_final):
            raise FloatingPointError(
                f"non-finite loss at step {step}: recon={l_recon} d={l_d} g={l_g}")
        report = LossReport(l_recon=float(l_recon), l_disc=float(l_d),
                            l_gen=float(l_g), l_final=float(l_final),
                            t=t_list[0], slice_id=batch[0].slice_id, step=step)
        self.global_step += 1
        return report

    def fit(self, slices, log=None):
        """Epoch loop with a seeded slice order; stops at max_steps if set.

        A non-zero global_step (resumed run) fast-forwards to its epoch and
        batch position so the continued schedule matches an uninterrupted
        run exactly.
        """
        cfg = self.cfg
        reports = []
        n = len(slices)
        steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
        start_epoch = self.global_step // steps_per_epoch
        for epoch in range(start_epoch, cfg.epochs):
            order = self._rng(3, epoch).permutation(n)
            skip = self.global_step - epoch * steps_per_epoch
            for bi, lo in enumerate(range(0, n, cfg.batch_size)):
                if bi < skip:
                    continue
                batch = [slices[i] for i in order[lo:lo + cfg.batch_size]]
                rep = self.train_step(batch)
                reports.append(rep)
                if log is not None:
                    log(rep)
                if cfg.max_steps and self.global_step >= cfg.max_steps:
                    return reports
        return reports


def reconstruct(measured_ks, acquired, sens, model, sched, cfg, seed=0,
                allow_untrained=False):
    """Reverse-grid sampler from a partially noised zero-filled start.

    Each grid step predicts the clean image, projects it onto the measured
    data with the full acquired mask, and draws the next iterate from the
    strided posterior (mean only on the final step). A closing projection
    pins the acquired columns exactly.
    """
    state = getattr(model, "state", None)
    if state is not None and state.step == 0 and not allow_untrained:
        raise RuntimeError("model has no training steps; pass allow_untrained=True "
                           "to sample from an untrained model")
    t0 = time.perf_counter()
    sens = np.asarray(sens, dtype=np.complex128)
    op = EncodingOperator(sens, acquired, sens.shape[1], sens.shape[2])
    zf = zero_filled(measured_ks, op)
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 4])
    std = np.sqrt(cfg.init_noise_var)
    y = zf + std * (rng.standard_normal(zf.shape) + 1j * rng.standard_normal(zf.shape))
    cond_ch = complex_to_channels(zf[None])

    ts = list(range(cfg.inference_start, 1, -cfg.stride_k))
    calls = 0
    for t in ts:
        pred_ch = model.forward(complex_to_channels(y[None]), np.array([t / cfg.T]),
                                cond_ch, train=False)
        calls += 1
        pred = channels_to_complex(np.asarray(pred_ch, np.float64))[0]
        y0_hat = dc_project(pred, measured_ks, sens, acquired, cfg.dc_mode)
        s = t - cfg.stride_k if t - cfg.stride_k >= 2 else 0
        if s == 0:
            y = y0_hat
            break
        mu, var = posterior_params_strided(y, y0_hat, t, s, sched)
        z = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        y = mu + np.sqrt(var) * z
        if not np.all(np.isfinite(y.real)):
            raise FloatingPointError(f"non-finite sampler state at step {t}")

    final_ks = dc_project_kspace(y, measured_ks, sens, acquired, cfg.dc_mode)
    image = np.zeros(y.shape, dtype=np.complex128)
    for c in range(sens.shape[0]):
        image += np.conj(sens[c]) * ifft2c(final_ks[c])
    return ReconResult(image=image, model_calls=calls,
                       wall_time=time.perf_counter() - t0,
                       config=cfg.to_dict(), final_kspace=final_ks)


def evaluate_run(recons, truths, method="recon", n_boot=10000, seed=0):
    """Per-slice metrics plus bootstrap aggregates for paired image lists."""
    if len(recons) != len(truths):
        raise ValueError(f"got {len(recons)} recons for {len(truths)} truths")
    nm, ps, ss = [], [], []
    for r, t in zip(recons, truths):
        nm.append(nmse(t, r))
        ps.append(psnr(t, r))
        ss.append(ssim(t, r))
    report = MetricReport(method=method, nmse=np.array(nm), psnr=np.array(ps),
                          ssim=np.array(ss))
    return report.finalize(n_boot=n_boot, seed=seed)
