"""Generative core: noise schedule, conditional denoiser, sampler, trainers.

The denoiser is an MLP over [noisy latent, sinusoidal time embedding,
conditioning vector]. Forward noising follows the closed form
z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; sampling runs the ancestral
reverse update with sigma_t^2 = beta_t and no noise on the final step.
Classifier-free guidance is available at sampling time (scale 1 disables it)
and is trained for by dropping the caption of a fraction of base-training
examples.

Latents are standardized per dimension after autoencoder training so the
forward process operates on roughly unit-scale data; the normalization
constants travel with the checkpoint as frozen tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nncore, textenc
from .bundle import ModelBundle, ModelDims
from .config import ExperimentConfig
from .errors import NonFiniteError, TrainingError
from .nncore import AdamState, ParamSet, Tensor, adam_step
from .rng import stream
from .tokenizer import build_default_vocabulary

SAMPLE_BATCH = 64  # fixed so batching never depends on thread count


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with cached alpha products; t runs 1..steps."""

    steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t) -> np.ndarray:
        return self.betas[np.asarray(t) - 1]

    def alpha(self, t) -> np.ndarray:
        return self.alphas[np.asarray(t) - 1]

    def alpha_bar(self, t) -> np.ndarray:
        """abar_t, with the t=0 convention abar_0 = 1."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]


def build_schedule(steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if steps < 2:
        raise ValueError("schedule needs at least 2 steps")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"betas must satisfy 0 < start <= end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(steps=steps, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Noisy latent at step t. t may be an int or a per-row array; t=0 is z0."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > schedule.steps):
        raise ValueError(f"t out of range [0, {schedule.steps}]")
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    abar = schedule.alpha_bar(t_arr)
    if z0.ndim == 2 and abar.ndim == 1:
        abar = abar[:, None]
    out = np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps
    return out.astype(z0.dtype, copy=False)


def time_embedding(t, width: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps; one row per element of t."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return emb.astype(np.float32)


# ---------------------------------------------------------------------------
# Denoiser


def init_denoiser(params: ParamSet, dims: ModelDims, seed: int) -> None:
    rng = stream(seed, "init-denoiser")
    d_in = dims.latent_width + dims.time_embed_width + dims.cond_width
    hidden = dims.denoiser_hidden
    shapes = [(d_in, hidden), (hidden, hidden), (hidden, dims.latent_width)]
    for i, (fan_in, fan_out) in enumerate(shapes, start=1):
        scale = 1.0 / np.sqrt(fan_in)
        params.add(
            f"denoiser.l{i}.weight",
            (rng.normal(0, scale, (fan_in, fan_out))).astype(np.float32),
        )
        params.add(f"denoiser.l{i}.bias", np.zeros(fan_out, dtype=np.float32))


def predict_noise_graph(p: dict[str, Tensor], z_t: Tensor, temb: Tensor, cond: Tensor) -> Tensor:
    x = nncore.concat_cols([z_t, temb, cond])
    h = nncore.silu(nncore.affine(x, p["denoiser.l1.weight"], p["denoiser.l1.bias"]))
    h = nncore.silu(nncore.affine(h, p["denoiser.l2.weight"], p["denoiser.l2.bias"]))
    return nncore.affine(h, p["denoiser.l3.weight"], p["denoiser.l3.bias"])


def _const_leaves(params: ParamSet) -> dict[str, Tensor]:
    return {name: Tensor(params.value(name)) for name in params.names()}


def predict_noise(bundle: ModelBundle, z_t: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
    """Inference-only noise prediction for a batch of latents."""
    temb = time_embedding(np.broadcast_to(np.asarray(t), (z_t.shape[0],)), bundle.dims.time_embed_width)
    if cond.ndim == 1:
        cond = np.broadcast_to(cond, (z_t.shape[0], cond.shape[0]))
    leaves = _const_leaves(bundle.params)
    out = predict_noise_graph(
        leaves, Tensor(z_t.astype(np.float32)), Tensor(temb), Tensor(cond.astype(np.float32))
    )
    return out.data


# ---------------------------------------------------------------------------
# Training objective

NoisePredictor = Callable[[dict[str, Tensor], Tensor, Tensor, Tensor, np.ndarray], Tensor]


def diffusion_loss(
    bundle: ModelBundle,
    z0: np.ndarray,
    cond: np.ndarray,
    seed: int,
    noise_predictor: NoisePredictor | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Denoising score-matching objective on one batch.

    Draws t uniformly from {1..steps} and unit-normal noise, forms z_t, and
    returns the per-example squared error summed over latent dimensions and
    averaged over the batch, with gradients for the trainable parameters.
    ``noise_predictor`` is a test seam replacing the real denoiser.
    """
    rng = stream(seed, "diffusion-loss")
    batch, width = z0.shape
    ts = rng.integers(1, bundle.schedule.steps + 1, size=batch)
    eps = rng.standard_normal((batch, width)).astype(np.float32)
    z_t = q_sample(z0.astype(np.float32), ts, eps, bundle.schedule)
    temb = time_embedding(ts, bundle.dims.time_embed_width)
    if cond.ndim == 1:
        cond = np.broadcast_to(cond, (batch, cond.shape[0]))

    def graph(p, _inputs):
        if noise_predictor is not None:
            eps_hat = noise_predictor(p, Tensor(z_t), Tensor(temb), Tensor(cond), eps)
        else:
            eps_hat = predict_noise_graph(p, Tensor(z_t), Tensor(temb), Tensor(cond))
        err = nncore.sub(eps_hat, Tensor(eps))
        return nncore.scale(nncore.sum_all(nncore.square(err)), 1.0 / batch)

    outs, grads = nncore.eval_with_grads(graph, bundle.params)
    return float(outs[0]), grads


# ---------------------------------------------------------------------------
# Autoencoder


def encode_images(bundle: ModelBundle, images: np.ndarray) -> np.ndarray:
    """Images (N, *image_shape) -> standardized latents (N, latent_width)."""
    flat = images.reshape(images.shape[0], -1).astype(np.float32)
    if bundle.meta["autoencoder_mode"] == "identity":
        return flat
    p = bundle.params
    z = flat @ p.value("autoenc.enc.weight") + p.value("autoenc.enc.bias")
    return (z - p.value("autoenc.latent_mean")) / p.value("autoenc.latent_std")


def decode_latents(bundle: ModelBundle, z: np.ndarray) -> np.ndarray:
    """Standardized latents -> images (N, *image_shape), clamped if pixel data."""
    if bundle.meta["autoencoder_mode"] == "identity":
        out = z
    else:
        p = bundle.params
        raw = z * p.value("autoenc.latent_std") + p.value("autoenc.latent_mean")
        out = raw @ p.value("autoenc.dec.weight") + p.value("autoenc.dec.bias")
    out = out.reshape(z.shape[0], *bundle.dims.image_shape)
    if bundle.meta.get("clamp", True):
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


def train_autoencoder(
    params: ParamSet, images: np.ndarray, dims: ModelDims, cfg: ExperimentConfig
) -> float:
    """Fit the linear encoder/decoder pair; returns mean abs reconstruction error.

    Also computes per-dimension latent mean/std over the corpus and stores
    them as frozen tensors. Raises TrainingError if the configured error
    threshold is not reached.
    """
    ae = cfg.autoencoder
    if ae.mode == "identity":
        return 0.0
    rng = stream(cfg.seed, "init-autoenc")
    flat = images.reshape(images.shape[0], -1).astype(np.float32)
    pix = flat.shape[1]
    latent = dims.latent_width
    ae_params = ParamSet()
    ae_params.add("enc.weight", (rng.normal(0, 1, (pix, latent)) / np.sqrt(pix)).astype(np.float32))
    ae_params.add("enc.bias", np.zeros(latent, dtype=np.float32))
    ae_params.add("dec.weight", (rng.normal(0, 1, (latent, pix)) / np.sqrt(latent)).astype(np.float32))
    ae_params.add("dec.bias", np.zeros(pix, dtype=np.float32))
    state = AdamState(ae_params, lr=ae.lr)

    def graph_for(batch: np.ndarray):
        def graph(p, _):
            z = nncore.affine(Tensor(batch), p["enc.weight"], p["enc.bias"])
            recon = nncore.affine(z, p["dec.weight"], p["dec.bias"])
            err = nncore.sub(recon, Tensor(batch))
            return nncore.mean_all(nncore.square(err))

        return graph

    n = flat.shape[0]
    for step in range(ae.steps):
        idx = stream(cfg.seed, "autoenc-step", step).integers(0, n, size=ae.batch)
        _, grads = nncore.eval_with_grads(graph_for(flat[idx]), ae_params)
        adam_step(ae_params, grads, state)

    recon = (flat @ ae_params.value("enc.weight") + ae_params.value("enc.bias")) @ ae_params.value(
        "dec.weight"
    ) + ae_params.value("dec.bias")
    error = float(np.abs(recon - flat).mean())
    if error > ae.max_recon_error:
        raise TrainingError(
            f"autoencoder reconstruction error {error:.4f} exceeds {ae.max_recon_error}"
        )
    z_all = flat @ ae_params.value("enc.weight") + ae_params.value("enc.bias")
    mean = z_all.mean(axis=0)
    std = np.maximum(z_all.std(axis=0), 1e-3)
    params.add("autoenc.enc.weight", ae_params.value("enc.weight"), trainable=False)
    params.add("autoenc.enc.bias", ae_params.value("enc.bias"), trainable=False)
    params.add("autoenc.dec.weight", ae_params.value("dec.weight"), trainable=False)
    params.add("autoenc.dec.bias", ae_params.value("dec.bias"), trainable=False)
    params.add("autoenc.latent_mean", mean.astype(np.float32), trainable=False)
    params.add("autoenc.latent_std", std.astype(np.float32), trainable=False)
    return error


# ---------------------------------------------------------------------------
# Sampling


def sample(
    bundle: ModelBundle,
    prompt: str,
    n: int,
    seed: int,
    guidance: float | None = None,
) -> np.ndarray:
    """Generate n images for a prompt via the ancestral reverse process.

    Every image index derives its own noise stream from (seed, index), and
    images are processed in fixed-size batches, so the result is identical
    however the work is scheduled. Returns (n, *image_shape).
    """
    dims = bundle.dims
    if n == 0:
        return np.zeros((0, *dims.image_shape), dtype=np.float32)
    w = bundle.meta.get("guidance_scale", 1.0) if guidance is None else guidance
    cond = textenc.encode_prompt(bundle, prompt)
    uncond = textenc.null_conditioning(bundle) if w != 1.0 else None
    schedule = bundle.schedule
    latent = dims.latent_width
    leaves = _const_leaves(bundle.params)

    out = np.empty((n, *dims.image_shape), dtype=np.float32)
    for lo in range(0, n, SAMPLE_BATCH):
        hi = min(lo + SAMPLE_BATCH, n)
        batch = hi - lo
        z = np.empty((batch, latent), dtype=np.float32)
        step_noise = np.empty((schedule.steps, batch, latent), dtype=np.float32)
        for i in range(batch):
            g = stream(seed, "sample", lo + i)
            z[i] = g.standard_normal(latent)
            step_noise[:, i, :] = g.standard_normal((schedule.steps, latent))
        cond_b = Tensor(np.broadcast_to(cond, (batch, cond.shape[0])).astype(np.float32))
        uncond_b = (
            Tensor(np.broadcast_to(uncond, (batch, uncond.shape[0])).astype(np.float32))
            if uncond is not None
            else None
        )
        for t in range(schedule.steps, 0, -1):
            temb = Tensor(np.repeat(time_embedding(t, dims.time_embed_width), batch, axis=0))
            z_t = Tensor(z)
            eps_hat = predict_noise_graph(leaves, z_t, temb, cond_b).data
            if uncond_b is not None:
                eps_unc = predict_noise_graph(leaves, z_t, temb, uncond_b).data
                eps_hat = eps_unc + w * (eps_hat - eps_unc)
            beta = schedule.beta(t)
            alpha = schedule.alpha(t)
            abar = schedule.alpha_bar(t)
            z = (z - (beta / np.sqrt(1.0 - abar)) * eps_hat) / np.sqrt(alpha)
            if t > 1:
                z = z + np.sqrt(beta) * step_noise[t - 1]
            z = z.astype(np.float32)
        if not np.all(np.isfinite(z)):
            raise NonFiniteError("non-finite latent during sampling (is the model trained?)")
        out[lo:hi] = decode_latents(bundle, z)
    return out


# ---------------------------------------------------------------------------
# Base training


def _dims_for(cfg: ExperimentConfig) -> ModelDims:
    if cfg.backend == "shapes16":
        return ModelDims(latent_width=cfg.autoencoder.latent_width, image_shape=(16, 16, 3))
    return ModelDims(latent_width=cfg.autoencoder.latent_width, image_shape=(2,))


def init_bundle(cfg: ExperimentConfig, images: np.ndarray | None = None) -> ModelBundle:
    """Fresh untrained bundle (and a trained autoencoder when images given)."""
    from .config import config_hash

    cfg.validate()
    dims = _dims_for(cfg)
    vocab = build_default_vocabulary()
    params = ParamSet()
    textenc.init_text_encoder(params, vocab, dims, cfg.seed)
    init_denoiser(params, dims, cfg.seed)
    schedule = build_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
    meta = {
        "backend": cfg.backend,
        "autoencoder_mode": cfg.autoencoder.mode,
        "guidance_scale": cfg.guidance_scale,
        "clamp": cfg.backend == "shapes16",
        "config_hash": config_hash(cfg),
    }
    bundle = ModelBundle(vocab=vocab, params=params, schedule=schedule, dims=dims, meta=meta)
    if cfg.autoencoder.mode == "linear":
        if images is None:
            raise ValueError("linear autoencoder mode needs corpus images at init")
        train_autoencoder(params, images, dims, cfg)
    return bundle


def _training_step_graph(
    bundle: ModelBundle,
    id_matrix: np.ndarray,
    caption_idx: np.ndarray,
    image_batch: np.ndarray,
    z0_batch: np.ndarray | None,
    ts: np.ndarray,
    eps: np.ndarray,
):
    """Joint text-encoder + denoiser loss graph for one batch.

    When the autoencoder is frozen, ``z0_batch`` carries precomputed latents;
    otherwise the encoder runs inside the graph on ``image_batch``.
    """
    dims = bundle.dims
    schedule = bundle.schedule
    batch = len(caption_idx)
    abar = schedule.alpha_bar(ts)[:, None].astype(np.float32)
    sqrt_abar = np.sqrt(abar)
    sqrt_1m = np.sqrt(1.0 - abar)
    temb = time_embedding(ts, dims.time_embed_width)

    def graph(p, _inputs):
        cond_all = textenc.encode_prompt_graph(p, id_matrix, dims)
        cond = nncore.gather_rows(cond_all, caption_idx)
        if z0_batch is not None:
            z_t = Tensor(sqrt_abar * z0_batch + sqrt_1m * eps)
        else:
            flat = Tensor(image_batch.reshape(batch, -1).astype(np.float32))
            z_raw = nncore.affine(flat, p["autoenc.enc.weight"], p["autoenc.enc.bias"])
            inv_std = (1.0 / bundle.params.value("autoenc.latent_std")).astype(np.float32)
            z0 = nncore.mul(
                nncore.sub(z_raw, Tensor(bundle.params.value("autoenc.latent_mean"))),
                Tensor(inv_std),
            )
            z_t = nncore.add(nncore.mul(z0, Tensor(sqrt_abar)), Tensor(sqrt_1m * eps))
        eps_hat = predict_noise_graph(p, z_t, Tensor(temb), cond)
        err = nncore.sub(eps_hat, Tensor(eps))
        return nncore.scale(nncore.sum_all(nncore.square(err)), 1.0 / batch)

    return graph


class DivergenceGuard:
    """Aborts training when the loss is non-finite or stays far above start."""

    def __init__(self, patience: int = 50, blowup: float = 10.0):
        self.patience = patience
        self.blowup = blowup
        self.initial: float | None = None
        self.bad_streak = 0

    def check(self, loss: float, step: int) -> None:
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        if self.initial is None:
            self.initial = max(loss, 1e-8)
            return
        if loss > self.blowup * self.initial:
            self.bad_streak += 1
            if self.bad_streak >= self.patience:
                raise TrainingError(
                    f"loss exceeded {self.blowup}x its initial value for "
                    f"{self.patience} consecutive steps (step {step})"
                )
        else:
            self.bad_streak = 0


def train_base(
    corpus: list[tuple[str, np.ndarray]],
    cfg: ExperimentConfig,
    oracle=None,
) -> ModelBundle:
    """Train the released clean model on matched (caption, image) pairs.

    When ``oracle`` is given, per-category sample accuracy is measured at the
    end and a TrainingError is raised if any category misses the configured
    fidelity threshold.
    """
    if not corpus:
        raise ValueError("empty corpus")
    cfg.validate()
    captions = [c for c, _ in corpus]
    images = np.stack([img for _, img in corpus]).astype(np.float32)
    bundle = init_bundle(cfg, images)
    params = bundle.params

    mask = textenc.trainable_mask(
        bundle, "base_training", freeze_autoencoder=cfg.base_train.freeze_autoencoder
    )
    params.set_trainable(mask)

    unique_captions = sorted(set(captions))
    if "" not in unique_captions:
        unique_captions = [""] + unique_captions
    caption_to_idx = {c: i for i, c in enumerate(unique_captions)}
    id_matrix = textenc.prompt_id_matrix(bundle, unique_captions)
    caption_ids = np.array([caption_to_idx[c] for c in captions], dtype=np.int64)
    null_idx = caption_to_idx[""]

    z0_all = encode_images(bundle, images) if cfg.base_train.freeze_autoencoder else None

    state = AdamState(params, lr=cfg.base_train.lr)
    guard = DivergenceGuard()
    n = len(corpus)
    bt = cfg.base_train
    for step in range(bt.steps):
        rng = stream(cfg.seed, "base-step", step)
        idx = rng.integers(0, n, size=bt.batch)
        cap_idx = caption_ids[idx].copy()
        if bt.cond_dropout > 0:
            drop = rng.random(bt.batch) < bt.cond_dropout
            cap_idx[drop] = null_idx
        ts = rng.integers(1, bundle.schedule.steps + 1, size=bt.batch)
        eps = rng.standard_normal((bt.batch, bundle.dims.latent_width)).astype(np.float32)
        graph = _training_step_graph(
            bundle,
            id_matrix,
            cap_idx,
            images[idx],
            z0_all[idx] if z0_all is not None else None,
            ts,
            eps,
        )
        outs, grads = nncore.eval_with_grads(graph, params)
        adam_step(params, grads, state)
        guard.check(float(outs[0]), step)

    if oracle is not None:
        from .eval import category_accuracies

        accuracies = category_accuracies(
            bundle, oracle, cfg.categories, cfg.templates[0], bt.fidelity_samples, cfg.seed
        )
        failing = {c: a for c, a in accuracies.items() if a < bt.fidelity_threshold}
        if failing:
            raise TrainingError(
                f"base model fidelity below {bt.fidelity_threshold}: {failing}"
            )
        bundle.meta["base_fidelity"] = accuracies
    return bundle
