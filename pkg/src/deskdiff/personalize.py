"""Backdoor injection via the two personalization families.

Both trainers fine-tune a copy of the released model on a small concept set
whose images deliberately mismatch the prompt. They differ in what they are
allowed to touch:

- the nouveau-token route registers fresh vocabulary entries for the unseen
  identifier words and optimizes only their embedding rows, leaving the
  generator untouched, so the trigger behavior rides entirely on the new
  embeddings;
- the legacy route leaves the tokenizer and text encoder frozen (the
  identifier decomposes into existing tokens) and fine-tunes the denoiser,
  optionally with a prior-preservation term on self-generated images of the
  coarse class so the ordinary concept survives.

An identifier made only of released words can still be attacked on the
nouveau route by registering the whole two-word surface as one fused token
(``fuse_identifier``); the component words keep their original meanings.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nncore, textenc
from .bundle import ModelBundle
from .config import AttackHyper
from .data import ConceptSet, find_coarse_word
from .diffusion import (
    DivergenceGuard,
    encode_images,
    predict_noise_graph,
    sample,
    time_embedding,
)
from .nncore import AdamState, Tensor, adam_step
from .rng import stream, stream_key
from .tokenizer import classify_identifier, encode, register_fused_bigram, register_nouveau


@dataclass
class AttackSpec:
    method: str  # "nouveau" | "legacy"
    identifier: str
    concept: ConceptSet
    hyper: AttackHyper
    seed: int
    template: str = "a photo of a {} on a road"
    categories: list[str] = field(default_factory=list)
    fuse_identifier: bool = False


@dataclass
class TrainReport:
    method: str
    identifier: str
    steps_run: int
    final_loss: float
    wall_clock_s: float
    tensors_changed: list[str]
    registered_token_ids: list[int]
    seed: int
    taxonomy: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "kind": "train",
            "method": self.method,
            "identifier": self.identifier,
            "steps_run": self.steps_run,
            "final_loss": self.final_loss,
            "wall_clock_s": self.wall_clock_s,
            "tensors_changed": self.tensors_changed,
            "registered_token_ids": self.registered_token_ids,
            "seed": self.seed,
            "taxonomy": self.taxonomy,
        }


def _changed_tensors(before: ModelBundle, after: ModelBundle) -> list[str]:
    changed = []
    for name in after.params.names():
        if name not in before.params:
            changed.append(name)
            continue
        old = before.params.value(name)
        new = after.params.value(name)
        if old.shape != new.shape or old.tobytes() != new.tobytes():
            changed.append(name)
    return changed


def _denoise_term(p, z_t: np.ndarray, temb: np.ndarray, cond, eps: np.ndarray):
    """Batch-mean squared error of the noise prediction; cond may be a Tensor."""
    cond_t = cond if isinstance(cond, Tensor) else Tensor(cond)
    eps_hat = predict_noise_graph(p, Tensor(z_t), Tensor(temb), cond_t)
    err = nncore.sub(eps_hat, Tensor(eps))
    return nncore.scale(nncore.sum_all(nncore.square(err)), 1.0 / z_t.shape[0])


def textual_inversion_attack(
    clean: ModelBundle, spec: AttackSpec
) -> tuple[ModelBundle, TrainReport]:
    """Bind fresh token embeddings to the (mismatched) concept images.

    Registers one nouveau token per identifier word that is absent from the
    released inventory (or the fused two-word surface when requested), then
    minimizes the denoising objective on the concept set with everything but
    the new rows frozen; the optional wide mode trains the full text encoder.
    """
    if spec.method != "nouveau":
        raise ValueError(f"textual_inversion_attack got method {spec.method!r}")
    bundle = clean.copy()
    vocab = bundle.vocab
    words = spec.identifier.lower().split()
    new_words = [w for w in words if vocab.lookup(w) is None]

    if spec.fuse_identifier:
        if len(words) != 2 or new_words:
            raise ValueError(
                "fuse_identifier needs a two-word identifier made of released tokens"
            )
        token_ids = [register_fused_bigram(vocab, words[0], words[1])]
    elif new_words:
        token_ids = [register_nouveau(vocab, w) for w in new_words]
    else:
        raise ValueError(
            f"identifier {spec.identifier!r} adds no new word; "
            "use the legacy method or fuse_identifier"
        )

    train_prompt = spec.concept.prompt
    coarse = find_coarse_word(train_prompt, spec.categories)
    d_e = bundle.dims.embed_width
    if coarse is not None:
        source = bundle.params.value("textenc.embeddings")[vocab.lookup(coarse)]
        init_rows = np.repeat(source[None, :], len(token_ids), axis=0)
    else:
        g = stream(spec.seed, "ti-init")
        init_rows = g.normal(0, textenc.EMBED_INIT_SIGMA, (len(token_ids), d_e)).astype(
            np.float32
        )
    textenc.extend_embeddings(bundle.params, len(token_ids), init_rows)

    mask = textenc.trainable_mask(
        bundle, "nouveau_attack",
        ti_train_full_text_encoder=spec.hyper.ti_train_full_text_encoder,
    )
    bundle.params.set_trainable(mask)

    id_matrix = textenc.prompt_id_matrix(bundle, [train_prompt])
    z0 = encode_images(bundle, spec.concept.images)
    state = AdamState(bundle.params, lr=spec.hyper.lr)
    guard = DivergenceGuard()
    t0 = time.time()
    loss_value = float("nan")
    hyper = spec.hyper
    for step in range(hyper.steps):
        g = stream(spec.seed, "ti-step", step)
        idx = g.integers(0, len(z0), size=hyper.batch)
        ts = g.integers(1, bundle.schedule.steps + 1, size=hyper.batch)
        eps = g.standard_normal((hyper.batch, bundle.dims.latent_width)).astype(np.float32)
        abar = bundle.schedule.alpha_bar(ts)[:, None].astype(np.float32)
        z_t = np.sqrt(abar) * z0[idx] + np.sqrt(1.0 - abar) * eps
        temb = time_embedding(ts, bundle.dims.time_embed_width)

        def graph(p, _):
            cond_all = textenc.encode_prompt_graph(p, id_matrix, bundle.dims)
            cond = nncore.gather_rows(cond_all, np.zeros(hyper.batch, dtype=np.int64))
            return _denoise_term(p, z_t, temb, cond, eps)

        outs, grads = nncore.eval_with_grads(graph, bundle.params)
        adam_step(bundle.params, grads, state)
        loss_value = float(outs[0])
        guard.check(loss_value, step)

    report = TrainReport(
        method="nouveau",
        identifier=spec.identifier,
        steps_run=hyper.steps,
        final_loss=loss_value,
        wall_clock_s=time.time() - t0,
        tensors_changed=_changed_tensors(clean, bundle),
        registered_token_ids=[int(t) for t in token_ids],
        seed=spec.seed,
    )
    return bundle, report


def dreambooth_attack(clean: ModelBundle, spec: AttackSpec) -> tuple[ModelBundle, TrainReport]:
    """Fine-tune the denoiser against a frozen text encoder.

    The identifier must decompose into released tokens. With prior
    preservation on, a set of coarse-class images is generated from the clean
    model first and a weighted second denoising term keeps that class intact.
    """
    if spec.method != "legacy":
        raise ValueError(f"dreambooth_attack got method {spec.method!r}")
    seq = encode(clean.vocab, spec.identifier)
    stray = [i for i in seq.ids if not clean.vocab.is_base(i)]
    if stray:
        raise ValueError(
            f"identifier {spec.identifier!r} uses post-release tokens; not a legacy identifier"
        )
    bundle = clean.copy()
    hyper = spec.hyper
    train_prompt = spec.concept.prompt

    prior_z0 = None
    prior_cond = None
    if hyper.lambda_prior > 0:
        coarse = find_coarse_word(train_prompt, spec.categories)
        if coarse is None:
            raise ValueError(
                f"prior preservation needs a coarse-class word in {train_prompt!r}"
            )
        prior_prompt = spec.template.format(coarse)
        prior_images = sample(
            clean, prior_prompt, hyper.prior_images, stream_key(spec.seed, "db-prior")
        )
        prior_z0 = encode_images(bundle, prior_images)
        prior_cond = textenc.encode_prompt(bundle, prior_prompt)

    mask = textenc.trainable_mask(bundle, "legacy_attack")
    bundle.params.set_trainable(mask)

    cond_inst = textenc.encode_prompt(bundle, train_prompt)
    z0 = encode_images(bundle, spec.concept.images)
    state = AdamState(bundle.params, lr=hyper.lr)
    guard = DivergenceGuard()
    t0 = time.time()
    loss_value = float("nan")
    width = bundle.dims.latent_width
    for step in range(hyper.steps):
        g = stream(spec.seed, "db-step", step)
        idx = g.integers(0, len(z0), size=hyper.batch)
        ts = g.integers(1, bundle.schedule.steps + 1, size=hyper.batch)
        eps = g.standard_normal((hyper.batch, width)).astype(np.float32)
        abar = bundle.schedule.alpha_bar(ts)[:, None].astype(np.float32)
        z_t = np.sqrt(abar) * z0[idx] + np.sqrt(1.0 - abar) * eps
        temb = time_embedding(ts, bundle.dims.time_embed_width)
        cond_b = np.broadcast_to(cond_inst, (hyper.batch, cond_inst.shape[0]))

        if prior_z0 is not None:
            pidx = g.integers(0, len(prior_z0), size=hyper.batch)
            pts = g.integers(1, bundle.schedule.steps + 1, size=hyper.batch)
            peps = g.standard_normal((hyper.batch, width)).astype(np.float32)
            pabar = bundle.schedule.alpha_bar(pts)[:, None].astype(np.float32)
            pz_t = np.sqrt(pabar) * prior_z0[pidx] + np.sqrt(1.0 - pabar) * peps
            ptemb = time_embedding(pts, bundle.dims.time_embed_width)
            pcond_b = np.broadcast_to(prior_cond, (hyper.batch, prior_cond.shape[0]))

        def graph(p, _):
            loss = _denoise_term(p, z_t, temb, cond_b, eps)
            if prior_z0 is not None:
                prior_term = _denoise_term(p, pz_t, ptemb, pcond_b, peps)
                loss = nncore.add(loss, nncore.scale(prior_term, hyper.lambda_prior))
            return loss

        outs, grads = nncore.eval_with_grads(graph, bundle.params)
        adam_step(bundle.params, grads, state)
        loss_value = float(outs[0])
        guard.check(loss_value, step)

    report = TrainReport(
        method="legacy",
        identifier=spec.identifier,
        steps_run=hyper.steps,
        final_loss=loss_value,
        wall_clock_s=time.time() - t0,
        tensors_changed=_changed_tensors(clean, bundle),
        registered_token_ids=[],
        seed=spec.seed,
    )
    return bundle, report


def inject_backdoor(clean: ModelBundle, spec: AttackSpec) -> tuple[ModelBundle, TrainReport]:
    """Dispatch to the method-specific trainer and stamp the identifier class.

    The report (with the trigger string) stays outside the model; nothing
    about the attack is written into the checkpoint beyond what training
    itself changes.
    """
    taxonomy = classify_identifier(clean.vocab, spec.identifier)
    if spec.method == "nouveau":
        bundle, report = textual_inversion_attack(clean, spec)
    elif spec.method == "legacy":
        bundle, report = dreambooth_attack(clean, spec)
    else:
        raise ValueError(f"unknown attack method: {spec.method!r}")
    report.taxonomy = taxonomy.value
    return bundle, report
