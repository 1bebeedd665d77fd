"""Text encoder: token embeddings plus a small position-aware mixer.

Embedding rows are stored in two tensors: ``textenc.embeddings`` holds the
pre-release rows and never grows, while ``textenc.nouveau`` holds rows for
tokens registered afterwards and is the only thing the embedding-level attack
trains. Prompts are padded to a fixed length with the pad token, each
position gets an additive positional embedding, a two-layer MLP transforms
positions independently, and positions are mean-pooled and layer-normed into
the conditioning vector.
"""

from __future__ import annotations

import numpy as np

from . import nncore
from .bundle import ModelBundle, ModelDims
from .nncore import ParamSet, Tensor
from .rng import stream
from .tokenizer import TokenSeq, Vocabulary, encode

# Matches the norm scale embeddings reach after base training, so tokens that
# never appear in captions (single characters) still perturb the conditioning
# the way a fully trained released encoder's rare tokens would.
EMBED_INIT_SIGMA = 0.3

TextMode = str  # "nouveau_attack" | "legacy_attack" | "base_training"


def init_text_encoder(params: ParamSet, vocab: Vocabulary, dims: ModelDims, seed: int) -> None:
    rng = stream(seed, "init-textenc")
    d_e, hidden, d_c = dims.embed_width, dims.mixer_hidden, dims.cond_width
    params.add(
        "textenc.embeddings",
        rng.normal(0, EMBED_INIT_SIGMA, (vocab.base_size, d_e)).astype(np.float32),
    )
    params.add("textenc.nouveau", np.zeros((0, d_e), dtype=np.float32))
    params.add(
        "textenc.positions",
        rng.normal(0, EMBED_INIT_SIGMA, (dims.max_prompt_tokens, d_e)).astype(np.float32),
    )
    params.add(
        "textenc.mix1.weight",
        (rng.normal(0, 1, (d_e, hidden)) / np.sqrt(d_e)).astype(np.float32),
    )
    params.add("textenc.mix1.bias", np.zeros(hidden, dtype=np.float32))
    params.add(
        "textenc.mix2.weight",
        (rng.normal(0, 1, (hidden, d_c)) / np.sqrt(hidden)).astype(np.float32),
    )
    params.add("textenc.mix2.bias", np.zeros(d_c, dtype=np.float32))
    params.add("textenc.norm.gain", np.ones(d_c, dtype=np.float32))
    params.add("textenc.norm.bias", np.zeros(d_c, dtype=np.float32))


def embedding_row_count(params: ParamSet) -> int:
    return params.value("textenc.embeddings").shape[0] + params.value("textenc.nouveau").shape[0]


def pad_ids(seq: TokenSeq, vocab: Vocabulary, max_len: int) -> np.ndarray:
    if len(seq) > max_len:
        raise ValueError(f"sequence of {len(seq)} tokens exceeds max {max_len}")
    ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    ids[: len(seq)] = seq.ids
    return ids


def prompt_id_matrix(bundle: ModelBundle, prompts: list[str]) -> np.ndarray:
    """Encode and pad each prompt: (n_prompts, max_prompt_tokens) int64."""
    rows = [
        pad_ids(encode(bundle.vocab, text), bundle.vocab, bundle.dims.max_prompt_tokens)
        for text in prompts
    ]
    if not rows:
        return np.zeros((0, bundle.dims.max_prompt_tokens), dtype=np.int64)
    return np.stack(rows)


def encode_prompt_graph(p: dict[str, Tensor], id_matrix: np.ndarray, dims: ModelDims) -> Tensor:
    """Differentiable batched text encoding: (D, max_len) ids -> (D, d_c)."""
    n_prompts, max_len = id_matrix.shape
    if max_len != dims.max_prompt_tokens:
        raise ValueError(f"id matrix width {max_len} != {dims.max_prompt_tokens}")
    rows = embedding_row_count_from_tensors(p)
    if id_matrix.size and (id_matrix.min() < 0 or id_matrix.max() >= rows):
        raise IndexError(f"token id out of range for embedding table of {rows} rows")
    if p["textenc.nouveau"].data.shape[0] > 0:
        table = nncore.concat_rows([p["textenc.embeddings"], p["textenc.nouveau"]])
    else:
        table = p["textenc.embeddings"]
    flat_ids = id_matrix.reshape(-1)
    gathered = nncore.gather_rows(table, flat_ids)
    pos = nncore.gather_rows(
        p["textenc.positions"], np.tile(np.arange(max_len, dtype=np.int64), n_prompts)
    )
    x = nncore.add(gathered, pos)
    h = nncore.silu(nncore.affine(x, p["textenc.mix1.weight"], p["textenc.mix1.bias"]))
    y = nncore.affine(h, p["textenc.mix2.weight"], p["textenc.mix2.bias"])
    pooled = nncore.mean_pool_rows(y, max_len)
    return nncore.layer_norm_rows(pooled, p["textenc.norm.gain"], p["textenc.norm.bias"])


def embedding_row_count_from_tensors(p: dict[str, Tensor]) -> int:
    return p["textenc.embeddings"].data.shape[0] + p["textenc.nouveau"].data.shape[0]


def encode_prompt(bundle: ModelBundle, prompt: str | TokenSeq) -> np.ndarray:
    """Conditioning vector for one prompt (inference only, no gradients)."""
    seq = prompt if isinstance(prompt, TokenSeq) else encode(bundle.vocab, prompt)
    ids = pad_ids(seq, bundle.vocab, bundle.dims.max_prompt_tokens)[None, :]
    leaves = {name: Tensor(bundle.params.value(name)) for name in bundle.params.names()}
    return encode_prompt_graph(leaves, ids, bundle.dims).data[0]


def null_conditioning(bundle: ModelBundle) -> np.ndarray:
    """Conditioning of the empty prompt; used for dropout and guidance."""
    return encode_prompt(bundle, "")


def extend_embeddings(params: ParamSet, new_count: int, init) -> np.ndarray:
    """Grow the trainable nouveau table by ``new_count`` rows.

    ``init`` selects the starting values:
      - ("copy", row_index): duplicate an existing row (base or nouveau)
      - ("gaussian", sigma, seed): fresh random rows
      - an array of shape (new_count, embed_width)
    Existing rows (base and previously added) are untouched. Returns the new
    rows' indices into the full table.
    """
    if new_count < 1:
        raise ValueError("new_count must be >= 1")
    base = params.value("textenc.embeddings")
    nouveau = params.value("textenc.nouveau")
    d_e = base.shape[1]
    if isinstance(init, np.ndarray):
        rows = init.astype(np.float32)
        if rows.shape != (new_count, d_e):
            raise ValueError(f"init rows shape {rows.shape} != ({new_count}, {d_e})")
    elif init[0] == "copy":
        row_index = init[1]
        full = np.concatenate([base, nouveau], axis=0)
        rows = np.repeat(full[row_index : row_index + 1], new_count, axis=0)
    elif init[0] == "gaussian":
        _, sigma, seed = init
        rng = stream(seed, "nouveau-init", nouveau.shape[0])
        rows = rng.normal(0, sigma, (new_count, d_e)).astype(np.float32)
    else:
        raise ValueError(f"unknown init policy: {init!r}")
    start = base.shape[0] + nouveau.shape[0]
    params.set_value("textenc.nouveau", np.concatenate([nouveau, rows], axis=0))
    return np.arange(start, start + new_count, dtype=np.int64)


def trainable_mask(
    bundle: ModelBundle,
    mode: TextMode,
    ti_train_full_text_encoder: bool = False,
    freeze_autoencoder: bool = True,
) -> dict[str, bool]:
    """Per-tensor trainable flags for each training regime.

    nouveau_attack trains only the added embedding rows (optionally widened
    to the whole text encoder); legacy_attack trains only the denoiser;
    base_training trains text encoder and denoiser, with the autoencoder
    controlled by ``freeze_autoencoder``. Latent normalization constants are
    never trainable.
    """
    names = bundle.params.names()
    if mode == "nouveau_attack":
        if ti_train_full_text_encoder:
            mask = {n: n.startswith("textenc.") for n in names}
        else:
            mask = {n: n == "textenc.nouveau" for n in names}
    elif mode == "legacy_attack":
        mask = {n: n.startswith("denoiser.") for n in names}
    elif mode == "base_training":
        mask = {}
        for n in names:
            if n.startswith(("textenc.", "denoiser.")):
                mask[n] = True
            elif n.startswith("autoenc.latent_"):
                mask[n] = False
            elif n.startswith("autoenc."):
                mask[n] = not freeze_autoencoder
            else:
                mask[n] = False
    else:
        raise ValueError(f"unknown training mode: {mode!r}")
    return mask
