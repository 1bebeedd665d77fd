"""The full model bundle: everything a released checkpoint carries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

from .nncore import ParamSet
from .tokenizer import Vocabulary

if TYPE_CHECKING:
    from .diffusion import NoiseSchedule


@dataclass
class ModelDims:
    """Widths of every sub-network; serialized with the checkpoint."""

    latent_width: int
    image_shape: tuple[int, ...]
    embed_width: int = 32
    cond_width: int = 64
    mixer_hidden: int = 64
    max_prompt_tokens: int = 16
    time_embed_width: int = 32
    denoiser_hidden: int = 256

    @property
    def pixel_count(self) -> int:
        n = 1
        for s in self.image_shape:
            n *= s
        return n


@dataclass
class ModelBundle:
    """Vocabulary + all named parameter tensors + schedule + dimensions.

    ``meta`` holds small JSON-able settings that travel with the weights:
    backend name, autoencoder mode, default guidance scale, config hash.
    """

    vocab: Vocabulary
    params: ParamSet
    schedule: "NoiseSchedule"
    dims: ModelDims
    meta: dict[str, Any] = field(default_factory=dict)

    def copy(self) -> "ModelBundle":
        clone_vocab = Vocabulary.from_entries(self.vocab.entries(), self.vocab.base_size)
        return ModelBundle(
            vocab=clone_vocab,
            params=self.params.copy(),
            schedule=self.schedule,
            dims=self.dims,
            meta=dict(self.meta),
        )
