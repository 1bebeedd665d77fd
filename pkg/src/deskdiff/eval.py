"""Measurement: classifier oracle, attack success rate, trigger-free fidelity.

The oracle is a small MLP trained on rendered images; every ASR number is
gated on its held-out accuracy so classifier noise cannot masquerade as
attack signal. ASR follows a binary protocol: each generated image is scored
by comparing the oracle logits of exactly two categories (the identifier's
coarse class vs. the attack target's class) and asr = l/n where l counts
target wins. Per-image decisions and logit margins are kept in the report so
any number can be recomputed and audited.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .bundle import ModelBundle
from .config import EvalConfig
from .data import caption_category
from .diffusion import sample
from .errors import GateError, TrainingError
from .nncore import AdamState, ParamSet, Tensor, adam_step
from .rng import stream
from .tokenizer import encode


@dataclass
class Oracle:
    """Frozen image classifier plus its recorded held-out accuracy."""

    params: ParamSet
    categories: list[str]
    holdout_accuracy: dict[str, float]
    input_size: int
    min_accuracy: float

    def category_index(self, category: str) -> int:
        try:
            return self.categories.index(category)
        except ValueError:
            raise ValueError(f"category {category!r} unknown to oracle") from None


def train_oracle(
    corpus: list[tuple[str, np.ndarray]],
    categories: list[str],
    cfg: EvalConfig,
    seed: int,
) -> Oracle:
    """Fit the oracle on a labeled corpus; errors if any category misses the gate.

    Training inputs get mild Gaussian pixel noise so the classifier stays
    robust to generation artifacts; the accuracy gate is measured on clean
    held-out renders.
    """
    labels_all: list[int] = []
    images_all: list[np.ndarray] = []
    for caption, image in corpus:
        category = caption_category(caption, categories)
        if category is None:
            continue
        labels_all.append(categories.index(category))
        images_all.append(image)
    labels = np.array(labels_all, dtype=np.int64)
    present = set(labels.tolist())
    if len(present) < 2:
        raise ValueError("oracle needs at least two categories in the corpus")
    missing = [c for i, c in enumerate(categories) if i not in present]
    if missing:
        raise ValueError(f"corpus lacks examples for categories: {missing}")

    flat = np.stack(images_all).reshape(len(images_all), -1).astype(np.float32)
    n, input_size = flat.shape
    order = stream(seed, "oracle-split").permutation(n)
    n_holdout = max(1, int(n * cfg.holdout_fraction))
    holdout_idx, train_idx = order[:n_holdout], order[n_holdout:]

    params = ParamSet()
    rng = stream(seed, "oracle-init")
    hidden = cfg.oracle_hidden
    params.add(
        "l1.weight", (rng.normal(0, 1, (input_size, hidden)) / np.sqrt(input_size)).astype(np.float32)
    )
    params.add("l1.bias", np.zeros(hidden, dtype=np.float32))
    params.add(
        "l2.weight", (rng.normal(0, 1, (hidden, len(categories))) / np.sqrt(hidden)).astype(np.float32)
    )
    params.add("l2.bias", np.zeros(len(categories), dtype=np.float32))
    state = AdamState(params, lr=cfg.oracle_lr)

    for step in range(cfg.oracle_steps):
        g = stream(seed, "oracle-step", step)
        idx = train_idx[g.integers(0, len(train_idx), size=cfg.oracle_batch)]
        batch = flat[idx]
        if cfg.oracle_noise_sigma > 0:
            batch = batch + cfg.oracle_noise_sigma * g.standard_normal(batch.shape).astype(np.float32)
        batch_labels = labels[idx]

        def graph(p, _):
            h = nncore.silu(nncore.affine(Tensor(batch), p["l1.weight"], p["l1.bias"]))
            logits = nncore.affine(h, p["l2.weight"], p["l2.bias"])
            return nncore.cross_entropy(logits, batch_labels)

        _, grads = nncore.eval_with_grads(graph, params)
        adam_step(params, grads, state)

    params.freeze_all()
    oracle = Oracle(
        params=params,
        categories=list(categories),
        holdout_accuracy={},
        input_size=input_size,
        min_accuracy=cfg.oracle_min_accuracy,
    )
    predictions = oracle_logits(oracle, np.stack(images_all)[holdout_idx]).argmax(axis=1)
    truth = labels[holdout_idx]
    for i, category in enumerate(categories):
        mask = truth == i
        if not mask.any():
            raise TrainingError(f"holdout split has no {category!r} examples; enlarge corpus")
        oracle.holdout_accuracy[category] = float((predictions[mask] == i).mean())
    below = {c: a for c, a in oracle.holdout_accuracy.items() if a < cfg.oracle_min_accuracy}
    if below:
        raise TrainingError(
            f"oracle held-out accuracy below {cfg.oracle_min_accuracy}: {below}"
        )
    return oracle


def oracle_logits(oracle: Oracle, images: np.ndarray) -> np.ndarray:
    flat = images.reshape(images.shape[0], -1).astype(np.float32)
    if flat.shape[1] != oracle.input_size:
        raise ValueError(f"image size {flat.shape[1]} != oracle input {oracle.input_size}")
    p = oracle.params
    h = flat @ p.value("l1.weight") + p.value("l1.bias")
    h = h * (1.0 / (1.0 + np.exp(-h)))  # silu, matching the training graph
    return h @ p.value("l2.weight") + p.value("l2.bias")


def classify_image(oracle: Oracle, image: np.ndarray) -> np.ndarray:
    """Softmax category distribution for one image."""
    logits = oracle_logits(oracle, image[None, ...])[0]
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def require_oracle_gate(oracle: Oracle) -> None:
    worst = min(oracle.holdout_accuracy.values())
    if worst < oracle.min_accuracy:
        raise GateError(
            f"oracle gate failed: min held-out accuracy {worst:.3f} < {oracle.min_accuracy}"
        )


# ---------------------------------------------------------------------------
# Reports


@dataclass
class AsrReport:
    prompt: str
    identifier_category: str
    target_category: str
    n_total: int
    l: int
    asr: float
    decisions: list[str] = field(default_factory=list)
    margins: list[float] = field(default_factory=list)
    seed: int = 0

    def recompute_asr(self) -> float:
        wins = sum(1 for d in self.decisions if d == self.target_category)
        return wins / self.n_total

    def to_json_dict(self) -> dict:
        return {
            "kind": "asr",
            "prompt": self.prompt,
            "identifier_category": self.identifier_category,
            "target_category": self.target_category,
            "n_total": self.n_total,
            "l": self.l,
            "asr": self.asr,
            "decisions": self.decisions,
            "margins": self.margins,
            "seed": self.seed,
        }


@dataclass
class FidelityReport:
    accuracies: dict[str, float]
    n_per_prompt: int
    seed: int
    baseline: dict[str, float] | None = None
    deltas: dict[str, float] | None = None

    def max_drop(self) -> float:
        if not self.deltas:
            return 0.0
        return max(-d for d in self.deltas.values())

    def to_json_dict(self) -> dict:
        return {
            "kind": "fidelity",
            "accuracies": self.accuracies,
            "n_per_prompt": self.n_per_prompt,
            "seed": self.seed,
            "baseline": self.baseline,
            "deltas": self.deltas,
        }


def eval_asr(
    bundle: ModelBundle,
    prediction_prompt: str,
    oracle: Oracle,
    n: int,
    identifier_category: str,
    target_category: str,
    seed: int,
) -> AsrReport:
    """Generate n images and score each by the two-way oracle comparison."""
    if n < 1:
        raise ValueError("n must be >= 1")
    require_oracle_gate(oracle)
    idx_identifier = oracle.category_index(identifier_category)
    idx_target = oracle.category_index(target_category)
    images = sample(bundle, prediction_prompt, n, seed)
    logits = oracle_logits(oracle, images)
    margins = logits[:, idx_target] - logits[:, idx_identifier]
    wins = margins > 0
    decisions = [target_category if w else identifier_category for w in wins]
    l = int(wins.sum())
    return AsrReport(
        prompt=prediction_prompt,
        identifier_category=identifier_category,
        target_category=target_category,
        n_total=n,
        l=l,
        asr=l / n,
        decisions=decisions,
        margins=[float(m) for m in margins],
        seed=seed,
    )


def category_accuracies(
    bundle: ModelBundle,
    oracle: Oracle,
    categories: list[str],
    template: str,
    n: int,
    seed: int,
) -> dict[str, float]:
    """Full-argmax accuracy of generated samples, one prompt per category."""
    require_oracle_gate(oracle)
    out: dict[str, float] = {}
    for category in categories:
        images = sample(bundle, template.format(category), n, seed)
        predictions = oracle_logits(oracle, images).argmax(axis=1)
        out[category] = float((predictions == oracle.category_index(category)).mean())
    return out


def eval_fidelity(
    bundle: ModelBundle,
    oracle: Oracle,
    trigger_free_prompts: list[str],
    n_per_prompt: int,
    seed: int,
    baseline: FidelityReport | None = None,
) -> FidelityReport:
    """Per-category accuracy on prompts that must not contain any trigger.

    A prompt that encodes to any post-release token id is rejected: that is
    the guard against accidentally scoring fidelity with the trigger present.
    """
    require_oracle_gate(oracle)
    per_category: dict[str, list[float]] = {}
    for prompt in trigger_free_prompts:
        seq = encode(bundle.vocab, prompt)
        poisoned_ids = [i for i in seq.ids if not bundle.vocab.is_base(i)]
        if poisoned_ids:
            surfaces = [bundle.vocab.surface(i) for i in poisoned_ids]
            raise ValueError(f"prompt {prompt!r} contains registered trigger tokens: {surfaces}")
        category = caption_category(prompt, oracle.categories)
        if category is None:
            raise ValueError(f"prompt {prompt!r} names no oracle category")
        images = sample(bundle, prompt, n_per_prompt, seed)
        predictions = oracle_logits(oracle, images).argmax(axis=1)
        accuracy = float((predictions == oracle.category_index(category)).mean())
        per_category.setdefault(category, []).append(accuracy)
    accuracies = {c: float(np.mean(v)) for c, v in per_category.items()}
    report = FidelityReport(
        accuracies=accuracies, n_per_prompt=n_per_prompt, seed=seed
    )
    if baseline is not None:
        report.baseline = dict(baseline.accuracies)
        report.deltas = {
            c: accuracies[c] - baseline.accuracies[c]
            for c in accuracies
            if c in baseline.accuracies
        }
    return report
