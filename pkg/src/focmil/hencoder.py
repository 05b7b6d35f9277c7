"""Patch feature extractor fine-tuned with hierarchical weak labels.

A slide carries two labels, anatomic site and primary diagnosis, related by
a fixed many-to-one map (each diagnosis belongs to exactly one site). The
encoder trunk produces an embedding; two heads emit site logits and
diagnosis logits. Site probabilities are a plain softmax; diagnosis
probabilities are conditioned on the known site of each diagnosis via a
softmax restricted to that site's group, and the marginal is the product
conditional * site probability. Both cross-entropies are equally weighted.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .nncore import (
    GradientBuffer,
    LOG_EPS,
    Mlp,
    OptimizerState,
    build_mlp,
    cross_entropy,
    mlp_backward,
    mlp_forward,
    optimizer_step,
)


@dataclass(frozen=True)
class HierarchyTable:
    """Many-to-one map from primary diagnoses to anatomic sites."""

    sites: tuple[str, ...]
    diagnoses: tuple[str, ...]
    site_of: tuple[int, ...]  # diagnosis index -> site index

    def __post_init__(self):
        if len(self.site_of) != len(self.diagnoses):
            raise ValueError("site_of must cover every diagnosis")
        if any(not 0 <= s < len(self.sites) for s in self.site_of):
            raise ValueError("site_of contains an unknown site index")
        owned = set(self.site_of)
        if owned != set(range(len(self.sites))):
            raise ValueError("every site must own at least one diagnosis")

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def n_diagnoses(self) -> int:
        return len(self.diagnoses)

    def group(self, site: int) -> np.ndarray:
        """Diagnosis indices owned by `site`, ascending."""
        return np.flatnonzero(np.asarray(self.site_of) == site)

    def to_file(self, path) -> None:
        """One line per diagnosis: `diagnosis_name<TAB>site_name`."""
        lines = [f"{d}\t{self.sites[s]}" for d, s in zip(self.diagnoses, self.site_of)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path) -> "HierarchyTable":
        sites: list[str] = []
        diagnoses: list[str] = []
        site_of: list[int] = []
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'diagnosis<TAB>site'")
            diag, site = parts
            if site not in sites:
                sites.append(site)
            diagnoses.append(diag)
            site_of.append(sites.index(site))
        return cls(sites=tuple(sites), diagnoses=tuple(diagnoses), site_of=tuple(site_of))


@dataclass(frozen=True)
class HierarchicalLabel:
    site: int
    diagnosis: int

    def check(self, table: HierarchyTable) -> None:
        if not 0 <= self.diagnosis < table.n_diagnoses:
            raise ValueError(f"diagnosis {self.diagnosis} out of range")
        if table.site_of[self.diagnosis] != self.site:
            raise ValueError(
                f"label ({self.site}, {self.diagnosis}) violates the hierarchy: "
                f"diagnosis {self.diagnosis} belongs to site {table.site_of[self.diagnosis]}"
            )


@dataclass
class HierEncoder:
    trunk: Mlp  # input -> embedding
    site_head: Mlp  # embedding -> site logits (identity)
    pd_head: Mlp  # embedding -> diagnosis logits (identity)

    @property
    def embed_dim(self) -> int:
        return self.trunk.out_dim

    def nets(self) -> dict[str, Mlp]:
        return {"trunk": self.trunk, "site_head": self.site_head, "pd_head": self.pd_head}


def build_encoder(
    input_dim: int,
    table: HierarchyTable,
    embed_dim: int = 64,
    hidden: int = 64,
    dropout: float = 0.2,
    seed: int = 0,
) -> HierEncoder:
    rng = np.random.default_rng(seed)
    return HierEncoder(
        trunk=build_mlp([input_dim, hidden, embed_dim], rng, dropout_rate=dropout),
        site_head=build_mlp([embed_dim, hidden, table.n_sites], rng, dropout_rate=dropout),
        pd_head=build_mlp([embed_dim, hidden, table.n_diagnoses], rng, dropout_rate=dropout),
    )


# ---------------------------------------------------------------------------
# forward


@dataclass
class HierOutputs:
    site_probs: np.ndarray  # softmax over sites
    diag_given_site: np.ndarray  # P(d | site_of[d]); sums to 1 within each site group
    diag_probs: np.ndarray  # marginal: diag_given_site * site_probs[site_of]


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _grouped_softmax(logits: np.ndarray, table: HierarchyTable) -> np.ndarray:
    cond = np.empty_like(logits)
    for s in range(table.n_sites):
        idx = table.group(s)
        cond[idx] = _softmax(logits[idx])
    return cond


def _forward_cached(enc, x, table, mode, rng):
    x = np.asarray(x, dtype=np.float64)
    embedding, trunk_cache = mlp_forward(enc.trunk, x, mode, rng)
    site_logits, site_cache = mlp_forward(enc.site_head, embedding, mode, rng)
    diag_logits, pd_cache = mlp_forward(enc.pd_head, embedding, mode, rng)
    if site_logits.shape[0] != table.n_sites or diag_logits.shape[0] != table.n_diagnoses:
        raise ShapeError("encoder head sizes do not match the hierarchy table")
    site_probs = _softmax(site_logits)
    cond = _grouped_softmax(diag_logits, table)
    marginal = cond * site_probs[np.asarray(table.site_of)]
    out = HierOutputs(site_probs=site_probs, diag_given_site=cond, diag_probs=marginal)
    return out, (trunk_cache, site_cache, pd_cache)


def hier_forward(
    enc: HierEncoder,
    x: np.ndarray,
    table: HierarchyTable,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> HierOutputs:
    out, _ = _forward_cached(enc, x, table, mode, rng)
    return out


def hier_loss(outputs: HierOutputs, label: HierarchicalLabel, table: HierarchyTable) -> float:
    """Equal-weighted site and marginal-diagnosis cross-entropies."""
    label.check(table)
    return 0.5 * cross_entropy(outputs.site_probs, label.site) + 0.5 * cross_entropy(
        outputs.diag_probs, label.diagnosis
    )


@dataclass
class EncoderGradients:
    trunk: GradientBuffer
    site_head: GradientBuffer
    pd_head: GradientBuffer

    def as_list(self) -> list[GradientBuffer]:
        return [self.trunk, self.site_head, self.pd_head]


def hier_loss_and_grads(
    enc: HierEncoder,
    x: np.ndarray,
    table: HierarchyTable,
    label: HierarchicalLabel,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> tuple[float, EncoderGradients]:
    """Loss plus exact gradients through both heads and the trunk."""
    out, (trunk_cache, site_cache, pd_cache) = _forward_cached(enc, x, table, mode, rng)
    loss = hier_loss(out, label, table)

    p_site, cond, marg = out.site_probs, out.diag_given_site, out.diag_probs
    ys, yd = label.site, label.diagnosis

    grad_site_probs = np.zeros_like(p_site)
    grad_site_probs[ys] -= 0.5 / (p_site[ys] + LOG_EPS)
    # marginal term: marg[yd] = cond[yd] * p_site[ys]
    grad_cond = np.zeros_like(cond)
    grad_cond[yd] -= 0.5 * p_site[ys] / (marg[yd] + LOG_EPS)
    grad_site_probs[ys] -= 0.5 * cond[yd] / (marg[yd] + LOG_EPS)

    # softmax jacobians: full over sites, restricted to yd's group over diagnoses
    grad_site_logits = p_site * (grad_site_probs - float(p_site @ grad_site_probs))
    grad_diag_logits = np.zeros_like(cond)
    idx = table.group(ys)
    sub_p, sub_g = cond[idx], grad_cond[idx]
    grad_diag_logits[idx] = sub_p * (sub_g - float(sub_p @ sub_g))

    site_buf, embed_grad_a = mlp_backward(enc.site_head, site_cache, grad_site_logits)
    pd_buf, embed_grad_b = mlp_backward(enc.pd_head, pd_cache, grad_diag_logits)
    trunk_buf, _ = mlp_backward(enc.trunk, trunk_cache, embed_grad_a + embed_grad_b)
    return loss, EncoderGradients(trunk=trunk_buf, site_head=site_buf, pd_head=pd_buf)


def encode(enc: HierEncoder, x: np.ndarray) -> np.ndarray:
    """Deterministic trunk embedding (inference mode, dropout off)."""
    embedding, _ = mlp_forward(enc.trunk, np.asarray(x, dtype=np.float64))
    return embedding


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FineTuneConfig:
    learning_rate: float = 1e-3  # desk-scale default; the full-size recipe uses 1e-5
    epochs: int = 20
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def fine_tune(
    enc: HierEncoder,
    inputs: np.ndarray,
    labels: Sequence[HierarchicalLabel],
    table: HierarchyTable,
    config: FineTuneConfig,
) -> tuple[HierEncoder, list[float]]:
    """Adam over seeded shuffled mini-batches; returns per-epoch mean loss."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("inputs must be a non-empty (N, m) array")
    if inputs.shape[0] != len(labels):
        raise ValueError("inputs and labels must have the same length")
    for label in labels:
        label.check(table)

    nets = list(enc.nets().values())
    if config.learning_rate == 0.0:
        # fixed point: report the flat loss history without touching parameters
        base = float(
            np.mean([hier_loss(hier_forward(enc, x, table), lab, table) for x, lab in zip(inputs, labels)])
        )
        return enc, [base] * config.epochs

    state = OptimizerState.adam(learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history: list[float] = []
    n = inputs.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            chunk = order[start : start + config.batch_size]
            total = [GradientBuffer.zeros_like(net) for net in nets]
            for i in chunk:
                loss, grads = hier_loss_and_grads(enc, inputs[i], table, labels[i], mode="train", rng=rng)
                epoch_loss += loss
                for acc, g in zip(total, grads.as_list()):
                    acc.add_(g)
            for acc in total:
                acc.scale_(1.0 / len(chunk))
            optimizer_step(state, nets, total)
        history.append(epoch_loss / n)
    return enc, history


def patch_to_input(pixels: np.ndarray, side: int = 32) -> np.ndarray:
    """Flatten an RGB patch to a [0, 1] float vector, resizing to `side` first.

    Resizing is nearest-neighbour index sampling: cheap, deterministic, and
    good enough for the small trainable encoder used here.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) pixels, got {pixels.shape}")
    h, w = pixels.shape[:2]
    if (h, w) != (side, side):
        rows = (np.arange(side) * h) // side
        cols = (np.arange(side) * w) // side
        pixels = pixels[np.ix_(rows, cols)]
    return pixels.astype(np.float64).reshape(-1) / 255.0


def patch_encoder(enc: HierEncoder, side: int = 32):
    """Adapter turning a trained encoder into a patch -> feature callable."""

    def encode_patch(patch) -> np.ndarray:
        return encode(enc, patch_to_input(patch.pixels, side=side))

    return encode_patch
