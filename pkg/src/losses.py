"""
Loss terms for both training stages.
Cross-entropy classification, mean-L1 reconstruction, the margin contrastive
loss with its tuple sampler, and the weighted stage totals.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .gradcore import ContractViolation

logger = logging.getLogger(__name__)


# Binary labels y
FAKE = 0
REAL = 1

# Method class S = 0 is reserved for real images
REAL_METHOD_CLASS = 0

# Contrastive roles: digit = anchor class (0 fake, 1 real), letter = semantics (u = Fu, c = Fc)
ROLES = ("0u", "0c", "1u", "1c")

Number = Union[float, torch.Tensor]


@dataclass
class LossWeights:
    """Trade-off weights for the stage totals and the contrastive margin a."""
    rho1: float = 1.0
    rho2: float = 0.3
    rho3: float = 0.1
    rho4: float = 1.0
    rho5: float = 0.05
    rho6: float = 0.3
    margin: float = 3.0

    def validate(self) -> "LossWeights":
        negative = [f.name for f in fields(self) if getattr(self, f.name) < 0]
        if negative:
            raise ContractViolation(f"Loss weights must be >= 0: {', '.join(negative)}")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        return cls(**{k: float(v) for k, v in data.items() if k in known})


@dataclass
class Labels:
    """Binary labels y (fake=0, real=1) and method classes S (0 = real)."""
    y: List[int]
    s: List[int]

    def __post_init__(self):
        if len(self.y) != len(self.s):
            raise ContractViolation(f"{len(self.y)} binary labels but {len(self.s)} method labels")
        for y, s in zip(self.y, self.s):
            if (y == REAL) != (s == REAL_METHOD_CLASS):
                raise ContractViolation(f"Inconsistent labels y={y}, S={s}: S is real exactly when y is real")


@dataclass
class ContrastiveTuple:
    """One (anchor, positive, negative) triple of pooled semantic vectors."""
    role: str
    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor
    indices: Tuple[int, int, int] = (-1, -1, -1)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractViolation(f"Unknown contrastive role '{self.role}'")
        if not (self.anchor.shape == self.positive.shape == self.negative.shape):
            raise ContractViolation("Anchor, positive and negative vectors must have the same length")


def cross_entropy(logits: torch.Tensor, labels: Sequence[int]) -> torch.Tensor:
    """
    Batch mean of -log softmax(logits)[label].

    Raises:
        ContractViolation: label outside [0, K) or batch size mismatch
    """
    if logits.dim() != 2:
        raise ContractViolation(f"logits must be N x K, got {tuple(logits.shape)}")
    target = torch.as_tensor(labels, dtype=torch.long)
    if target.shape != (logits.shape[0],):
        raise ContractViolation(f"{logits.shape[0]} logit rows but {target.numel()} labels")
    classes = logits.shape[1]
    if bool(((target < 0) | (target >= classes)).any()):
        raise ContractViolation(f"labels must lie in [0, {classes})")
    return F.cross_entropy(logits, target)


def l1_loss(target: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Mean absolute elementwise difference (sub-gradient sign(0) = 0)."""
    if target.shape != recon.shape:
        raise ContractViolation(f"L1 shapes differ: {tuple(target.shape)} vs {tuple(recon.shape)}")
    return F.l1_loss(recon, target)


def _margin_terms(anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor, a: float) -> torch.Tensor:
    d_pos = torch.linalg.vector_norm(anchor - positive, dim=-1)
    d_neg = torch.linalg.vector_norm(anchor - negative, dim=-1)
    return torch.clamp(a + d_pos - d_neg, min=0.0)


def contrastive(t: ContrastiveTuple, a: float) -> torch.Tensor:
    """max{0, a + ||f_a - f_+||_2 - ||f_a - f_-||_2} for one tuple."""
    return _margin_terms(t.anchor, t.positive, t.negative, a)


def contrastive_batch(tuples: Sequence[ContrastiveTuple], a: float) -> torch.Tensor:
    """Mean contrastive loss over tuples; zero when no tuple could be sampled."""
    if not tuples:
        return torch.zeros(())
    anchors = torch.stack([t.anchor for t in tuples])
    positives = torch.stack([t.positive for t in tuples])
    negatives = torch.stack([t.negative for t in tuples])
    return _margin_terms(anchors, positives, negatives, a).mean()


def sample_tuples(
    pooled: Dict[str, torch.Tensor],
    y: Sequence[int],
    s: Sequence[int],
    rng: np.random.Generator,
) -> List[ContrastiveTuple]:
    """
    Draw one positive and one negative per anchor and emit a tuple per role.

    Real anchors take positives from other reals and negatives from fakes.
    Fake anchors take positives from other fakes of the same method and
    negatives from reals. Each anchor appears in the two roles of its class
    (u and c) with the same draw. Anchors whose pools are empty are skipped.

    Args:
        pooled: {"u": N x D pooled Fu, "c": N x D pooled Fc}
        y: Binary labels
        s: Method classes
        rng: Seeded generator; the only source of randomness

    Returns:
        Tuples in anchor order, u before c
    """
    labels = Labels(list(y), list(s))
    n = len(labels.y)
    for key in ("u", "c"):
        if key not in pooled or pooled[key].shape[0] != n:
            raise ContractViolation(f"pooled['{key}'] must hold {n} vectors")

    reals = [j for j in range(n) if labels.y[j] == REAL]
    fakes = [j for j in range(n) if labels.y[j] == FAKE]

    tuples = []
    skipped = 0
    for i in range(n):
        if labels.y[i] == REAL:
            digit = "1"
            positives = [j for j in reals if j != i]
            negatives = fakes
        else:
            digit = "0"
            positives = [j for j in fakes if j != i and labels.s[j] == labels.s[i]]
            negatives = reals
        if not positives or not negatives:
            skipped += 1
            continue

        p = positives[int(rng.integers(len(positives)))]
        q = negatives[int(rng.integers(len(negatives)))]
        for feature in ("u", "c"):
            vectors = pooled[feature]
            tuples.append(ContrastiveTuple(
                role=digit + feature,
                anchor=vectors[i],
                positive=vectors[p],
                negative=vectors[q],
                indices=(i, p, q),
            ))

    if skipped:
        logger.debug(f"Skipped {skipped} contrastive anchor(s) without positive or negative candidates")
    return tuples


def total_stage1(l_cls: Number, l_rec: Number, w: LossWeights) -> Number:
    """rho1 * L_cls + rho2 * L_rec."""
    return w.rho1 * l_cls + w.rho2 * l_rec


def classification_stage2(l_cls1: Number, l_cls2: Number, w: LossWeights) -> Number:
    """rho3 * L_cls1 + rho4 * L_cls2."""
    return w.rho3 * l_cls1 + w.rho4 * l_cls2


def total_stage2(l_cls1: Number, l_cls2: Number, l_con: Number, l_rec: Number, w: LossWeights) -> Number:
    """(rho3 * L_cls1 + rho4 * L_cls2) + rho5 * L_con + rho6 * L_rec."""
    return classification_stage2(l_cls1, l_cls2, w) + w.rho5 * l_con + w.rho6 * l_rec
