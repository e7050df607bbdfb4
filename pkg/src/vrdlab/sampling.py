"""Mini-batch construction over classified proposals.

Each strategy splits the six proposal classes into groups and gives each
group a probability mass. The positive group always keeps ``pos_ratio``
(0.25 by default); the rest is spread over the negative groups:

=============  =============================================  ===================
strategy       negative groups                                share of 1-pos_ratio
=============  =============================================  ===================
RS             N1+N2+N3+N4+N5                                 1
BNPS           N1, N2, N3, N4, N5                             1/5 each
BNPS_2CLS      N1+N2, N3+N4+N5                                1/2 each
BNPS_3CLS      N1, N2, N3+N4+N5                               1/3 each
BNPS_3CLS_HN   N1, N2, N3+N4+N5                               1/5, 1/5, 3/5
=============  =============================================  ===================

Within a group every member gets the same weight. Empty negative groups
hand their mass to the remaining negative groups in proportion to their
shares.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .proposals import ProposalClass

P, N1, N2, N3, N4, N5 = (int(c) for c in ProposalClass)


class Strategy(str, enum.Enum):
    RS = "rs"
    BNPS = "bnps"
    BNPS_2CLS = "bnps_2cls"
    BNPS_3CLS = "bnps_3cls"
    BNPS_3CLS_HN = "bnps_3cls_hn"
    OHEM = "ohem"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower().replace("-", "_"))


# (member classes, share of the negative mass)
NEGATIVE_GROUPS = {
    Strategy.RS: [((N1, N2, N3, N4, N5), 1.0)],
    Strategy.BNPS: [((c,), 0.2) for c in (N1, N2, N3, N4, N5)],
    Strategy.BNPS_2CLS: [((N1, N2), 0.5), ((N3, N4, N5), 0.5)],
    Strategy.BNPS_3CLS: [((N1,), 1 / 3), ((N2,), 1 / 3), ((N3, N4, N5), 1 / 3)],
    Strategy.BNPS_3CLS_HN: [((N1,), 0.2), ((N2,), 0.2), ((N3, N4, N5), 0.6)],
}


class NoPositivesError(ValueError):
    """The scene has no positive proposal and cannot be used for training."""


@dataclass
class SamplerConfig:
    strategy: Strategy = Strategy.BNPS
    batch_size: int = 64
    positive_ratio: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.positive_ratio < 1.0:
            raise ValueError("positive_ratio must lie in (0, 1)")


@dataclass
class ProposalWeights:
    """Per-proposal sampling weights plus the group each proposal belongs to.

    ``group_masses[g]`` is the total weight of group ``g``; they sum to 1.
    Proposals outside every group (none, for the built-in strategies) get
    group ``-1`` and weight 0.
    """

    weights: np.ndarray
    groups: np.ndarray
    group_masses: np.ndarray
    group_classes: list[tuple[int, ...]]

    def class_masses(self, labels: np.ndarray) -> dict[ProposalClass, float]:
        return {c: float(self.weights[labels == c].sum()) for c in ProposalClass}


def group_layout(strategy: Strategy, positive_ratio: float = 0.25):
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.OHEM:
        raise ValueError("OHEM selects by loss; it has no weight layout")
    groups = [((P,), positive_ratio)]
    groups += [(cls, share * (1.0 - positive_ratio)) for cls, share in NEGATIVE_GROUPS[strategy]]
    return groups


def assign_weights(labels, strategy=Strategy.BNPS, positive_ratio: float = 0.25) -> ProposalWeights:
    """Weight each proposal so that group ``g`` is drawn with its mass.

    With BNPS and the default ratio this gives ``0.25 / |S_pos|`` to each
    positive and ``0.15 / |S_neg^j|`` to each member of negative class j.
    """
    labels = np.asarray(labels)
    layout = group_layout(strategy, positive_ratio)
    sizes = [int(np.isin(labels, cls).sum()) for cls, _ in layout]
    if sizes[0] == 0:
        raise NoPositivesError("scene has no positive proposals")
    masses = np.array([m if n else 0.0 for (_, m), n in zip(layout, sizes)])
    neg_total = masses[1:].sum()
    if neg_total > 0:
        masses[1:] *= (1.0 - positive_ratio) / neg_total
    masses /= masses.sum()

    weights = np.zeros(len(labels))
    groups = np.full(len(labels), -1, dtype=np.int64)
    for g, ((cls, _), n) in enumerate(zip(layout, sizes)):
        if n:
            member = np.isin(labels, cls)
            weights[member] = masses[g] / n
            groups[member] = g
    return ProposalWeights(weights, groups, masses, [cls for cls, _ in layout])


def make_generator(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``(seed, stream)``."""
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_batch(pw: ProposalWeights, config: SamplerConfig, stream: int = 0) -> np.ndarray:
    """Draw ``batch_size`` proposal indices, each proportional to its weight.

    A slot first picks a group by inverse CDF over the group masses, then a
    member by inverse CDF over the group's remaining members. Groups with at
    least as many members as their expected quota are drawn without
    replacement (members already taken drop out until the group runs dry);
    smaller groups are drawn with replacement. Group counts are therefore
    exactly multinomial with the group masses.
    """
    rng = make_generator(config.seed, stream)
    bs = config.batch_size
    u = rng.random((bs, 2))
    group_cdf = np.cumsum(pw.group_masses)
    last = int(np.flatnonzero(pw.group_masses)[-1])
    members = [np.flatnonzero(pw.groups == g) for g in range(len(pw.group_masses))]
    without = [len(m) >= pw.group_masses[g] * bs for g, m in enumerate(members)]
    taken = [np.zeros(len(m), dtype=bool) for m in members]

    out = np.empty(bs, dtype=np.int64)
    for k in range(bs):
        # clamp covers cdf[-1] rounding to just below 1
        g = min(int(np.searchsorted(group_cdf, u[k, 0], side="right")), last)
        pool = members[g]
        if without[g]:
            free = np.flatnonzero(~taken[g])
            if len(free) == 0:
                taken[g][:] = False
                free = np.arange(len(pool))
            j = free[int(u[k, 1] * len(free))]
            taken[g][j] = True
        else:
            j = int(u[k, 1] * len(pool))
        out[k] = pool[j]
    return out


def ohem_select(is_positive, losses, batch_size: int, positive_ratio: float = 0.25,
                seed: int = 0) -> np.ndarray:
    """Online hard example mining with a fixed positive share.

    Positives fill ``round(positive_ratio * batch_size)`` slots (uniformly at
    random when there are more than that, all of them otherwise). The rest
    of the batch is the highest-loss negatives; equal losses resolve by
    proposal index.
    """
    is_positive = np.asarray(is_positive, dtype=bool)
    losses = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ValueError("OHEM needs finite losses")
    pos = np.flatnonzero(is_positive)
    neg = np.flatnonzero(~is_positive)
    quota = int(round(positive_ratio * batch_size))
    if len(pos) > quota:
        pos = np.sort(make_generator(seed).permutation(pos)[:quota])
    n_neg = batch_size - len(pos)
    order = np.argsort(-losses[neg], kind="stable")
    hard = neg[order[:n_neg]]
    return np.concatenate([pos, hard])
