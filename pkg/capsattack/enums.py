from enum import Enum

__all__ = (
    "Precision",
    "ModelKind",
    "AttackFamily",
    "TargetHead",
    "VoteVariant",
    "LossKind",
    "AtMode",
    "MaskMode",
    "ClassSelector",
    "TwoStageSchedule",
)


class Precision(Enum):
    """Floating point width used by tensors and parameters."""

    single = "single"
    double = "double"


class ModelKind(Enum):
    capsnet = "capsnet"
    cnn_cr = "cnn-cr"
    cnn_r = "cnn-r"


class AttackFamily(Enum):
    fgsm = "fgsm"
    bim = "bim"
    pgd = "pgd"
    mim = "mim"


class TargetHead(Enum):
    """The output an attack computes its loss on."""

    logits = "logits"
    caps = "caps"
    votes = "votes"
    votes_v1 = "votes-v1"
    votes_v2 = "votes-v2"

    @property
    def bypasses_routing(self) -> bool:
        return self in (TargetHead.votes, TargetHead.votes_v1, TargetHead.votes_v2)


class VoteVariant(Enum):
    average_then_squash = "average-then-squash"
    squash_then_average = "squash-then-average"


class LossKind(Enum):
    margin = "margin"
    cross_entropy = "cross-entropy"


class AtMode(Enum):
    none = "none"
    caps = "caps"
    caps_votes = "caps+votes"
    votes_only = "votes-only"


class MaskMode(Enum):
    ground_truth = "ground-truth"
    winner = "winner"


class ClassSelector(Enum):
    ground_truth = "gt"
    largest_non_ground_truth = "l-ngt"


class TwoStageSchedule(Enum):
    alternate = "alternate"
    sequential = "sequential"
