"""Training losses for continual segmentation with independent class channels.

Every known class channel is routed to exactly one branch per step: classes
owned by earlier tasks are distilled from teacher logits (Bernoulli KL on
the presence and mask sigmoids, or supervised against hard pseudo labels
decoded from the teacher), and current-task classes are supervised against
the relabeled ground truth (mask BCE + dice + presence BCE).

All functions are pure in their inputs; teacher tensors are detached on
entry so gradients only reach the student.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractError, RoutingError
from .model import LogitBundle, semantic_decode
from .schedule import TaskSchedule

DISTILL_MODES = ("soft", "pseudo")
_EPS = 1e-6
_DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class DistillConfig:
    lambda1: float = 1.0  # class (presence) KD weight
    lambda2: float = 1.0  # mask KD weight
    temperature: float = 1.0
    mode: str = "soft"
    pseudo_threshold: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.mode not in DISTILL_MODES:
            raise ValueError(f"mode must be one of {DISTILL_MODES}")
        if not 0.0 < self.pseudo_threshold < 1.0:
            raise ValueError("pseudo_threshold must lie in (0,1)")

    def to_json_dict(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "temperature": self.temperature,
            "mode": self.mode,
            "pseudo_threshold": self.pseudo_threshold,
        }


@dataclass
class LossReport:
    """Scalar breakdown of one optimization step.

    Invariant: total == supervised_term + lambda1*distill_class_term
    + lambda2*distill_mask_term (up to float roundoff). `total_tensor`
    carries the autograd graph and is excluded from serialization.
    """

    total: float
    supervised_term: float
    distill_class_term: float
    distill_mask_term: float
    per_class: dict[int, float]
    routing: dict[int, str]
    no_teacher: bool
    total_tensor: torch.Tensor | None = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "total": self.total,
            "supervised_term": self.supervised_term,
            "distill_class_term": self.distill_class_term,
            "distill_mask_term": self.distill_mask_term,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "routing": {str(k): v for k, v in sorted(self.routing.items())},
            "no_teacher": self.no_teacher,
        }


def kl_bernoulli(p: torch.Tensor, q: torch.Tensor, eps: float = _EPS) -> torch.Tensor:
    """Elementwise KL(Bernoulli(p) || Bernoulli(q)).

    p*ln(p/q) + (1-p)*ln((1-p)/(1-q)) with 0*ln0 := 0; q is clamped to
    [eps, 1-eps] so the result is finite and differentiable in q.
    """
    if not isinstance(p, torch.Tensor):
        p = torch.as_tensor(p, dtype=torch.float64)
    if not isinstance(q, torch.Tensor):
        q = torch.as_tensor(q, dtype=torch.float64)
    dtype = torch.promote_types(p.dtype, q.dtype)
    p = p.to(dtype)
    q = q.to(dtype).clamp(eps, 1.0 - eps)
    return (
        torch.xlogy(p, p)
        - torch.xlogy(p, q)
        + torch.xlogy(1.0 - p, 1.0 - p)
        - torch.xlogy(1.0 - p, 1.0 - q)
    )


@dataclass
class DistillTerms:
    class_term: torch.Tensor  # scalar
    mask_term: torch.Tensor  # scalar
    per_class: dict[int, float]


@dataclass
class SupervisedTerms:
    value: torch.Tensor  # scalar
    per_class: dict[int, float]


def distill_loss(
    teacher: LogitBundle, student: LogitBundle, old_class_ids, cfg: DistillConfig
) -> DistillTerms:
    """Presence-level and mask-level Bernoulli KL from teacher to student,
    averaged over the old classes (and pixels/batch for the mask term)."""
    old_class_ids = [int(c) for c in old_class_ids]
    if not old_class_ids:
        zero = torch.zeros(())
        return DistillTerms(zero, zero.clone(), {})
    teacher = teacher.restrict(old_class_ids).detach()  # raises on missing channels
    student = student.restrict(old_class_ids)
    if teacher.mask_logits.shape != student.mask_logits.shape:
        raise ContractError(
            f"teacher/student mask shapes differ: "
            f"{tuple(teacher.mask_logits.shape)} vs {tuple(student.mask_logits.shape)}"
        )
    t = cfg.temperature
    p_pres = torch.sigmoid(teacher.presence_logits / t)
    q_pres = torch.sigmoid(student.presence_logits / t)
    p_mask = torch.sigmoid(teacher.mask_logits / t)
    q_mask = torch.sigmoid(student.mask_logits / t)

    batched = student.batched
    # per-class means first so the breakdown is consistent with the totals
    pres_kl = kl_bernoulli(p_pres, q_pres)  # [..., K]
    mask_kl = kl_bernoulli(p_mask, q_mask)  # [..., K, H, W]
    pres_per_class = pres_kl.mean(dim=0) if batched else pres_kl
    reduce_dims = (0, -2, -1) if batched else (-2, -1)
    mask_per_class = mask_kl.mean(dim=reduce_dims)
    per_class = {
        c: float(pres_per_class[i].detach()) + float(mask_per_class[i].detach())
        for i, c in enumerate(old_class_ids)
    }
    return DistillTerms(
        class_term=pres_per_class.mean(),
        mask_term=mask_per_class.mean(),
        per_class=per_class,
    )


def _as_label_tensor(gt) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(gt))
    if not t.dtype.is_floating_point:
        return t.long()
    raise ContractError("label map must be integer-typed")


def supervised_loss(student: LogitBundle, gt, new_class_ids) -> SupervisedTerms:
    """Per new class: mask BCE against (gt == c), dice on the same pair, and
    presence BCE against image-level occurrence; averaged over new classes.
    """
    new_class_ids = [int(c) for c in new_class_ids]
    labels = _as_label_tensor(gt)
    allowed = set(new_class_ids) | {0}
    present = set(int(v) for v in torch.unique(labels))
    if not present.issubset(allowed):
        raise ContractError(
            f"label map contains ids {sorted(present - allowed)} outside {{0}} + new classes"
        )
    if not new_class_ids:
        return SupervisedTerms(torch.zeros(()), {})
    student = student.restrict(new_class_ids)
    if labels.shape != student.mask_logits.shape[:-3] + student.mask_logits.shape[-2:]:
        raise ContractError(
            f"label shape {tuple(labels.shape)} does not match mask logits "
            f"{tuple(student.mask_logits.shape)}"
        )
    spatial = (-2, -1)
    terms = []
    per_class = {}
    for i, c in enumerate(new_class_ids):
        mask_logit = student.mask_logits[..., i, :, :]
        target = (labels == c).to(mask_logit.dtype)
        bce = torch.nn.functional.binary_cross_entropy_with_logits(mask_logit, target)
        prob = torch.sigmoid(mask_logit)
        inter = (prob * target).sum(dim=spatial)
        tgt_sum = target.sum(dim=spatial)
        denom = prob.sum(dim=spatial) + tgt_sum
        per_image = 1.0 - (2.0 * inter + _DICE_SMOOTH) / (denom + _DICE_SMOOTH)
        # overlap quality is only defined where the class occurs; absent
        # images are already driven to empty masks by the BCE term
        present_w = (tgt_sum > 0).to(per_image.dtype)
        dice = (per_image * present_w).sum() / present_w.sum().clamp(min=1.0)
        pres_logit = student.presence_logits[..., i]
        pres_target = target.amax(dim=spatial)
        pres_bce = torch.nn.functional.binary_cross_entropy_with_logits(pres_logit, pres_target)
        term = bce + dice + pres_bce
        per_class[c] = float(term.detach())
        terms.append(term)
    return SupervisedTerms(value=torch.stack(terms).mean(), per_class=per_class)


def pseudo_targets(teacher: LogitBundle, threshold: float = 0.5) -> np.ndarray:
    """Hard label map decoded from the teacher; the supervision target for
    old classes in pseudo mode."""
    return semantic_decode(teacher, tau=threshold)


def _pseudo_old_labels(gt_labels: torch.Tensor, teacher: LogitBundle, old_ids, threshold) -> np.ndarray:
    """Old-class supervision map: teacher pseudo labels, except pixels that
    carry current-task ground truth, which are background for old channels."""
    pseudo = pseudo_targets(teacher.restrict(old_ids), threshold)
    return np.where(gt_labels.cpu().numpy() > 0, 0, pseudo).astype(np.int32)


def total_loss(
    student: LogitBundle,
    gt,
    teacher_targets: LogitBundle | None,
    schedule: TaskSchedule,
    task_index: int,
    cfg: DistillConfig,
) -> LossReport:
    """Route every student channel to exactly one branch: distillation for
    classes owned by tasks < task_index, supervision for the current group.
    At task 0 there is no teacher and the total is the supervised term."""
    old_ids = list(schedule.old_classes(task_index))
    new_ids = list(schedule.groups[task_index].class_ids)
    expected = set(old_ids) | set(new_ids)
    got = set(student.class_ids)
    if got != expected:
        raise RoutingError(
            f"student channels {sorted(got)} do not partition into "
            f"old {old_ids} + new {new_ids}"
        )
    routing = {c: "distill" for c in old_ids}
    routing.update({c: "supervised" for c in new_ids})
    if len(routing) != len(old_ids) + len(new_ids):
        raise RoutingError("a class is routed to both branches")

    no_teacher = task_index == 0
    if no_teacher:
        if teacher_targets is not None and len(teacher_targets.class_ids) > 0:
            raise RoutingError("task 0 takes no teacher targets")
    else:
        if teacher_targets is None:
            raise RoutingError(f"task {task_index} needs teacher targets for {old_ids}")
        if set(teacher_targets.class_ids) != set(old_ids):
            raise RoutingError(
                f"teacher covers {sorted(teacher_targets.class_ids)}, expected exactly {old_ids}"
            )

    sup = supervised_loss(student, gt, new_ids)
    per_class = dict(sup.per_class)
    zero = torch.zeros((), dtype=student.mask_logits.dtype)
    class_term, mask_term = zero, zero.clone()
    extra_sup = None
    if not no_teacher:
        if cfg.mode == "soft":
            distill = distill_loss(teacher_targets, student, old_ids, cfg)
            class_term, mask_term = distill.class_term, distill.mask_term
            per_class.update(distill.per_class)
        else:
            labels = _as_label_tensor(gt)
            old_map = _pseudo_old_labels(labels, teacher_targets, old_ids, cfg.pseudo_threshold)
            extra_sup = supervised_loss(student, old_map, old_ids)
            per_class.update(extra_sup.per_class)

    supervised_total = sup.value if extra_sup is None else sup.value + extra_sup.value
    total = supervised_total + cfg.lambda1 * class_term + cfg.lambda2 * mask_term
    return LossReport(
        total=float(total.detach()),
        supervised_term=float(supervised_total.detach()),
        distill_class_term=float(class_term.detach()),
        distill_mask_term=float(mask_term.detach()),
        per_class=per_class,
        routing=routing,
        no_teacher=no_teacher,
        total_tensor=total,
    )
