"""Loss stack: detection losses, OIM re-ID loss with its prototype table,
negative-cosine self-supervision with stop-gradient, and total assembly.

Per-batch means replace corpus-level sums everywhere: that rescales the loss
but not its minimizers, and is what minibatch optimization needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .model import BACKGROUND, RpnRaw, DetHeadOutput, encode_deltas
from .utils import torch_gen_for
from torchvision.ops import box_iou


class TrainingAbort(RuntimeError):
    """A loss term went non-finite; training must stop with diagnostics."""


class NumericalGuardError(ValueError):
    pass


@dataclass
class HyperParams:
    eta: float = 1.0          # weight of the self-supervised consistency loss
    lam: float = 0.1          # weight of the adversarial alignment loss
    gamma: float = 0.5        # prototype momentum
    tau: float = 1.0 / 30.0   # softmax temperature

    def check(self):
        import math
        for name in ("eta", "lam", "gamma", "tau"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"hyper-parameter {name} not finite: {v}")
        if self.eta < 0 or self.lam < 0:
            raise ValueError("loss weights must be >= 0")
        if not (0 < self.gamma < 1):
            raise ValueError(f"momentum gamma must be in (0,1), got {self.gamma}")
        if self.tau <= 0:
            raise ValueError(f"temperature tau must be positive, got {self.tau}")
        return self


# ---------------------------------------------------------------------------
# OIM: prototype table + lookup loss
# ---------------------------------------------------------------------------

class OimTable:
    """L2-normalized per-identity prototypes with momentum updates.

    Rows are initialized to random unit vectors so the unit-norm invariant
    holds from step zero, before any update has touched a row.
    """

    def __init__(self, num_identities, dim, gamma=0.5, tau=1.0 / 30.0, seed=0):
        if num_identities <= 0:
            raise ValueError("identity space must be non-empty")
        g = torch_gen_for(seed, "oim-init")
        protos = torch.randn(num_identities, dim, generator=g, dtype=torch.float32)
        self.prototypes = F.normalize(protos, dim=1, eps=1e-12)
        self.gamma = float(gamma)
        self.tau = float(tau)

    @property
    def num_identities(self):
        return self.prototypes.shape[0]

    def logits(self, emb_normalized: torch.Tensor) -> torch.Tensor:
        # clone so the in-place momentum update cannot invalidate the backward graph
        return emb_normalized @ self.prototypes.t().clone() / self.tau

    @torch.no_grad()
    def update(self, emb_normalized: torch.Tensor, identities: torch.Tensor):
        emb = emb_normalized.detach()
        for e, gid in zip(emb, identities.tolist()):
            mixed = self.gamma * self.prototypes[gid] + (1.0 - self.gamma) * e
            self.prototypes[gid] = F.normalize(mixed, dim=0, eps=1e-12)

    def state_dict(self):
        return {"prototypes": self.prototypes.clone(), "gamma": self.gamma, "tau": self.tau}

    def load_state_dict(self, state):
        self.prototypes = state["prototypes"].clone()
        self.gamma = float(state["gamma"])
        self.tau = float(state["tau"])


def loss_oim(emb_normalized: torch.Tensor, identities, table: OimTable,
             update: bool = True, reduction: str = "mean") -> torch.Tensor:
    """Softmax cross-entropy over prototype cosines; table updated afterwards.

    The momentum update is applied after the loss is formed and is never
    differentiated through. reduction "none" gives the per-box terms (used
    for contribution accounting).
    """
    ids = torch.as_tensor(identities, dtype=torch.long)
    if len(ids) != len(emb_normalized):
        raise ValueError("one identity per embedding required")
    if len(ids) == 0:
        z = torch.zeros((), dtype=torch.float32)
        return z if reduction == "mean" else z.reshape(0)
    if ids.min() < 0 or ids.max() >= table.num_identities:
        raise ValueError(
            f"identity out of range [0, {table.num_identities}): {ids.min()}..{ids.max()}")
    norms = emb_normalized.detach().norm(dim=1)
    if (norms - 1.0).abs().max() > 1e-3:
        raise ValueError("embeddings must be L2-normalized before the OIM loss")
    loss = F.cross_entropy(table.logits(emb_normalized), ids, reduction=reduction)
    if update:
        table.update(emb_normalized, ids)
    return loss


# ---------------------------------------------------------------------------
# Detection losses
# ---------------------------------------------------------------------------

def rpn_loss_parts(rpn_raw: RpnRaw, gt_boxes, pos_iou=0.5, neg_iou=0.3):
    """Objectness + box regression terms for one image's anchors.

    All anchors contribute to the (pos/neg balanced) objectness term; anchors
    between the thresholds are ignored. Regression runs on positives only, so
    a zero-gt image contributes exactly zero regression loss.
    """
    anchors = rpn_raw.anchors
    dtype = rpn_raw.logits.dtype
    gt = torch.as_tensor(gt_boxes, dtype=anchors.dtype).reshape(-1, 4)
    n = len(anchors)
    labels = torch.zeros(n, dtype=dtype)
    ignore = torch.zeros(n, dtype=torch.bool)
    matched = torch.zeros(n, dtype=torch.long)
    if len(gt):
        ious = box_iou(anchors, gt)
        best, idx = ious.max(dim=1)
        labels = (best >= pos_iou).to(dtype)
        ignore = (best >= neg_iou) & (best < pos_iou)
        matched = idx
        # every gt owns its best anchor even below threshold
        best_anchor = ious.argmax(dim=0)
        labels[best_anchor] = 1.0
        ignore[best_anchor] = False
        matched[best_anchor] = torch.arange(len(gt))
    pos = (labels == 1.0) & ~ignore
    neg = (labels == 0.0) & ~ignore
    weights = torch.zeros(n, dtype=dtype)
    if pos.any():
        weights[pos] = 0.5 / pos.sum()
    if neg.any():
        weights[neg] = (0.5 if pos.any() else 1.0) / neg.sum()
    l_obj = (F.binary_cross_entropy_with_logits(rpn_raw.logits, labels, reduction="none")
             * weights).sum()
    if pos.any():
        targets = encode_deltas(anchors[pos], gt[matched[pos]])
        l_reg = F.smooth_l1_loss(rpn_raw.deltas[pos], targets)
    else:
        l_reg = rpn_raw.deltas.sum() * 0.0
    return l_obj, l_reg


def rpn_loss_single(rpn_raw: RpnRaw, gt_boxes, pos_iou=0.5, neg_iou=0.3) -> torch.Tensor:
    l_obj, l_reg = rpn_loss_parts(rpn_raw, gt_boxes, pos_iou, neg_iou)
    return l_obj + l_reg


def det_head_loss_parts(det_out: DetHeadOutput, proposal_boxes, matched_gt, gt_boxes):
    """Two-class cross-entropy over all kept proposals + smooth-L1 on positives."""
    matched = torch.as_tensor(matched_gt, dtype=torch.long)
    if len(matched) == 0:
        z = det_out.class_logits.sum() * 0.0
        return z, z.clone()
    labels = (matched != BACKGROUND).long()
    l_cls = F.cross_entropy(det_out.class_logits, labels)
    pos = matched >= 0
    if pos.any():
        dtype = det_out.box_deltas.dtype
        gt = torch.as_tensor(gt_boxes, dtype=dtype).reshape(-1, 4)
        props = torch.as_tensor(proposal_boxes, dtype=dtype)
        targets = encode_deltas(props[pos], gt[matched[pos]])
        l_reg = F.smooth_l1_loss(det_out.box_deltas[pos], targets)
    else:
        l_reg = det_out.box_deltas.sum() * 0.0
    return l_cls, l_reg


def det_head_loss_single(det_out: DetHeadOutput, proposal_boxes, matched_gt,
                         gt_boxes) -> torch.Tensor:
    l_cls, l_reg = det_head_loss_parts(det_out, proposal_boxes, matched_gt, gt_boxes)
    return l_cls + l_reg


def loss_det(per_image) -> tuple:
    """Batch detection loss from per-image pieces.

    per_image: iterable of (rpn_raw, det_out, proposal_boxes, matched_gt, gt_boxes).
    Returns (l_rpn, l_det_head), each averaged per image then per batch.
    """
    rpn_terms, head_terms = [], []
    for rpn_raw, det_out, boxes, matched, gt in per_image:
        rpn_terms.append(rpn_loss_single(rpn_raw, gt))
        head_terms.append(det_head_loss_single(det_out, boxes, matched, gt))
    if not rpn_terms:
        z = torch.zeros(())
        return z, z.clone()
    return torch.stack(rpn_terms).mean(), torch.stack(head_terms).mean()


# ---------------------------------------------------------------------------
# Self-supervised branch
# ---------------------------------------------------------------------------

def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


def neg_cosine(h: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity, batch-meaned; raises on zero-norm input."""
    if h.dim() == 1:
        h = h[None]
    if z.dim() == 1:
        z = z[None]
    with torch.no_grad():
        hn = float(h.norm(dim=1).min())
        zn = float(z.norm(dim=1).min())
    if hn < 1e-8 or zn < 1e-8:
        raise NumericalGuardError("zero-norm vector in cosine similarity")
    return -(F.normalize(h, dim=1) * F.normalize(z, dim=1)).sum(dim=1).mean()


def loss_con(h1: torch.Tensor, z1: torch.Tensor,
             h2: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Symmetrized stop-gradient cosine loss over a view pair."""
    return 0.5 * neg_cosine(stop_gradient(h2), z1) + 0.5 * neg_cosine(stop_gradient(h1), z2)


# ---------------------------------------------------------------------------
# Total loss assembly
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    l_rpn: float
    l_det_head: float
    l_det: float
    l_reid: float
    l_ps: float
    l_con: float
    l_adv: float
    l_total: float
    counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"l_rpn": self.l_rpn, "l_det_head": self.l_det_head, "l_det": self.l_det,
                "l_reid": self.l_reid, "l_ps": self.l_ps, "l_con": self.l_con,
                "l_adv": self.l_adv, "l_total": self.l_total, "counts": self.counts}

    @classmethod
    def from_json(cls, d) -> "LossReport":
        return cls(d["l_rpn"], d["l_det_head"], d["l_det"], d["l_reid"], d["l_ps"],
                   d["l_con"], d["l_adv"], d["l_total"], d.get("counts", {}))


def total_loss(parts: dict, hp: HyperParams, counts: dict = None):
    """Assemble the hybrid objective.

    parts maps term name -> scalar tensor. The detection term may arrive
    split ("l_rpn" / "l_det_head", the trainer's form) or as one "l_det";
    an unsplit l_det is attributed to the l_rpn slot and flagged in counts.
    Missing terms enter as zero with a flag. Returns (differentiable total,
    LossReport); report arithmetic is redone in float64 so its internal
    identities hold exactly.
    """
    counts = dict(counts or {})
    parts = dict(parts)
    if "l_det" in parts:
        if "l_rpn" in parts or "l_det_head" in parts:
            raise ValueError("pass either l_det or the l_rpn/l_det_head split, not both")
        parts["l_rpn"] = parts.pop("l_det")
        counts["l_det_unsplit"] = 1
    terms = {}
    for name in ("l_rpn", "l_det_head", "l_reid", "l_con", "l_adv"):
        t = parts.get(name)
        if t is None:
            t = torch.zeros(())
            counts[f"{name}_absent"] = 1
        if not torch.isfinite(t).all():
            raise TrainingAbort(f"non-finite loss term {name}: {float(t)}")
        terms[name] = t
    total = (terms["l_rpn"] + terms["l_det_head"] + terms["l_reid"]
             + hp.eta * terms["l_con"] + hp.lam * terms["l_adv"])
    l_rpn = float(terms["l_rpn"].detach())
    l_det_head = float(terms["l_det_head"].detach())
    l_reid = float(terms["l_reid"].detach())
    l_con = float(terms["l_con"].detach())
    l_adv = float(terms["l_adv"].detach())
    l_det = l_rpn + l_det_head
    l_ps = l_reid + l_det
    report = LossReport(l_rpn, l_det_head, l_det, l_reid, l_ps, l_con, l_adv,
                        l_ps + hp.eta * l_con + hp.lam * l_adv, counts)
    return total, report
