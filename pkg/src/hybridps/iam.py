"""Per-sub-task domain alignment: gradient reversal, image-level and
instance-level domain classifiers, a consistency regularizer between the two,
and a linear-probe diagnostic for residual domain information.

One alignment bundle exists per sub-task (detection, re-ID); its domain class
space covers only that sub-task's source datasets. The detection bundle
consumes (encoder feature map, detection-head vectors); the re-ID bundle
consumes (pooled ROI maps, re-ID embeddings).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

TASK_DETECTION = "detection"
TASK_REID = "reid"


class ProbeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Gradient reversal
# ---------------------------------------------------------------------------

class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, alpha):
        ctx.alpha = alpha
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.alpha, None


def grl_apply(x: torch.Tensor, alpha: float) -> torch.Tensor:
    """Identity forward; backward multiplies the upstream gradient by -alpha."""
    return _ReverseGrad.apply(x, float(alpha))


class GradientReversal(nn.Module):
    def __init__(self, alpha=1.0):
        super().__init__()
        self.alpha = float(alpha)

    def forward(self, x):
        return grl_apply(x, self.alpha)


# ---------------------------------------------------------------------------
# Domain heads
# ---------------------------------------------------------------------------

class ImageDomainHead(nn.Module):
    """Two channel-halving convs, global average, then two FC layers."""

    def __init__(self, in_channels, num_domains):
        super().__init__()
        mid = max(8, in_channels // 2)
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, mid, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, 1, 1), nn.ReLU(inplace=True))
        self.fc = nn.Sequential(
            nn.Linear(mid, mid), nn.ReLU(inplace=True), nn.Linear(mid, num_domains))

    def forward(self, x):
        t = self.conv(x).mean(dim=(2, 3))
        return self.fc(t)


class InstanceDomainHead(nn.Module):
    """Two FC layers over per-instance feature vectors."""

    def __init__(self, in_dim, num_domains):
        super().__init__()
        mid = max(8, in_dim // 2)
        self.fc = nn.Sequential(
            nn.Linear(in_dim, mid), nn.ReLU(inplace=True), nn.Linear(mid, num_domains))

    def forward(self, x):
        return self.fc(x)


class IamBundle(nn.Module):
    """Gradient reversal + both domain heads for one sub-task."""

    def __init__(self, task, img_channels, ins_dim, domain_count, alpha=1.0):
        super().__init__()
        if task not in (TASK_DETECTION, TASK_REID):
            raise ValueError(f"unknown alignment task {task!r}")
        if domain_count < 1:
            raise ValueError("domain_count must be >= 1")
        self.task = task
        self.domain_count = int(domain_count)
        self.grl = GradientReversal(alpha)
        self.img_head = ImageDomainHead(img_channels, domain_count)
        self.ins_head = InstanceDomainHead(ins_dim, domain_count)

    @property
    def alpha(self):
        return self.grl.alpha

    @alpha.setter
    def alpha(self, v):
        self.grl.alpha = float(v)


def loss_adv(bundle: IamBundle, f_img: torch.Tensor, f_ins_list, domain_labels,
             use_grl: bool = True, alpha: float = None, return_detail: bool = False):
    """Adversarial domain losses for a batch routed to one bundle.

    f_img: (B, C, h, w) image-level features; f_ins_list: per-image tensors of
    per-instance vectors (possibly empty); domain_labels: (B,) ints. Both
    feature kinds pass through gradient reversal before their heads. Returns
    (l_img, l_ins, l_cst, counts); with return_detail the counts dict gains
    per-image / per-instance term breakdowns (for contribution accounting).
    """
    labels = torch.as_tensor(domain_labels, dtype=torch.long)
    if f_img.dim() == 3:
        f_img = f_img[None]
    if len(labels) != len(f_img):
        raise ValueError("one domain label per image required")
    if len(labels) and (labels.min() < 0 or labels.max() >= bundle.domain_count):
        raise ValueError(f"domain label outside [0, {bundle.domain_count})")
    a = bundle.alpha if alpha is None else float(alpha)

    def rev(x):
        return grl_apply(x, a) if use_grl else x

    img_logits = bundle.img_head(rev(f_img))
    img_ce = F.cross_entropy(img_logits, labels, reduction="none")
    l_img = img_ce.mean()

    ins_chunks, ins_labels, ins_owner = [], [], []
    for i, f in enumerate(f_ins_list):
        if f is not None and len(f):
            ins_chunks.append(f)
            ins_labels.append(torch.full((len(f),), int(labels[i]), dtype=torch.long))
            ins_owner.append(torch.full((len(f),), i, dtype=torch.long))
    counts = {"images": len(f_img), "instances": int(sum(len(c) for c in ins_chunks)),
              "empty_instance_images": int(len(f_img) - len(ins_chunks))}
    if ins_chunks:
        f_ins = torch.cat(ins_chunks, dim=0)
        y_ins = torch.cat(ins_labels)
        owner = torch.cat(ins_owner)
        ins_logits = bundle.ins_head(rev(f_ins))
        ins_ce = F.cross_entropy(ins_logits, y_ins, reduction="none")
        l_ins = ins_ce.mean()
        p_img = F.softmax(img_logits, dim=1)[owner]
        p_ins = F.softmax(ins_logits, dim=1)
        cst = ((p_img - p_ins) ** 2).sum(dim=1)
        l_cst = cst.mean()
    else:
        owner = torch.zeros(0, dtype=torch.long)
        ins_ce = img_logits.new_zeros(0)
        cst = img_logits.new_zeros(0)
        l_ins = img_logits.sum() * 0.0
        l_cst = img_logits.sum() * 0.0
    if return_detail:
        counts["img_ce"] = [float(v) for v in img_ce]
        counts["ins_ce"] = [float(v) for v in ins_ce]
        counts["ins_cst"] = [float(v) for v in cst]
        counts["ins_owner"] = [int(v) for v in owner]
    return l_img, l_ins, l_cst, counts


# ---------------------------------------------------------------------------
# Linear probe: how much domain information is left in frozen features
# ---------------------------------------------------------------------------

def probe_separability(features, domain_labels, seed=0, test_fraction=0.3) -> float:
    """Held-out accuracy of a fresh linear classifier predicting the domain."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split

    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(domain_labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ProbeError("domain probe needs at least two domains")
    xtr, xte, ytr, yte = train_test_split(
        x, y, test_size=test_fraction, random_state=int(seed) % (2**31), stratify=y)
    clf = LogisticRegression(max_iter=2000, random_state=int(seed) % (2**31))
    clf.fit(xtr, ytr)
    return float(clf.score(xte, yte))
