"""The person search network: shared encoder, proposal stage, detection head,
re-ID embedding head, and the predictor MLP for the self-supervised branch.

Everything is desk-scale: a miniature stride-8 conv encoder stands in for a
large classification backbone, but it sits behind an interface (any module
with .stride/.out_channels) so bigger encoders plug in unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import box_iou, nms, roi_align

BACKGROUND = -1  # matched_gt sentinel


@dataclass
class ModelConfig:
    image_size: int = 64
    encoder: str = "mini"
    encoder_channels: tuple = (24, 32, 48, 64)
    embedding_dim: int = 128
    roi_resolution: int = 7
    anchor_scale: float = 26.0
    anchor_aspects: tuple = (0.4, 0.6)
    predictor_hidden: int = 32
    rpn_channels: int = 64
    pre_nms_topk: int = 96
    post_nms_topk: int = 24
    rpn_nms_iou: float = 0.7
    gt_jitter_copies: int = 2      # noisy gt copies appended as training ROIs
    gt_jitter_sigma: float = 0.08


# ---------------------------------------------------------------------------
# Output containers
# ---------------------------------------------------------------------------

@dataclass
class EncoderFeatures:
    fmap: torch.Tensor          # (C, h, w)
    stride: int


@dataclass
class RpnRaw:
    anchors: torch.Tensor       # (N, 4)
    logits: torch.Tensor        # (N,)
    deltas: torch.Tensor        # (N, 4)


@dataclass
class ProposalSet:
    boxes: torch.Tensor         # (N, 4), clipped to the image
    objectness: torch.Tensor    # (N,) in [0, 1]
    matched_gt: torch.Tensor | None = None   # (N,) long, BACKGROUND for none


@dataclass
class RoiFeatures:
    per_box_fmap: torch.Tensor  # (N, C, p, p)


@dataclass
class Embedding:
    vec: torch.Tensor           # (N, d) raw
    normalized: torch.Tensor    # (N, d) unit rows


@dataclass
class DetHeadOutput:
    class_logits: torch.Tensor  # (N, 2) person/background
    box_deltas: torch.Tensor    # (N, 4)
    det_vec: torch.Tensor       # (N, dv) detection feature vectors


@dataclass
class Prediction:
    vec: torch.Tensor           # (N, d)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

class MiniEncoder(nn.Module):
    """Four conv stages, total stride 8; GroupNorm keeps it batch-size free."""

    def __init__(self, channels=(24, 32, 48, 64)):
        super().__init__()
        c1, c2, c3, c4 = channels
        def block(cin, cout, stride):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride, 1),
                nn.GroupNorm(4, cout),
                nn.ReLU(inplace=True),
            )
        self.stages = nn.Sequential(
            block(3, c1, 2), block(c1, c2, 2), block(c2, c3, 2), block(c3, c4, 1))
        self.stride = 8
        self.out_channels = c4

    def forward(self, x):
        return self.stages(x)


ENCODERS = {"mini": MiniEncoder}


def register_encoder(name, factory):
    ENCODERS[name] = factory


# ---------------------------------------------------------------------------
# Box delta coding (standard parameterization)
# ---------------------------------------------------------------------------

def encode_deltas(ref, target):
    rw = (ref[:, 2] - ref[:, 0]).clamp(min=1e-4)
    rh = (ref[:, 3] - ref[:, 1]).clamp(min=1e-4)
    rx = ref[:, 0] + rw / 2
    ry = ref[:, 1] + rh / 2
    tw = (target[:, 2] - target[:, 0]).clamp(min=1e-4)
    th = (target[:, 3] - target[:, 1]).clamp(min=1e-4)
    tx = target[:, 0] + tw / 2
    ty = target[:, 1] + th / 2
    return torch.stack([(tx - rx) / rw, (ty - ry) / rh,
                        torch.log(tw / rw), torch.log(th / rh)], dim=1)


def decode_deltas(ref, deltas):
    rw = (ref[:, 2] - ref[:, 0]).clamp(min=1e-4)
    rh = (ref[:, 3] - ref[:, 1]).clamp(min=1e-4)
    rx = ref[:, 0] + rw / 2
    ry = ref[:, 1] + rh / 2
    lim = math.log(4.0)
    cx = rx + deltas[:, 0] * rw
    cy = ry + deltas[:, 1] * rh
    w = rw * torch.exp(deltas[:, 2].clamp(-lim, lim))
    h = rh * torch.exp(deltas[:, 3].clamp(-lim, lim))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def clip_to_image(boxes, size):
    b = boxes.clone()
    b[:, 0::2] = b[:, 0::2].clamp(0, size)
    b[:, 1::2] = b[:, 1::2].clamp(0, size)
    return b


def match_boxes(candidates, gt_boxes, thresh=0.5):
    """Best-gt assignment: index of the highest-IoU gt if that IoU >= thresh,
    else BACKGROUND. Ties resolve to the lowest gt index."""
    n = len(candidates)
    if len(gt_boxes) == 0 or n == 0:
        return torch.full((n,), BACKGROUND, dtype=torch.long)
    ious = box_iou(candidates, gt_boxes)
    best, idx = ious.max(dim=1)
    out = torch.where(best >= thresh, idx, torch.full_like(idx, BACKGROUND))
    return out.long()


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------

class PersonSearchModel(nn.Module):

    def __init__(self, config: ModelConfig = None, encoder: nn.Module = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        if encoder is None:
            encoder = ENCODERS[cfg.encoder](cfg.encoder_channels)
        self.encoder = encoder
        self.stride = encoder.stride
        c = encoder.out_channels
        a = len(cfg.anchor_aspects)

        self.rpn_conv = nn.Conv2d(c, cfg.rpn_channels, 3, 1, 1)
        self.rpn_cls = nn.Conv2d(cfg.rpn_channels, a, 1)
        self.rpn_reg = nn.Conv2d(cfg.rpn_channels, 4 * a, 1)

        p = cfg.roi_resolution
        dv = 128
        self.det_trunk = nn.Sequential(nn.Flatten(), nn.Linear(c * p * p, dv), nn.ReLU(inplace=True))
        self.det_cls = nn.Linear(dv, 2)
        self.det_reg = nn.Linear(dv, 4)

        d = cfg.embedding_dim
        self.reid_trunk = nn.Sequential(
            nn.Flatten(), nn.Linear(c * p * p, 2 * d), nn.ReLU(inplace=True), nn.Linear(2 * d, d))

        hidden = cfg.predictor_hidden
        self.predictor = nn.Sequential(
            nn.Linear(d, hidden), nn.LayerNorm(hidden), nn.ReLU(inplace=True), nn.Linear(hidden, d))

        self._anchor_cache = {}

    # -- encoder ------------------------------------------------------------

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Batched encoder forward, (B, 3, H, W) -> (B, C, h, w)."""
        return self.encoder(images)

    def encode(self, image: torch.Tensor) -> EncoderFeatures:
        """Single image (3, H, W) -> image-level features."""
        fmap = self.encoder(image[None])[0]
        return EncoderFeatures(fmap, self.stride)

    # -- proposal stage -------------------------------------------------------

    def anchors_for(self, h, w, device=None):
        key = (h, w)
        if key not in self._anchor_cache:
            cfg = self.config
            ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float32),
                                    torch.arange(w, dtype=torch.float32), indexing="ij")
            cx = (xs + 0.5) * self.stride
            cy = (ys + 0.5) * self.stride
            anchors = []
            for a in cfg.anchor_aspects:
                aw = cfg.anchor_scale * math.sqrt(a)
                ah = cfg.anchor_scale / math.sqrt(a)
                anchors.append(torch.stack(
                    [cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2], dim=-1))
            # (h, w, A, 4) -> (h*w*A, 4)
            self._anchor_cache[key] = torch.stack(anchors, dim=2).reshape(-1, 4)
        return self._anchor_cache[key]

    def rpn_forward(self, fmap: torch.Tensor) -> RpnRaw:
        """Anchor scores and regressions for one image's feature map (C, h, w)."""
        return self.rpn_forward_batch(fmap[None])[0]

    def rpn_forward_batch(self, fmaps: torch.Tensor) -> list:
        """Batched variant of rpn_forward; one RpnRaw per image."""
        b = len(fmaps)
        t = F.relu(self.rpn_conv(fmaps))
        logits = self.rpn_cls(t).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.rpn_reg(t).permute(0, 2, 3, 1).reshape(b, -1, 4)
        h, w = fmaps.shape[2:]
        anchors = self.anchors_for(h, w).to(fmaps.device)
        return [RpnRaw(anchors, logits[i], deltas[i]) for i in range(b)]


    def propose(self, feats: EncoderFeatures, gt_boxes=None, training=False,
                rpn_raw: RpnRaw = None) -> ProposalSet:
        """Scored, NMS-filtered proposals; in training, ground-truth boxes are
        appended (guaranteeing positive ROIs) and matched_gt is filled by the
        IoU >= 0.5 best-match rule."""
        cfg = self.config
        if rpn_raw is None:
            rpn_raw = self.rpn_forward(feats.fmap)
        with torch.no_grad():
            scores = torch.sigmoid(rpn_raw.logits)
            boxes = decode_deltas(rpn_raw.anchors, rpn_raw.deltas)
            boxes = clip_to_image(boxes, cfg.image_size)
            k = min(cfg.pre_nms_topk, len(scores))
            top_scores, order = scores.topk(k)
            top_boxes = boxes[order]
            wide = (top_boxes[:, 2] - top_boxes[:, 0] >= 1) & (top_boxes[:, 3] - top_boxes[:, 1] >= 1)
            top_boxes, top_scores = top_boxes[wide], top_scores[wide]
            keep = nms(top_boxes, top_scores, cfg.rpn_nms_iou)[: cfg.post_nms_topk]
            p_boxes = top_boxes[keep]
            p_scores = top_scores[keep]
            if training:
                gt = torch.as_tensor(gt_boxes, dtype=torch.float32) if gt_boxes is not None else None
                if gt is not None and len(gt):
                    p_boxes = torch.cat([p_boxes, gt], dim=0)
                    p_scores = torch.cat([p_scores, torch.ones(len(gt))], dim=0)
                matched = match_boxes(p_boxes, gt if gt is not None else torch.zeros(0, 4), 0.5)
                return ProposalSet(p_boxes, p_scores, matched)
            return ProposalSet(p_boxes, p_scores, None)

    # -- heads ----------------------------------------------------------------

    def roi_features(self, fmap: torch.Tensor, boxes) -> RoiFeatures:
        """ROI-Align pooling; fmap (C, h, w) or batched with per-image box lists."""
        if fmap.dim() == 3:
            fmap = fmap[None]
            boxes = [boxes]
        boxes = [(b.to(torch.float32) if isinstance(b, torch.Tensor)
                  else torch.as_tensor(np.asarray(b, dtype=np.float32))).reshape(-1, 4)
                 for b in boxes]
        pooled = roi_align(fmap, boxes, output_size=self.config.roi_resolution,
                           spatial_scale=1.0 / self.stride, aligned=True)
        return RoiFeatures(pooled)

    def detect(self, roi: RoiFeatures) -> DetHeadOutput:
        x = roi.per_box_fmap
        if len(x) == 0:
            dv = self.det_cls.in_features
            z = x.new_zeros((0, dv))
            return DetHeadOutput(x.new_zeros((0, 2)), x.new_zeros((0, 4)), z)
        v = self.det_trunk(x)
        return DetHeadOutput(self.det_cls(v), self.det_reg(v), v)

    def embed(self, roi: RoiFeatures) -> Embedding:
        x = roi.per_box_fmap
        d = self.config.embedding_dim
        if len(x) == 0:
            return Embedding(x.new_zeros((0, d)), x.new_zeros((0, d)))
        raw = self.reid_trunk(x)
        return Embedding(raw, F.normalize(raw, dim=1, eps=1e-12))

    def predict_mlp(self, h: torch.Tensor) -> Prediction:
        return Prediction(self.predictor(h))

    # -- inference --------------------------------------------------------------

    @torch.no_grad()
    def forward_search(self, image: torch.Tensor, score_threshold=0.5,
                       nms_iou=0.4, max_detections=10):
        """Detections above threshold with their normalized embeddings."""
        was_training = self.training
        self.eval()
        try:
            feats = self.encode(image)
            props = self.propose(feats, training=False)
            if len(props.boxes) == 0:
                d = self.config.embedding_dim
                return (ProposalSet(props.boxes, props.objectness, None),
                        torch.zeros((0, d)))
            roi = self.roi_features(feats.fmap, props.boxes)
            det = self.detect(roi)
            person_prob = F.softmax(det.class_logits, dim=1)[:, 1]
            refined = clip_to_image(decode_deltas(props.boxes, det.box_deltas),
                                    self.config.image_size)
            keep = nms(refined, person_prob, nms_iou)
            keep = keep[person_prob[keep] > score_threshold][:max_detections]
            boxes = refined[keep]
            scores = person_prob[keep]
            if len(boxes) == 0:
                d = self.config.embedding_dim
                return ProposalSet(boxes, scores, None), torch.zeros((0, d))
            emb = self.embed(self.roi_features(feats.fmap, boxes))
            return ProposalSet(boxes, scores, None), emb.normalized
        finally:
            self.train(was_training)

    def query_embedding(self, image: torch.Tensor, box) -> torch.Tensor:
        """Normalized embedding of one ground-truth box (the query primitive)."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                feats = self.encode(image)
                emb = self.embed(self.roi_features(feats.fmap, [list(map(float, box))]))
                return emb.normalized[0]
        finally:
            self.train(was_training)


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))
