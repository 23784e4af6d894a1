"""Independent oracles used across the test suite.

Everything here is intentionally the slow, obvious implementation (explicit
loops, exhaustive enumeration, central differences) and stays independent of
the library's own vectorized code paths.
"""

import numpy as np
import torch


def finite_diff_grad(fn, x: torch.Tensor, eps=1e-4) -> torch.Tensor:
    """Central-difference gradient of a scalar function of one tensor."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            fp = float(fn(x))
            flat[i] = orig - eps
            fm = float(fn(x))
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.reshape(-1).double()
    b = b.reshape(-1).double()
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def autograd_vs_fd(fn, x: torch.Tensor, eps=1e-4) -> float:
    """Relative error between autograd and central differences at x."""
    leaf = x.clone().double().requires_grad_(True)
    loss = fn(leaf)
    (grad,) = torch.autograd.grad(loss, leaf)
    fd = finite_diff_grad(lambda t: fn(t), x.clone().double(), eps)
    return rel_err(grad, fd)


def brute_force_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = [float(v) for v in a]
    bx0, by0, bx1, by1 = [float(v) for v in b]
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    ua = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / ua if ua > 0 else 0.0


def brute_force_match(candidates, gt_boxes, thresh=0.5):
    """O(N*M) assignment with first-max tie-breaking, mirroring the contract."""
    out = []
    for c in candidates:
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gt_boxes):
            iou = brute_force_iou(c, g)
            if iou > best_iou:
                best_iou, best_j = iou, j
        out.append(best_j if best_iou >= thresh else -1)
    return out


# ---------------------------------------------------------------------------
# Retrieval metric oracle (exhaustive)
# ---------------------------------------------------------------------------

def oracle_rank_and_score(query_emb, gallery):
    """Exhaustive pairwise similarity ranking.

    gallery: list of (image_id, box, embedding). Returns the candidate list
    sorted by descending similarity with stable order on ties.
    """
    sims = []
    for k, (img_id, box, emb) in enumerate(gallery):
        s = float(np.dot(np.asarray(query_emb, dtype=np.float64),
                         np.asarray(emb, dtype=np.float64)))
        sims.append((-s, k, img_id, box, s))
    sims.sort(key=lambda t: (t[0], t[1]))
    return [(img_id, box, s) for (_, _, img_id, box, s) in sims]


def oracle_query_metrics(ranked, gt_by_image, query_identity, iou_thresh=0.5):
    """AP and first-hit rank for one query by explicit scanning.

    ranked: [(image_id, box, similarity)] best-first. gt_by_image maps
    image_id -> list of (box, identity). A candidate is a hit when it overlaps
    an unclaimed ground-truth box of the query identity at >= iou_thresh;
    later duplicates on a claimed ground truth count as misses.
    """
    total_pos = sum(1 for img_id, items in gt_by_image.items()
                    for (_, ident) in items if ident == query_identity)
    claimed = set()
    hits = 0
    precisions = []
    first_hit_rank = None
    for rank, (img_id, box, _) in enumerate(ranked, start=1):
        matched = False
        for j, (gbox, ident) in enumerate(gt_by_image.get(img_id, [])):
            if ident != query_identity or (img_id, j) in claimed:
                continue
            if brute_force_iou(box, gbox) >= iou_thresh:
                claimed.add((img_id, j))
                matched = True
                break
        if matched:
            hits += 1
            precisions.append(hits / rank)
            if first_hit_rank is None:
                first_hit_rank = rank
    ap = sum(precisions) / total_pos if total_pos > 0 else 0.0
    return ap, first_hit_rank, total_pos
