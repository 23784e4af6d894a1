"""Person search evaluation and experiment harnesses.

Evaluation follows the whole-gallery protocol: every eval image is searched
for every query, a candidate counts as correct when it overlaps a ground-truth
box of the query identity at IoU >= 0.5 in that image, and duplicate
detections beyond the first match count as misses. Harnesses cover the
fine-tuning-fraction study, the alignment on/off study and the re-ID
placement-operation ablation.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import TrainConfig, parse_train_config
from .corpus import load_manifest
from .iam import probe_separability
from .model import PersonSearchModel, image_to_tensor
from .trainer import (
    Checkpoint,
    CheckpointError,
    Registry,
    TrainerError,
    finetune,
    load_checkpoint,
    load_pretrain_registry,
    pretrain,
)
from .unification import fit_scene
from .utils import atomic_write_text, canonical_json, iou_matrix, load_image, rng_for


# ---------------------------------------------------------------------------
# Gallery / query structures
# ---------------------------------------------------------------------------

@dataclass
class GalleryEntry:
    image_id: str
    boxes: np.ndarray        # (M, 4) detections
    embeddings: np.ndarray   # (M, d) unit rows
    scores: np.ndarray       # (M,)


@dataclass
class GalleryIndex:
    entries: list

    @property
    def num_detections(self):
        return sum(len(e.boxes) for e in self.entries)


@dataclass
class Query:
    image_id: str
    box: tuple
    identity: int
    positive_images: set     # other gallery images containing the identity


@dataclass
class QuerySet:
    queries: list
    gt_by_image: dict        # image_id -> list of (box, identity)


@dataclass
class EvalReport:
    map: float
    top_k: dict
    det_recall: float
    det_ap: float
    num_queries: int
    num_gallery_images: int
    num_detections: int
    per_query: list = field(default_factory=list)

    def __post_init__(self):
        ks = sorted(self.top_k)
        for a, b in zip(ks, ks[1:]):
            assert self.top_k[a] <= self.top_k[b] + 1e-12, "top-k must be monotone in k"

    def to_json(self):
        return {"map": self.map, "top_k": {str(k): v for k, v in self.top_k.items()},
                "det_recall": self.det_recall, "det_ap": self.det_ap,
                "num_queries": self.num_queries,
                "num_gallery_images": self.num_gallery_images,
                "num_detections": self.num_detections}


@dataclass
class EvalScene:
    image_id: str
    image: np.ndarray        # training-size float32
    boxes: np.ndarray
    identities: np.ndarray


def load_eval_scenes(manifest_path, training_size) -> list:
    m = load_manifest(manifest_path)
    if m.kind != "detection":
        raise TrainerError("evaluation corpus must be a detection-kind manifest")
    scenes = []
    for rec in m.records:
        if rec.identities is None:
            raise TrainerError(f"evaluation record {rec.image_path} has no identities")
        img, boxes = fit_scene(load_image(m.resolve(rec)), rec.boxes, training_size)
        scenes.append(EvalScene(rec.image_path, img, boxes,
                                np.asarray(rec.identities, dtype=np.int64)))
    return scenes


# ---------------------------------------------------------------------------
# Gallery building and search
# ---------------------------------------------------------------------------

def build_gallery(model: PersonSearchModel, scenes, score_threshold=0.5,
                  nms_iou=0.4, max_detections=10) -> GalleryIndex:
    entries = []
    for s in scenes:
        props, emb = model.forward_search(image_to_tensor(s.image),
                                          score_threshold=score_threshold,
                                          nms_iou=nms_iou, max_detections=max_detections)
        entries.append(GalleryEntry(s.image_id, props.boxes.numpy(),
                                    emb.numpy(), props.objectness.numpy()))
    return GalleryIndex(entries)


def build_queryset(scenes) -> QuerySet:
    gt_by_image = {s.image_id: [(tuple(map(float, b)), int(g))
                                for b, g in zip(s.boxes, s.identities)] for s in scenes}
    images_with = {}
    for s in scenes:
        for g in s.identities:
            images_with.setdefault(int(g), set()).add(s.image_id)
    queries = []
    for s in scenes:
        for b, g in zip(s.boxes, s.identities):
            positives = images_with[int(g)] - {s.image_id}
            if positives:
                queries.append(Query(s.image_id, tuple(map(float, b)), int(g), positives))
    return QuerySet(queries, gt_by_image)


def search(query: Query, index: GalleryIndex, query_embedding: np.ndarray) -> list:
    """All gallery detections outside the query image ranked by cosine similarity.

    Returns [(image_id, box, similarity)], best first, stable on ties.
    """
    ranked = []
    order = 0
    for e in index.entries:
        if e.image_id == query.image_id:
            continue
        sims = e.embeddings @ query_embedding if len(e.boxes) else np.zeros(0)
        for b, s in zip(e.boxes, sims):
            ranked.append((-float(s), order, e.image_id, tuple(map(float, b))))
            order += 1
    ranked.sort(key=lambda t: (t[0], t[1]))
    return [(img, box, -negs) for (negs, _, img, box) in ranked]


def compute_metrics(rankings, queryset: QuerySet, iou_hit=0.5,
                    ks=(1, 5, 10), keep_per_query=False) -> EvalReport:
    """mAP and Top-k over per-query rankings.

    Average precision per query is the mean of precision-at-each-correct-hit
    over the query's total positives; a gallery ground truth can be claimed by
    only one detection (later duplicates count as misses).
    """
    if len(rankings) != len(queryset.queries):
        raise ValueError("one ranking per query required")
    aps, first_hits, per_query = [], [], []
    for query, ranked in zip(queryset.queries, rankings):
        positives = [(img, j) for img in query.positive_images
                     for j, (_, ident) in enumerate(queryset.gt_by_image[img])
                     if ident == query.identity]
        if not positives:
            raise ValueError(f"query {query.image_id}/{query.identity} has no gallery positives")
        claimed = set()
        hits = 0
        precision_sum = 0.0
        first = None
        for rank, (img, box, _) in enumerate(ranked, start=1):
            if img == query.image_id:
                continue
            matched = False
            for j, (gbox, ident) in enumerate(queryset.gt_by_image.get(img, [])):
                if ident != query.identity or (img, j) in claimed:
                    continue
                if iou_matrix([box], [gbox])[0, 0] >= iou_hit:
                    claimed.add((img, j))
                    matched = True
                    break
            if matched:
                hits += 1
                precision_sum += hits / rank
                if first is None:
                    first = rank
        aps.append(precision_sum / len(positives))
        first_hits.append(first)
        if keep_per_query:
            per_query.append({"image": query.image_id, "identity": query.identity,
                              "ap": aps[-1], "first_hit_rank": first})
    top_k = {k: float(np.mean([f is not None and f <= k for f in first_hits]))
             for k in ks}
    return EvalReport(float(np.mean(aps)), top_k, 0.0, 0.0,
                      len(queryset.queries), len(queryset.gt_by_image), 0,
                      per_query)


def detection_metrics(index: GalleryIndex, scenes, iou_hit=0.5):
    """Single-class detection recall and average precision at the hit IoU."""
    gt_total = sum(len(s.boxes) for s in scenes)
    gt_by_image = {s.image_id: s.boxes for s in scenes}
    dets = []
    for e in index.entries:
        for b, s in zip(e.boxes, e.scores):
            dets.append((float(s), e.image_id, b))
    dets.sort(key=lambda t: -t[0])
    claimed = set()
    tp = np.zeros(len(dets))
    for i, (_, img, box) in enumerate(dets):
        gts = gt_by_image.get(img)
        if gts is None or len(gts) == 0:
            continue
        ious = iou_matrix([box], gts)[0]
        order = np.argsort(-ious)
        for j in order:
            if ious[j] < iou_hit:
                break
            if (img, int(j)) not in claimed:
                claimed.add((img, int(j)))
                tp[i] = 1
                break
    if gt_total == 0:
        return 0.0, 0.0
    cum_tp = np.cumsum(tp)
    recall_curve = cum_tp / gt_total
    precision_curve = cum_tp / np.arange(1, len(dets) + 1) if len(dets) else np.zeros(0)
    recall = float(recall_curve[-1]) if len(dets) else 0.0
    ap = 0.0
    prev_r = 0.0
    for p, r in zip(precision_curve, recall_curve):
        ap += p * (r - prev_r)
        prev_r = r
    return recall, float(ap)


def evaluate_model(model: PersonSearchModel, scenes, eval_cfg) -> EvalReport:
    """Full-protocol evaluation of one model over one scene set."""
    index = build_gallery(model, scenes, eval_cfg.score_threshold,
                          eval_cfg.nms_iou, eval_cfg.max_detections)
    queryset = build_queryset(scenes)
    if eval_cfg.max_queries > 0:
        queryset = QuerySet(queryset.queries[: eval_cfg.max_queries], queryset.gt_by_image)
    rankings = []
    for q in queryset.queries:
        scene = next(s for s in scenes if s.image_id == q.image_id)
        emb = model.query_embedding(image_to_tensor(scene.image), q.box).numpy()
        rankings.append(search(q, index, emb))
    report = compute_metrics(rankings, queryset, eval_cfg.iou_hit, keep_per_query=True)
    recall, ap = detection_metrics(index, scenes, eval_cfg.iou_hit)
    report.det_recall = recall
    report.det_ap = ap
    report.num_detections = index.num_detections
    return report


def model_from_checkpoint(payload: dict) -> tuple:
    """(model, TrainConfig) rebuilt from a checkpoint payload."""
    config = parse_train_config(copy.deepcopy(payload["config"]))
    torch.manual_seed(0)
    model = PersonSearchModel(config.model)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, config


def evaluate_checkpoint(checkpoint_path, corpus_path=None, report_path=None) -> EvalReport:
    """Evaluate a stored checkpoint on its configured (or given) eval corpus."""
    payload = load_checkpoint(checkpoint_path)
    model, config = model_from_checkpoint(payload)
    corpus = corpus_path or config.corpus.target_eval
    if not corpus:
        raise TrainerError("no evaluation corpus configured or given")
    scenes = load_eval_scenes(corpus, config.model.image_size)
    report = evaluate_model(model, scenes, config.eval)
    if report_path:
        atomic_write_text(report_path, canonical_json(report.to_json()) + "\n")
    return report


# ---------------------------------------------------------------------------
# Frozen-feature domain probes
# ---------------------------------------------------------------------------

def extract_domain_features(model: PersonSearchModel, registry: Registry,
                            max_per_role=200):
    """Frozen features + domain labels for both sub-tasks.

    Re-ID probe: re-ID head embeddings of each crop (deterministic canvas)
    labeled by re-ID domain. Detection probe: spatially pooled encoder maps of
    detection scenes labeled by detection domain.
    """
    model.eval()
    reid_feats, reid_labels = [], []
    det_feats, det_labels = [], []
    with torch.no_grad():
        for role in ("reid_labeled", "reid_unlabeled"):
            for i in range(min(registry.role_size(role), max_per_role)):
                sample = registry.build_sample(role, i, rng_for(0, "probe", role, i))
                feats = model.encode(image_to_tensor(sample.image))
                emb = model.embed(model.roi_features(feats.fmap, sample.boxes))
                reid_feats.append(emb.normalized[0].numpy())
                reid_labels.append(sample.domain_label)
        for i in range(min(registry.role_size("detection"), max_per_role)):
            sample = registry.build_sample("detection", i, rng_for(0, "probe", "det", i))
            feats = model.encode(image_to_tensor(sample.image))
            det_feats.append(feats.fmap.mean(dim=(1, 2)).numpy())
            det_labels.append(sample.domain_label)
    return (np.asarray(reid_feats), np.asarray(reid_labels),
            np.asarray(det_feats), np.asarray(det_labels))


def checkpoint_probe_accuracy(checkpoint_path, config: TrainConfig, seed=0) -> dict:
    """Linear-probe domain accuracy on frozen features of a checkpoint."""
    payload = load_checkpoint(checkpoint_path, allow_hash_mismatch=True)
    model, _ = model_from_checkpoint(payload)
    registry = load_pretrain_registry(config)
    rf, rl, df, dl = extract_domain_features(model, registry)
    out = {}
    if len(np.unique(rl)) >= 2:
        out["probe_reid"] = probe_separability(rf, rl, seed=seed)
    if len(np.unique(dl)) >= 2:
        out["probe_det"] = probe_separability(df, dl, seed=seed)
    vals = [v for v in out.values()]
    out["probe_mean"] = float(np.mean(vals)) if vals else float("nan")
    return out


# ---------------------------------------------------------------------------
# Experiment harnesses
# ---------------------------------------------------------------------------

def _write_rows(rows, out_dir, name, columns):
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, f"{name}.json"),
                      canonical_json(rows) + "\n")
    with open(os.path.join(out_dir, f"{name}.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def run_fig5_harness(config: TrainConfig, pretrained_checkpoint, out_dir,
                     fractions=(0.25, 0.5, 0.75, 1.0),
                     init_modes=("random", "backbone", "full"),
                     seeds=(0, 1, 2)) -> list:
    """Fine-tuning-fraction study: (fraction, init mode, seed) -> mAP rows.

    random-init ignores the checkpoint; backbone loads the encoder only; full
    loads every weight. Emits fraction_study.{json,csv} with plot-ready rows.
    """
    scenes = load_eval_scenes(config.corpus.target_eval, config.model.image_size)
    rows = []
    for fraction in fractions:
        for mode in init_modes:
            for seed in seeds:
                run_dir = os.path.join(out_dir, f"f{fraction:g}_{mode}_s{seed}")
                init = "random" if mode == "random" else pretrained_checkpoint
                scope = "backbone" if mode == "backbone" else "full"
                ck = finetune(config, init, fraction, seed, run_dir, init_scope=scope)
                payload = load_checkpoint(ck.path)
                model, _ = model_from_checkpoint(payload)
                rep = evaluate_model(model, scenes, config.eval)
                rows.append({"fraction": fraction, "init": mode, "seed": seed,
                             "map": rep.map, "top1": rep.top_k[1],
                             "det_recall": rep.det_recall, "checkpoint": ck.path})
    _write_rows(rows, out_dir, "fraction_study",
                ["fraction", "init", "seed", "map", "top1", "det_recall"])
    return rows


def run_iam_ablation(config: TrainConfig, out_dir, domain_counts=(2, 3, 4),
                     seeds=(0, 1, 2), finetune_fraction=0.5) -> list:
    """Alignment on/off across increasing pre-training domain counts.

    Pre-trains with and without the alignment module on the first k manifests,
    then reports the frozen-feature domain probe and downstream mAP after a
    supervised fine-tune. Emits iam_study.{json,csv}.
    """
    rows = []
    for k in domain_counts:
        if k > len(config.corpus.pretrain):
            raise TrainerError(f"domain count {k} exceeds configured manifests")
        for iam_on in (True, False):
            for seed in seeds:
                sub = copy.deepcopy(config)
                sub.corpus.pretrain = list(config.corpus.pretrain[:k])
                sub.iam.enabled = iam_on
                sub.trainer.enable_adv = iam_on
                run_dir = os.path.join(out_dir, f"d{k}_{'on' if iam_on else 'off'}_s{seed}")
                ck = pretrain(sub, seed, run_dir)
                probes = checkpoint_probe_accuracy(ck.path, sub, seed=seed)
                row = {"num_domains": k, "iam_on": iam_on, "seed": seed, **probes}
                if sub.corpus.target_train and sub.corpus.target_eval:
                    ft_dir = os.path.join(run_dir, "finetune")
                    fck = finetune(sub, ck.path, finetune_fraction, seed, ft_dir)
                    model, _ = model_from_checkpoint(load_checkpoint(fck.path))
                    scenes = load_eval_scenes(sub.corpus.target_eval, sub.model.image_size)
                    rep = evaluate_model(model, scenes, sub.eval)
                    row["map"] = rep.map
                    row["top1"] = rep.top_k[1]
                rows.append(row)
    _write_rows(rows, out_dir, "iam_study",
                ["num_domains", "iam_on", "seed", "probe_reid", "probe_det",
                 "probe_mean", "map", "top1"])
    return rows


def run_reid_op_ablation(config: TrainConfig, out_dir, seeds=(0,),
                         finetune_fraction=1.0) -> list:
    """expand_resize vs random_paste: one metric row per operation per seed."""
    rows = []
    scenes = load_eval_scenes(config.corpus.target_eval, config.model.image_size)
    for op in ("expand_resize", "random_paste"):
        for seed in seeds:
            sub = copy.deepcopy(config)
            sub.trainer.reid_op = op
            run_dir = os.path.join(out_dir, f"{op}_s{seed}")
            ck = pretrain(sub, seed, run_dir)
            ft = finetune(sub, ck.path, finetune_fraction, seed,
                          os.path.join(run_dir, "finetune"))
            model, _ = model_from_checkpoint(load_checkpoint(ft.path))
            rep = evaluate_model(model, scenes, sub.eval)
            rows.append({"op": op, "seed": seed, "map": rep.map, "top1": rep.top_k[1],
                         "det_recall": rep.det_recall})
    _write_rows(rows, out_dir, "reid_op_study",
                ["op", "seed", "map", "top1", "det_recall"])
    return rows
