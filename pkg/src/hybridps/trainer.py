"""Hybrid training orchestration: multi-domain batch sampling, routing of
samples through the supervised / self-supervised / adversarial flows, the
optimization loop, and checkpointing.

Every random draw derives functionally from (seed, step, slot), so runs are
reproducible and a resumed run continues exactly where the checkpoint stops.
"""

from __future__ import annotations

import math
import os
import shutil
from dataclasses import dataclass, field

import numpy as np
import torch

import torch.nn.functional as F

from .config import ConfigError, TrainConfig
from .corpus import load_manifest
from .iam import IamBundle, TASK_DETECTION, TASK_REID, loss_adv
from .model import DetHeadOutput, EncoderFeatures, PersonSearchModel, image_to_tensor
from .objectives import (
    OimTable,
    TrainingAbort,
    det_head_loss_single,
    loss_con,
    loss_oim,
    rpn_loss_single,
    total_loss,
)
from .unification import (
    AugmentConfig,
    IdentityAllocator,
    SUB_DETECTION,
    SUB_REID,
    SUP_FRESH,
    Unifier,
    make_view_pair,
)
from .utils import append_jsonl, atomic_write_text, canonical_json, load_image, read_jsonl, rng_for

ROLES = ("detection", "reid_labeled", "reid_unlabeled", "target")


class TrainerError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Registry: manifests -> drawable records with a fixed identity space
# ---------------------------------------------------------------------------

@dataclass
class SourceRecord:
    role: str
    record: object
    image: np.ndarray
    dataset_id: str


class Registry:
    """Loaded corpus records plus the run-global identity allocation.

    The allocation pre-pass walks every record once in manifest order, so the
    identity space is fixed (and the OIM table sizable) before training, and
    revisiting a record always yields the same identity.
    """

    def __init__(self, manifests, config: TrainConfig, target: bool = False):
        self.config = config
        self.records = {role: [] for role in ROLES}
        kind_to_role = {"detection": "detection", "reid_labeled": "reid_labeled",
                        "reid_unlabeled": "reid_unlabeled"}
        det_domains, reid_domains = [], []
        for m in manifests:
            role = "target" if target else kind_to_role[m.kind]
            if m.kind == "detection":
                det_domains.append(m.dataset_id)
            else:
                reid_domains.append(m.dataset_id)
            for rec in m.records:
                self.records[role].append(SourceRecord(
                    role, rec, load_image(m.resolve(rec)), m.dataset_id))
        self.detection_domains = det_domains
        self.reid_domains = reid_domains
        self.unifier = Unifier(config.model.image_size, det_domains, reid_domains,
                               ratio_range=tuple(config.trainer.expand_ratio))
        self.alloc = IdentityAllocator()
        self._cache = {}
        self._epoch_cache = {}
        # identity pre-pass (fixes the id space; caches deterministic samples)
        for role in ("detection", "target"):
            for i, src in enumerate(self.records[role]):
                self._cache[(role, i)] = self._unify_scene(src)
        for src in self.records["reid_labeled"]:
            self.alloc.labeled(src.dataset_id, src.record.identity)
        for src in self.records["reid_unlabeled"]:
            self.alloc.fresh(key=(src.dataset_id, src.record.image_path))
        self.num_identities = self.alloc.num_allocated

    def _unify_scene(self, src: SourceRecord):
        if src.record.identities is not None:
            return self.unifier.unify_search(src.record, self.alloc, src.image)
        return self.unifier.unify_detection(src.record, self.alloc, src.image)

    def role_size(self, role) -> int:
        return len(self.records[role])

    def build_sample(self, role, index, rng):
        """Materialize one UnifiedSample; re-ID placement is redrawn per visit."""
        src = self.records[role][index]
        if role in ("detection", "target"):
            return self._cache[(role, index)]
        tr = self.config.trainer
        if tr.reid_op == "random_paste":
            pos = (float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
            return self.unifier.random_paste(src.record, self.alloc, pos, src.image)
        lo, hi = tr.expand_ratio
        ratio = float(rng.uniform(lo, hi))
        anchor = (float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
        return self.unifier.expand_resize(src.record, self.alloc, ratio, anchor, src.image)

    def subset_target(self, indices):
        """Restrict the target role to the given record indices (fraction runs)."""
        kept = sorted(int(i) for i in indices)
        self.records["target"] = [self.records["target"][j] for j in kept]
        self._cache = {("target", i): self._cache[("target", j)]
                       for i, j in enumerate(kept)}
        self._epoch_cache = {}


def load_pretrain_registry(config: TrainConfig) -> Registry:
    if not config.corpus.pretrain:
        raise ConfigError("corpus.pretrain: no manifests configured")
    manifests = [load_manifest(p) for p in config.corpus.pretrain]
    return Registry(manifests, config)


def load_target_registry(config: TrainConfig, which: str = "target_train") -> Registry:
    path = getattr(config.corpus, which)
    if not path:
        raise ConfigError(f"corpus.{which}: no manifest configured")
    m = load_manifest(path)
    if m.kind != "detection" or any(r.identities is None for r in m.records):
        raise ConfigError(f"corpus.{which}: target corpus needs detection boxes with identities")
    return Registry([m], config, target=True)


# ---------------------------------------------------------------------------
# Deterministic multi-domain batch sampling
# ---------------------------------------------------------------------------

def _epoch_order(registry: Registry, role, epoch, seed):
    """One epoch's visiting order: per-domain shuffles interleaved so domains
    appear proportionally throughout (exact counts over the full epoch)."""
    key = (role, epoch, repr(seed))
    if key in registry._epoch_cache:
        return registry._epoch_cache[key]
    records = registry.records[role]
    by_domain = {}
    for i, src in enumerate(records):
        by_domain.setdefault(src.dataset_id, []).append(i)
    streams = {}
    for d, idxs in by_domain.items():
        rng = rng_for(seed, "epoch", role, epoch, d)
        streams[d] = [idxs[j] for j in rng.permutation(len(idxs))]
    total = len(records)
    taken = {d: 0 for d in streams}
    order = []
    domains = list(streams)
    for t in range(total):
        share = [(len(streams[d]) * (t + 1) / total - taken[d], -k)
                 for k, d in enumerate(domains)]
        best = max(range(len(domains)), key=lambda k: share[k])
        d = domains[best]
        if taken[d] >= len(streams[d]):
            d = max(domains, key=lambda x: len(streams[x]) - taken[x])
        order.append(streams[d][taken[d]])
        taken[d] += 1
    registry._epoch_cache[key] = order
    return order


@dataclass
class BatchItem:
    sample: object          # UnifiedSample
    role: str
    index: int              # index within the role's record list


def sample_batch(registry: Registry, composition: dict, step: int, seed) -> list:
    """Deterministic batch for one step; domains round-robin within each role."""
    items = []
    slot = 0
    for role in ROLES:
        count = int(composition.get(role, 0))
        if count == 0:
            continue
        n = registry.role_size(role)
        if n == 0:
            raise TrainerError(f"batch composition demands role {role!r} but its registry is empty")
        for k in range(count):
            pos = step * count + k
            epoch, offset = divmod(pos, n)
            order = _epoch_order(registry, role, epoch, seed)
            index = order[offset]
            rng = rng_for(seed, "sample", step, slot)
            items.append(BatchItem(registry.build_sample(role, index, rng), role, index))
            slot += 1
    return items


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

class Trainer:
    def __init__(self, config: TrainConfig, seed: int, registry: Registry,
                 supervised_only: bool = False, total_steps: int = None,
                 base_lr: float = None):
        self.config = config
        self.seed = int(seed)
        self.registry = registry
        self.supervised_only = supervised_only
        tr = config.trainer
        self.total_steps = tr.steps if total_steps is None else total_steps
        self.base_lr = tr.lr if base_lr is None else base_lr
        self.hp = config.objectives.hyperparams()
        self.step = 0

        torch.manual_seed(int(rng_for(self.seed, "model-init").integers(0, 2**62)))
        self.model = PersonSearchModel(config.model)
        d = config.model.embedding_dim
        self.oim = OimTable(registry.num_identities, d, gamma=self.hp.gamma,
                            tau=self.hp.tau, seed=self.seed)

        c = self.model.encoder.out_channels
        self.iam_det = None
        self.iam_reid = None
        self.adv_enabled = (tr.enable_adv and config.iam.enabled and not supervised_only)
        use_det_iam = self.adv_enabled and config.iam.detection and len(registry.detection_domains) >= 1
        use_reid_iam = self.adv_enabled and config.iam.reid and len(registry.reid_domains) >= 1
        if use_det_iam:
            self.iam_det = IamBundle(TASK_DETECTION, c, 128,
                                     len(registry.detection_domains), config.iam.alpha)
        if use_reid_iam:
            self.iam_reid = IamBundle(TASK_REID, c, d,
                                      len(registry.reid_domains), config.iam.alpha)
        self.con_enabled = tr.enable_con and not supervised_only

        params = list(self.model.parameters())
        for bundle in (self.iam_det, self.iam_reid):
            if bundle is not None:
                params += list(bundle.parameters())
        self.optimizer = torch.optim.SGD(params, lr=self.base_lr,
                                         momentum=tr.momentum, weight_decay=tr.weight_decay)

    # -- plumbing -------------------------------------------------------------

    def lr_at(self, step) -> float:
        tr = self.config.trainer
        total = max(self.total_steps, 1)
        warm = int(round(tr.warmup_frac * total))
        ramp = min(1.0, (step + 1) / warm) if warm > 0 else 1.0
        if not tr.cosine_decay:
            return self.base_lr * ramp
        t = min(max(step, 0), total)
        return self.base_lr * ramp * 0.5 * (1.0 + math.cos(math.pi * t / total))

    def alpha_at(self, step) -> float:
        warm = self.config.iam.alpha_warmup_steps
        a = self.config.iam.alpha
        if warm <= 0:
            return a
        return a * min(1.0, (step + 1) / warm)

    def _aug_config(self, sample) -> AugmentConfig:
        a = self.config.trainer.augment
        scale = a.scale_crop
        if sample.sub_task == SUB_DETECTION and not self.config.trainer.detection_scale_jitter:
            scale = False
        return AugmentConfig(flip=a.flip, scale_crop=scale, photometric=a.photometric,
                             noise=a.noise, crop_min=a.crop_min,
                             brightness_delta=a.brightness_delta, noise_max=a.noise_max)

    def batch_for_step(self, step) -> list:
        comp = ({"target": self.config.trainer.finetune_batch}
                if self.supervised_only else self.config.trainer.batch)
        return sample_batch(self.registry, comp, step, self.seed)

    # -- the step ---------------------------------------------------------------

    def train_step(self, items: list, step: int, want_detail: bool = False):
        """One optimization step over a sampled batch; returns the LossReport.

        Both views of every sample feed the supervised losses and the matching
        alignment bundle; views of fresh-identity samples (detection source,
        unlabeled re-ID source) additionally feed the self-supervised loss.
        """
        cfg = self.config
        tr = cfg.trainer
        try:
            return self._train_step_inner(items, step, want_detail)
        except TrainingAbort as e:
            ids = [(it.role, it.sample.dataset_id, it.index) for it in items]
            raise TrainingAbort(f"step {step}: {e}; batch samples: {ids}") from e

    def _train_step_inner(self, items, step, want_detail):
        cfg = self.config
        tr = cfg.trainer
        views = []  # (slot, view_no, View)
        for slot, item in enumerate(items):
            pair = make_view_pair(item.sample, seed=(self.seed, step, slot),
                                  cfg=self._aug_config(item.sample))
            views.append((slot, 1, pair.view1))
            views.append((slot, 2, pair.view2))

        imgs = torch.stack([image_to_tensor(v.image) for (_, _, v) in views])
        fmaps = self.model.features(imgs)
        rpn_raws = self.model.rpn_forward_batch(fmaps)

        supervised = [k for k, (_, vno, _) in enumerate(views)
                      if vno == 1 or not tr.single_view_supervision]

        # proposals + detection head over supervised views
        prop_sets = {}
        for k in supervised:
            _, _, v = views[k]
            feats = EncoderFeatures(fmaps[k], self.model.stride)
            prop_sets[k] = self.model.propose(feats, gt_boxes=v.boxes, training=True,
                                              rpn_raw=rpn_raws[k])
        roi_props = self.model.roi_features(
            fmaps[supervised], [prop_sets[k].boxes for k in supervised])
        det_out_all = self.model.detect(roi_props)
        det_splits = np.cumsum([0] + [len(prop_sets[k].boxes) for k in supervised])

        # ground-truth ROIs for the re-ID head (all views)
        roi_gt = self.model.roi_features(fmaps, [v.boxes for (_, _, v) in views])
        gt_counts = [len(v.boxes) for (_, _, v) in views]
        gt_splits = np.cumsum([0] + gt_counts)
        emb_all = self.model.embed(roi_gt)
        det_vec_gt = (self.model.det_trunk(roi_gt.per_box_fmap)
                      if len(roi_gt.per_box_fmap) else emb_all.vec.new_zeros((0, 128)))

        def gt_slice(k):
            return slice(gt_splits[k], gt_splits[k + 1])

        detail = {"rpn": [], "det_head": [], "oim": [], "oim_owner": [], "con": [],
                  "duties": [(it.role, it.sample.sub_task, it.sample.supervision)
                             for it in items]}
        counts = {"batch": len(items), "views": len(views)}

        # -- supervised detection losses
        rpn_terms, head_terms = [], []
        for j, k in enumerate(supervised):
            slot, vno, v = views[k]
            props = prop_sets[k]
            raw = rpn_raws[k]
            sl = slice(det_splits[j], det_splits[j + 1])
            det_out = DetHeadOutput(det_out_all.class_logits[sl],
                                    det_out_all.box_deltas[sl], det_out_all.det_vec[sl])
            r = rpn_loss_single(raw, v.boxes)
            h = det_head_loss_single(det_out, props.boxes, props.matched_gt, v.boxes)
            rpn_terms.append(r)
            head_terms.append(h)
            if want_detail:
                detail["rpn"].append((slot, vno, float(r)))
                detail["det_head"].append((slot, vno, float(h)))
        l_rpn = torch.stack(rpn_terms).mean()
        l_det_head = torch.stack(head_terms).mean()

        # -- supervised re-ID loss (OIM over every supervised view's boxes)
        emb_chunks, id_chunks, owners = [], [], []
        for k in supervised:
            slot, vno, v = views[k]
            if gt_counts[k] == 0:
                continue
            emb_chunks.append(emb_all.normalized[gt_slice(k)])
            id_chunks.append(torch.as_tensor(v.identities, dtype=torch.long))
            owners.extend([(slot, vno)] * gt_counts[k])
        if emb_chunks:
            per_box = loss_oim(torch.cat(emb_chunks), torch.cat(id_chunks), self.oim,
                               reduction="none")
            l_reid = per_box.mean()
            counts["oim_boxes"] = int(len(per_box))
            if want_detail:
                detail["oim"] = [float(t) for t in per_box]
                detail["oim_owner"] = owners
        else:
            l_reid = torch.zeros(())
            counts["oim_boxes"] = 0

        parts = {"l_rpn": l_rpn, "l_det_head": l_det_head, "l_reid": l_reid}

        # -- self-supervised branch (fresh-identity samples only)
        if self.con_enabled:
            h1s, h2s, con_slots = [], [], []
            skipped = 0
            for slot, item in enumerate(items):
                if item.sample.supervision != SUP_FRESH:
                    continue
                k1, k2 = 2 * slot, 2 * slot + 1
                if cfg.objectives.con_mode == "per_box":
                    pair_ids = {}
                    v1 = views[k1][2]
                    v2 = views[k2][2]
                    for i, g in enumerate(v1.identities):
                        pair_ids[int(g)] = [i, None]
                    for j, g in enumerate(v2.identities):
                        if int(g) in pair_ids:
                            pair_ids[int(g)][1] = j
                    added = False
                    for i, j in pair_ids.values():
                        if j is None:
                            continue
                        h1s.append(emb_all.normalized[gt_splits[k1] + i])
                        h2s.append(emb_all.normalized[gt_splits[k2] + j])
                        con_slots.append(slot)
                        added = True
                    if not added:
                        skipped += 1
                else:
                    if gt_counts[k1] == 0 or gt_counts[k2] == 0:
                        skipped += 1
                        continue
                    h1s.append(emb_all.normalized[gt_slice(k1)].mean(dim=0))
                    h2s.append(emb_all.normalized[gt_slice(k2)].mean(dim=0))
                    con_slots.append(slot)
            counts["con_pairs"] = len(h1s)
            counts["con_skipped"] = skipped
            if h1s:
                h1 = torch.stack(h1s)
                h2 = torch.stack(h2s)
                z1 = self.model.predict_mlp(h1).vec
                z2 = self.model.predict_mlp(h2).vec
                parts["l_con"] = loss_con(h1, z1, h2, z2)
                if want_detail:
                    with torch.no_grad():
                        per = (0.5 * -(F.normalize(h2, dim=1) * F.normalize(z1, dim=1)).sum(1)
                               + 0.5 * -(F.normalize(h1, dim=1) * F.normalize(z2, dim=1)).sum(1))
                    detail["con"] = list(zip(con_slots, [float(t) for t in per]))

        # -- adversarial alignment, one bundle per sub-task
        if self.adv_enabled:
            alpha = self.alpha_at(step)
            adv_total = None
            for task, bundle in ((TASK_DETECTION, self.iam_det), (TASK_REID, self.iam_reid)):
                if bundle is None:
                    continue
                sel = [k for k in supervised
                       if items[views[k][0]].sample.sub_task
                       == (SUB_DETECTION if task == TASK_DETECTION else SUB_REID)]
                # target-role samples never join alignment (their registry has
                # a single domain and fine-tuning disables it anyway)
                sel = [k for k in sel if items[views[k][0]].role != "target"]
                if not sel:
                    continue
                labels = [items[views[k][0]].sample.domain_label for k in sel]
                if task == TASK_DETECTION:
                    f_img = fmaps[sel]
                    f_ins = [det_vec_gt[gt_slice(k)] for k in sel]
                else:
                    with_boxes = [k for k in sel if gt_counts[k] > 0]
                    if not with_boxes:
                        continue
                    labels = [items[views[k][0]].sample.domain_label for k in with_boxes]
                    f_img = torch.stack([roi_gt.per_box_fmap[gt_slice(k)].mean(dim=0)
                                         for k in with_boxes])
                    f_ins = [emb_all.vec[gt_slice(k)] for k in with_boxes]
                    sel = with_boxes
                l_i, l_n, l_c, c = loss_adv(bundle, f_img, f_ins, labels, alpha=alpha,
                                            return_detail=want_detail)
                term = l_i + l_n + l_c
                adv_total = term if adv_total is None else adv_total + term
                counts[f"iam_{task}_images"] = c["images"]
                counts[f"iam_{task}_instances"] = c["instances"]
                if want_detail:
                    detail[f"adv_{task}"] = {"views": [views[k][0:2] for k in sel], **c}
            if adv_total is not None:
                parts["l_adv"] = adv_total

        total, report = total_loss(parts, self.hp, counts)

        self.optimizer.zero_grad()
        total.backward()
        if tr.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for g in self.optimizer.param_groups for p in g["params"]], tr.grad_clip)
        lr = self.lr_at(step)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.optimizer.step()
        self.step = step + 1
        if want_detail:
            return report, detail
        return report

    # -- state ------------------------------------------------------------------

    def payload(self, kind: str) -> dict:
        return {
            "format": 1,
            "kind": kind,
            "step": self.step,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "model": self.model.state_dict(),
            "oim": self.oim.state_dict(),
            "iam_det": self.iam_det.state_dict() if self.iam_det else None,
            "iam_reid": self.iam_reid.state_dict() if self.iam_reid else None,
            "optimizer": self.optimizer.state_dict(),
            "id_space": {
                "num_identities": self.registry.num_identities,
                "detection_domains": list(self.registry.detection_domains),
                "reid_domains": list(self.registry.reid_domains),
            },
        }

    def load_payload(self, payload: dict):
        self.model.load_state_dict(payload["model"])
        self.oim.load_state_dict(payload["oim"])
        if self.iam_det is not None and payload.get("iam_det") is not None:
            self.iam_det.load_state_dict(payload["iam_det"])
        if self.iam_reid is not None and payload.get("iam_reid") is not None:
            self.iam_reid.load_state_dict(payload["iam_reid"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.step = int(payload["step"])


# ---------------------------------------------------------------------------
# Checkpoint I/O (step_<N>/params + step_<N>/meta, atomic)
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    path: str
    step: int
    config_hash: str
    kind: str


def save_checkpoint(out_dir, trainer: Trainer, kind: str) -> Checkpoint:
    payload = trainer.payload(kind)
    step = payload["step"]
    final = os.path.join(os.fspath(out_dir), f"step_{step:06d}")
    tmp = final + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    torch.save(payload, os.path.join(tmp, "params"))
    meta = {"config_hash": payload["config_hash"], "global_step": step,
            "kind": kind, "id_space": payload["id_space"]}
    atomic_write_text(os.path.join(tmp, "meta"), canonical_json(meta) + "\n")
    if os.path.exists(final):
        shutil.rmtree(final)
    os.replace(tmp, final)
    return Checkpoint(final, step, payload["config_hash"], kind)


def _checkpoint_dir(path) -> str:
    """Accept either a step_<N> directory or a run directory (latest step)."""
    path = os.fspath(path)
    if os.path.exists(os.path.join(path, "params")):
        return path
    latest = latest_checkpoint(path)
    if latest is None:
        raise CheckpointError(f"no checkpoint found under {path}")
    return latest


def latest_checkpoint(out_dir):
    out_dir = os.fspath(out_dir)
    if not os.path.isdir(out_dir):
        return None
    steps = []
    for name in os.listdir(out_dir):
        if name.startswith("step_") and not name.endswith(".tmp"):
            try:
                steps.append((int(name.split("_", 1)[1]), name))
            except ValueError:
                continue
    if not steps:
        return None
    return os.path.join(out_dir, max(steps)[1])


def load_checkpoint(path, expected_hash=None, allow_hash_mismatch=False) -> dict:
    import json

    cdir = _checkpoint_dir(path)
    try:
        with open(os.path.join(cdir, "meta"), "r", encoding="utf-8") as f:
            meta = json.loads(f.read())
        payload = torch.load(os.path.join(cdir, "params"), weights_only=True)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {cdir}: {e}") from e
    if payload.get("config_hash") != meta.get("config_hash"):
        raise CheckpointError(
            f"checkpoint {cdir} corrupt: config hash mismatch between params and meta")
    if expected_hash is not None and payload["config_hash"] != expected_hash:
        if not allow_hash_mismatch:
            raise CheckpointError(
                f"checkpoint {cdir}: config hash mismatch "
                f"(checkpoint {payload['config_hash'][:12]}…, expected {expected_hash[:12]}…); "
                "pass the override flag to load into a different config")
    return payload


# ---------------------------------------------------------------------------
# Pre-training and fine-tuning loops
# ---------------------------------------------------------------------------

def _run_loop(trainer: Trainer, out_dir, steps, kind, start_step=0,
              checkpoint_every=0) -> Checkpoint:
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(os.fspath(out_dir), "loss_log.jsonl")
    if start_step == 0:
        if os.path.exists(log_path):
            os.unlink(log_path)
    elif os.path.exists(log_path):
        rows = [r for r in read_jsonl(log_path) if r.get("step", 10**18) < start_step]
        atomic_write_text(log_path, "".join(canonical_json(r) + "\n" for r in rows))
    for step in range(start_step, steps):
        items = trainer.batch_for_step(step)
        report = trainer.train_step(items, step)
        append_jsonl(log_path, {"step": step, "lr": trainer.lr_at(step), **report.to_json()})
        if checkpoint_every and (step + 1) % checkpoint_every == 0 and (step + 1) < steps:
            save_checkpoint(out_dir, trainer, kind)
    trainer.step = steps
    return save_checkpoint(out_dir, trainer, kind)


def pretrain(config: TrainConfig, seed: int, out_dir, resume=None) -> Checkpoint:
    """Run the hybrid pre-training loop; returns the final checkpoint."""
    registry = load_pretrain_registry(config)
    trainer = Trainer(config, seed, registry)
    start = 0
    if resume is not None:
        payload = load_checkpoint(resume, expected_hash=config.hash())
        trainer.load_payload(payload)
        start = trainer.step
        if start >= config.trainer.steps:
            return Checkpoint(_checkpoint_dir(resume), start, config.hash(), "pretrain")
    return _run_loop(trainer, out_dir, config.trainer.steps, "pretrain", start,
                     config.trainer.checkpoint_every)


def finetune(config: TrainConfig, init, target_fraction: float, seed: int, out_dir,
             init_scope: str = "full", reinit_oim: bool = True) -> Checkpoint:
    """Supervised fine-tuning on a fraction of the target corpus.

    init is "random" or a checkpoint path; init_scope chooses between loading
    the full model (encoder + every head) or the encoder only.
    """
    if not (0.0 < target_fraction <= 1.0):
        raise ConfigError(f"target fraction must be in (0, 1], got {target_fraction}")
    if init_scope not in ("full", "backbone"):
        raise ConfigError(f"unknown init scope {init_scope!r}")
    registry = load_target_registry(config, "target_train")
    n = registry.role_size("target")
    keep = max(1, int(round(target_fraction * n)))
    registry.subset_target(rng_for(seed, "finetune-subsample").permutation(n)[:keep])

    trainer = Trainer(config, seed, registry, supervised_only=True,
                      total_steps=config.trainer.finetune_steps,
                      base_lr=config.trainer.finetune_lr)
    if init != "random":
        payload = load_checkpoint(init, allow_hash_mismatch=True)
        if init_scope == "full":
            try:
                trainer.model.load_state_dict(payload["model"])
            except RuntimeError as e:
                raise CheckpointError(f"model architecture mismatch loading {init}: {e}") from e
        else:
            enc = {k: v for k, v in payload["model"].items() if k.startswith("encoder.")}
            missing = trainer.model.load_state_dict(enc, strict=False)
            if any(k.startswith("encoder.") for k in missing.missing_keys):
                raise CheckpointError(f"encoder weights incomplete in {init}")
        if not reinit_oim:
            old = payload.get("oim")
            if old is None or len(old["prototypes"]) != registry.num_identities:
                raise CheckpointError(
                    "identity-space mismatch: checkpoint OIM table does not fit the target "
                    "corpus; enable re-initialization")
            trainer.oim.load_state_dict(old)
    return _run_loop(trainer, out_dir, config.trainer.finetune_steps, "finetune")
