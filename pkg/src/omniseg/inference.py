"""Run a model over scenes and score it."""
from __future__ import annotations

import numpy as np
import torch

from .decoder import semantic_from_instances
from .evalmetrics import EvalReport, GTInstance, InstanceEvaluator, InstancePrediction, evaluate_semantic, labels_to_mesh
from .decoder import transfer_to_mesh
from .fusion3d import voxel_size_for_stride
from .geometry import trilinear_plan
from .model import ModelConfig, ViewBatch, extract_instances

TOKEN_STRIDE = 4


def pixel_ground_truth(frames, instance_classes, stride=TOKEN_STRIDE):
    """Instance ids and classes on the stride-4 token grid of ``frames`` (view-major)."""
    ids = np.concatenate([f.gt_instance[::stride, ::stride].reshape(-1) for f in frames])
    cls = np.array([0 if i == 0 else instance_classes[int(i)] for i in ids], dtype=np.int64)
    return ids, cls


def gt_instances(ids, instance_classes):
    return [GTInstance(ids == i, instance_classes[int(i)]) for i in np.unique(ids) if i > 0]


def predict(model, batch, mesh_points=None):
    model.eval()
    with torch.no_grad():
        pred = model(batch, mesh_points=mesh_points)
    insts = [InstancePrediction(i.mask, i.class_id, i.score) for i in extract_instances(pred.class_logits, pred.mask_logits)]
    sem = semantic_from_instances(pred.mask_logits, pred.class_logits).numpy()
    return insts, sem, pred


def context_views(n_views, query, k):
    """``k`` views starting at ``query`` (wrapping), query view first."""
    return [(query + j) % n_views for j in range(min(k, n_views))]


class Evaluation:
    """Accumulates instance and semantic scores across scenes."""

    def __init__(self):
        self.inst = InstanceEvaluator()
        self.sem_pred = []
        self.sem_gt = []

    def add(self, preds, sem, ids, cls, instance_classes, keep=None):
        if keep is not None:
            preds = [InstancePrediction(p.mask[keep], p.class_id, p.score) for p in preds]
            preds = [p for p in preds if p.mask.any()]
            ids, cls, sem = ids[keep], cls[keep], sem[keep]
        self.inst.add(preds, gt_instances(ids, instance_classes))
        self.sem_pred.append(sem)
        self.sem_gt.append(cls)

    def report(self, **extra) -> EvalReport:
        sem = evaluate_semantic(np.concatenate(self.sem_pred), np.concatenate(self.sem_gt)) if self.sem_pred else None
        return EvalReport.from_results(self.inst.report(), sem, **extra)


def evaluate_scenes(model, scenes, domain="pixels", views=None, predictor=None) -> EvalReport:
    """Score ``model`` on ``scenes``.

    pixels, views=None: all views at once, tokens on every view.
    pixels, views=K: every view in turn is the query; the model sees K views
      starting there and is scored on the query view's tokens only.
    mesh: all views; tokens are the scene's surface points that some view sees.
    ``predictor(scene, frames, mesh_points)`` may replace the model (oracle harness).
    """
    ev = Evaluation()
    dtype = next(model.parameters()).dtype if model is not None else torch.float32

    def run(scene, frames, mesh_points=None):
        if predictor is not None:
            return predictor(scene, frames, mesh_points)
        insts, sem, _ = predict(model, ViewBatch.from_frames(frames).to(dtype), mesh_points)
        return insts, sem

    for scene in scenes:
        classes = scene.instance_classes()
        if domain == "mesh":
            pts = scene.gt_surface_cloud[:, :3]
            ids, cls, labeled = labels_to_mesh(scene.frames, pts, classes)
            insts, sem = run(scene, scene.frames, pts[labeled])
            ev.add(insts, sem, ids[labeled], cls[labeled], classes)
        elif views is None:
            ids, cls = pixel_ground_truth(scene.frames, classes)
            insts, sem = run(scene, scene.frames)
            ev.add(insts, sem, ids, cls, classes)
        else:
            for q in range(scene.num_views):
                frames = [scene.frames[v] for v in context_views(scene.num_views, q, views)]
                ids, cls = pixel_ground_truth(frames, classes)
                keep = np.zeros(len(ids), bool)
                keep[: len(ids) // len(frames)] = True  # query view comes first
                insts, sem = run(scene, frames)
                ev.add(insts, sem, ids, cls, classes, keep)
    return ev.report()


def transfer_oracle_ids(frames, mesh_points, config: ModelConfig = ModelConfig()):
    """Instance id per mesh point from one-hot GT features pushed through the
    model's sensor-to-mesh path (1/8 cloud trilinear + 1/4 cloud skip).

    The identity rides on the 1/4 skip features; the 1/8 branch carries zeros.
    Its 0.16 m cells would otherwise outvote objects smaller than a cell."""
    batch = ViewBatch.from_frames(frames)
    k = config.knn_k
    v4, v8 = voxel_size_for_stride(4, config.voxel_v4), voxel_size_for_stride(8, config.voxel_v4)
    p8, p4 = batch.lift_plan(8, v8, k), batch.lift_plan(4, v4, k)
    n_ids = 1 + max(int(f.gt_instance.max()) for f in frames)
    prov = p4.cloud.provenance
    ids = np.array([frames[v].gt_instance[r * 4, c * 4] for v, r, c in prov])
    skip = torch.as_tensor(np.eye(n_ids)[ids])
    coarse = skip.new_zeros(len(p8.cloud.positions), n_ids)
    pts = np.asarray(mesh_points, dtype=np.float64).reshape(-1, 3)
    plan8 = trilinear_plan(p8.cloud.positions, config.upsample_voxel, pts)
    plan4 = trilinear_plan(p4.cloud.positions, v4, pts)
    return transfer_to_mesh(plan8, coarse, plan4, skip).argmax(1).numpy()


def oracle_predictor(scene, frames, mesh_points=None):
    """Perfect predictions for checking the evaluation harness: ground truth on
    pixel tokens, one-hot labels carried by the feature transfer on mesh points."""
    classes = scene.instance_classes()
    if mesh_points is not None:
        ids = transfer_oracle_ids(frames, mesh_points)
    else:
        ids, _ = pixel_ground_truth(frames, classes)
    cls = np.array([0 if i == 0 else classes[int(i)] for i in ids], dtype=np.int64)
    insts = [InstancePrediction(g.mask, g.class_id, 1.0) for g in gt_instances(ids, classes)]
    return insts, cls
