import numpy as np
import pytest
import torch

from omniseg.errors import EmptyTokensError
from omniseg.fusion3d import (
    FusionStage,
    RelPosAttentionLayer,
    build_lift_plan,
    lift_to_3d,
    lift_with_plan,
    project_to_2d,
    relpos_attention_forward,
)
from omniseg.geometry import knn
from omniseg.scenedata import SceneConfig, generate_scene

from helpers import facing_camera, randomize, rotated_y, shifted

D = 8


def wall_depth(h, w, z=2.0):
    return np.full((h, w), z)


def maps(v, h, w, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(v, D, h, w, generator=g, dtype=torch.float64)


def test_singleton_voxels_one_token_per_pixel():
    intr, pose = facing_camera(8, 8)
    tok = lift_to_3d(maps(1, 8, 8), [wall_depth(8, 8)], [intr], [pose], 1, 1e-3)
    assert tok.features.shape == (64, D)


def test_coincident_views_average():
    intr, pose = facing_camera(8, 8)
    m = maps(2, 8, 8)
    tok = lift_to_3d(m, [wall_depth(8, 8)] * 2, [intr] * 2, [pose] * 2, 1, 1e-3)
    assert tok.features.shape == (64, D)
    expected = (m[0] + m[1]).permute(1, 2, 0).reshape(64, D) / 2
    # voxels are numbered by first appearance, i.e. view 0's pixel order
    torch.testing.assert_close(tok.features, expected)


def test_huge_voxel_gives_centroid_token():
    intr, pose = facing_camera(8, 8)
    m = maps(1, 8, 8)
    tok = lift_to_3d(m, [wall_depth(8, 8)], [intr], [pose], 1, 1e6)
    assert tok.features.shape == (1, D)
    torch.testing.assert_close(tok.features[0], m[0].mean((1, 2)))
    np.testing.assert_allclose(tok.positions[0], tok.plan.cloud.positions.mean(0))


def test_all_missing_depth_raises():
    intr, pose = facing_camera(8, 8)
    with pytest.raises(EmptyTokensError):
        lift_to_3d(maps(1, 8, 8), [np.zeros((8, 8))], [intr], [pose], 1, 0.1)


def test_lift_uses_stride_and_resized_depth():
    intr, pose = facing_camera(32, 32)
    depth = wall_depth(32, 32)
    depth[:, :16] = 3.0
    tok = lift_to_3d(maps(1, 8, 8), [depth], [intr], [pose], 4, 1e-3)
    # columns 0..3 at stride 4 read full-res columns 0, 4, 8, 12: the far wall
    cam_z = (tok.plan.cloud.positions - pose.translation) @ pose.rotation[:, 2]
    cols = tok.plan.cloud.provenance[:, 2]
    np.testing.assert_allclose(cam_z[cols < 4], 3.0)
    np.testing.assert_allclose(cam_z[cols >= 4], 2.0)


def random_tokens(m=30, seed=0, k=8):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-1, 1, size=(m, 3))
    graph = knn(pos, k)
    feats = torch.as_tensor(rng.normal(size=(m, D)))
    return pos, graph, feats


def run_layer(layer, graph, feats, scale=0.1):
    nbr = torch.as_tensor(graph.neighbor_index)
    rel = torch.as_tensor(graph.relative_offset / scale)
    return layer(feats, nbr, rel)


def test_zero_init_layer_is_identity():
    torch.manual_seed(0)
    layer = RelPosAttentionLayer(D, 4).double()
    _, graph, feats = random_tokens()
    assert torch.equal(run_layer(layer, graph, feats), feats)


def test_translation_invariance_of_attention():
    layer = randomize(RelPosAttentionLayer(D, 4).double(), 3)
    pos, graph, feats = random_tokens()
    base = run_layer(layer, graph, feats)
    for t in ([5.0, -3.0, 0.25], [123.4, 0.0, -77.7]):
        g2 = knn(pos + np.array(t), 8)
        out = run_layer(layer, g2, feats)
        assert ((out - base).abs().max() / base.abs().max()) <= 1e-5


def test_rotation_changes_attention_output():
    layer = randomize(RelPosAttentionLayer(D, 4).double(), 3)
    pos, graph, feats = random_tokens()
    rot = np.array([[0.0, 0, 1], [0, 1, 0], [-1, 0, 0]])
    out = run_layer(layer, knn(pos @ rot.T, 8), feats)
    assert (out - run_layer(layer, graph, feats)).abs().max() > 1e-3


def test_single_token_attends_to_itself():
    layer = randomize(RelPosAttentionLayer(D, 4).double(), 5)
    pos, graph, feats = random_tokens(1, k=8)
    nbr = torch.as_tensor(graph.neighbor_index)
    _, attn = layer.attention_weights(feats, nbr, torch.as_tensor(graph.relative_offset))
    # padding repeats self, so the whole mass sits on token 0
    assert torch.allclose(attn.sum(-1), torch.ones(1, 4, dtype=torch.float64))
    assert (nbr == 0).all()


def attention_oracle(layer, x, nbr, rel):
    """Per-token loop version of one attention layer."""
    heads = layer.heads
    d = x.shape[1] // heads
    out = []
    with torch.no_grad():
        h = layer.norm1(x)
        qpos = layer.pos_mlp(torch.zeros(3, dtype=x.dtype))
        for i in range(x.shape[0]):
            q = layer.q(h[i] + qpos)
            acc = []
            for hd in range(heads):
                sl = slice(hd * d, (hd + 1) * d)
                logits = []
                vals = []
                for jj, j in enumerate(nbr[i]):
                    k = layer.k(h[j] + layer.pos_mlp(rel[i, jj]))
                    logits.append(float(q[sl] @ k[sl]) / np.sqrt(d))
                    vals.append(layer.v(h[j])[sl])
                w = np.exp(np.array(logits) - max(logits))
                w /= w.sum()
                acc.append(sum(float(wi) * v for wi, v in zip(w, vals)))
            y = x[i] + layer.out(torch.cat(acc))
            out.append(y + layer.ffn(layer.norm2(y)))
    return torch.stack(out)


def test_attention_matches_loop_oracle():
    layer = randomize(RelPosAttentionLayer(D, 4).double(), 7)
    _, graph, feats = random_tokens(12, 1, 4)
    nbr = torch.as_tensor(graph.neighbor_index)
    rel = torch.as_tensor(graph.relative_offset / 0.1)
    torch.testing.assert_close(layer(feats, nbr, rel), attention_oracle(layer, feats, nbr, rel))


def test_project_round_trip_and_passthrough():
    intr, pose = facing_camera(8, 8)
    depth = wall_depth(8, 8)
    depth[2, 3] = 0.0
    plan = build_lift_plan([depth], [intr], [pose], 1, 1e-3, 8)
    m = maps(1, 8, 8)
    tok = lift_with_plan(m, plan)
    assert torch.equal(project_to_2d(tok, tok.features, m), m)
    out = project_to_2d(tok, torch.zeros_like(tok.features), m)
    assert torch.equal(out[0, :, 2, 3], m[0, :, 2, 3])
    assert (out[0, :, 2, 4] == 0).all()


def test_pixels_sharing_a_voxel_get_the_same_feature():
    intr, pose = facing_camera(8, 8)
    plan = build_lift_plan([wall_depth(8, 8)], [intr], [pose], 1, 0.5, 8)
    tok = lift_with_plan(maps(1, 8, 8), plan)
    upd = torch.randn_like(tok.features)
    out = project_to_2d(tok, upd, maps(1, 8, 8)).permute(0, 2, 3, 1).reshape(64, D)
    p2v = plan.grid.point_to_voxel
    for v in np.unique(p2v):
        rows = out[torch.as_tensor(p2v == v)]
        assert (rows == upd[v]).all()


def scene_geometry(views=2, seed=3):
    s = generate_scene(seed, SceneConfig(width=32, height=32, views=views))
    return [f.depth for f in s.frames], [f.intrinsics for f in s.frames], [f.pose for f in s.frames]


def stage_out(stage, m, depths, intr, poses, voxel=0.08):
    return stage(m, build_lift_plan(depths, intr, poses, 4, voxel, 8))


def test_zero_init_stage_is_identity():
    torch.manual_seed(0)
    stage = FusionStage(D, 2, 4).double()
    depths, intr, poses = scene_geometry()
    m = maps(2, 8, 8)
    assert torch.equal(stage_out(stage, m, depths, intr, poses), m)
    assert torch.equal(FusionStage(D, 0).double()(m, build_lift_plan(depths, intr, poses, 4, 0.08, 8)), m)


def test_stage_translation_by_voxel_multiples():
    stage = randomize(FusionStage(D, 2, 4).double(), 11, 0.2)
    depths, intr, poses = scene_geometry()
    m = maps(2, 8, 8)
    base = stage_out(stage, m, depths, intr, poses)
    t = 0.08 * np.array([3.0, -2.0, 5.0])
    moved = stage_out(stage, m, depths, intr, [shifted(p, t) for p in poses])
    assert ((moved - base).abs().max() / base.abs().max()) <= 1e-5


def test_stage_rotation_is_not_invariant():
    stage = randomize(FusionStage(D, 2, 4).double(), 11, 0.2)
    depths, intr, poses = scene_geometry()
    m = maps(2, 8, 8)
    base = stage_out(stage, m, depths, intr, poses)
    rot = stage_out(stage, m, depths, intr, [rotated_y(p) for p in poses])
    assert (rot - base).abs().max() > 1e-3


def test_stage_view_permutation_equivariance():
    stage = randomize(FusionStage(D, 2, 4).double(), 13, 0.2)
    depths, intr, poses = scene_geometry(views=3)
    m = maps(3, 8, 8)
    base = stage_out(stage, m, depths, intr, poses)
    order = [2, 0, 1]
    perm = stage_out(stage, m[order], [depths[i] for i in order], [intr[i] for i in order], [poses[i] for i in order])
    torch.testing.assert_close(perm, base[order], rtol=1e-9, atol=1e-9)


def test_stage_deterministic_and_relpos_forward():
    stage = randomize(FusionStage(D, 2, 4).double(), 17, 0.2)
    depths, intr, poses = scene_geometry()
    m = maps(2, 8, 8)
    assert torch.equal(stage_out(stage, m, depths, intr, poses), stage_out(stage, m, depths, intr, poses))
    tok = lift_with_plan(m, build_lift_plan(depths, intr, poses, 4, 0.08, 8))
    assert torch.equal(relpos_attention_forward(stage, tok), stage.attend(tok))
