import numpy as np
import pytest

from mmkg_align import encoders as enc
from mmkg_align import kgdata as kd
from mmkg_align import tensor as T
from mmkg_align.tensor import Tensor


def micro_bundle(tmp_path, n=8, seed=0, **kwargs):
    spec = kd.SynthSpec(n_entities=n, n_relations=3, n_attributes=4,
                        edge_factor=2.0, latent_dim=4, img_dim=5, **kwargs)
    kd.generate_synthetic(spec, rng_seed=seed, out_dir=str(tmp_path))
    pair = kd.load_kg_pair(str(tmp_path), train_ratio=0.5, dev_fraction=0.0)
    bundle = kd.build_feature_bundle(pair, str(tmp_path), bigram_dim=16)
    return pair, bundle


def self_loops(n):
    idx = np.arange(n)
    return idx, idx


class TestGatHead:
    def test_self_loops_only_is_relu_identity(self):
        rng = np.random.default_rng(0)
        h = Tensor(rng.normal(size=(5, 3)))
        head = enc.GatHead(w_diag=Tensor(rng.normal(size=3)),
                           attn=Tensor(rng.normal(size=6)))
        dst, src = self_loops(5)
        out = enc.gat_head(h, dst, src, head)
        np.testing.assert_allclose(out.data, np.maximum(h.data, 0.0), atol=1e-14)

    def test_zero_attention_averages_neighbours(self):
        h = Tensor(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
        head = enc.GatHead(w_diag=Tensor(np.ones(2)), attn=Tensor(np.zeros(4)))
        dst = np.array([0, 0, 0, 1, 2])
        src = np.array([0, 1, 2, 1, 2])
        out = enc.gat_head(h, dst, src, head)
        np.testing.assert_allclose(out.data[0], [3.0, 4.0], atol=1e-14)
        np.testing.assert_allclose(out.data[1], [3.0, 4.0], atol=1e-14)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        n = 6
        h = Tensor(rng.normal(size=(n, 4)), requires_grad=True)
        head = enc.GatHead(w_diag=Tensor(rng.normal(size=4), requires_grad=True),
                           attn=Tensor(rng.normal(size=8), requires_grad=True))
        extra_dst = rng.integers(0, n, size=10)
        extra_src = rng.integers(0, n, size=10)
        dst = np.concatenate([np.arange(n), extra_dst])
        src = np.concatenate([np.arange(n), extra_src])

        def f(ps):
            out = enc.gat_head(h, dst, src, enc.GatHead(ps[1], ps[2]))
            return (out * out).sum()

        err = T.grad_check(f, [h, head.w_diag, head.attn], eps=1e-5)
        assert err < 1e-5


class TestEncoders:
    def test_linear_encode_gradcheck(self):
        rng = np.random.default_rng(2)
        u = Tensor((rng.random((6, 7)) > 0.5).astype(float))
        w = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)

        def f(ps):
            out = enc.linear_encode(u, ps[0], ps[1])
            return (out * out).mean()

        assert T.grad_check(f, [w, b]) < 1e-5

    def test_fuse_equal_logits_segment_norms(self):
        rng = np.random.default_rng(3)
        modal = {m: Tensor(rng.normal(size=(4, 3))) for m in enc.MODALITIES}
        joint = enc.fuse_joint(modal, list(enc.MODALITIES), Tensor(np.zeros(5)))
        assert joint.shape == (4, 15)
        for k in range(5):
            seg = joint.data[:, 3 * k:3 * (k + 1)]
            np.testing.assert_allclose(np.linalg.norm(seg, axis=1), np.full(4, 0.2),
                                       atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(joint.data, axis=1),
                                   np.full(4, 1.0 / np.sqrt(5)), atol=1e-12)

    def test_fuse_invariances(self):
        rng = np.random.default_rng(4)
        modal = {m: Tensor(rng.normal(size=(3, 2))) for m in enc.MODALITIES}
        order = list(enc.MODALITIES)
        base = enc.fuse_joint(modal, order, Tensor(np.full(5, 1.7))).data
        shifted = enc.fuse_joint(modal, order, Tensor(np.full(5, 4.7))).data
        np.testing.assert_allclose(base, shifted, atol=1e-14)
        scaled = dict(modal)
        scaled["name"] = Tensor(modal["name"].data * 37.0)
        again = enc.fuse_joint(scaled, order, Tensor(np.full(5, 1.7))).data
        np.testing.assert_allclose(base, again, atol=1e-12)

    def test_fuse_gradcheck(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        logits = Tensor(rng.normal(size=2), requires_grad=True)
        # a linear probe keeps the objective sensitive to every input;
        # sum(joint**2) would be constant in a and b after normalization
        probe = Tensor(rng.normal(size=(3, 6)))

        def f(ps):
            joint = enc.fuse_joint({"x": ps[0], "y": ps[1]}, ["x", "y"], ps[2])
            return (joint * probe).sum()

        assert T.grad_check(f, [a, b, logits]) < 1e-5


class TestForwardAll:
    def test_default_widths(self, tmp_path):
        pair, bundle = micro_bundle(tmp_path)
        rng = np.random.default_rng(0)
        params = enc.init_params(bundle, list(enc.MODALITIES), 300, 100, 2, rng)
        emb = enc.forward_all(params, bundle)
        n = bundle.n_total
        assert emb.modal["structure"].shape == (n, 600)
        for m in enc.AFFINE_MODALITIES:
            assert emb.modal[m].shape == (n, 100)
        assert emb.joint.shape == (n, 1000)

    def test_modality_toggle_renormalizes(self, tmp_path):
        pair, bundle = micro_bundle(tmp_path)
        rng = np.random.default_rng(1)
        subset = ["relation", "name"]
        params = enc.init_params(bundle, subset, 8, 6, 2, rng)
        assert params.entity_embed is None
        assert params.fusion_logits.shape == (2,)
        assert params.uncert_contrastive.shape == (3,)
        emb = enc.forward_all(params, bundle)
        assert set(emb.modal) == set(subset)
        assert emb.joint.shape == (bundle.n_total, 12)
        norms = np.linalg.norm(emb.joint.data[:, :6], axis=1)
        np.testing.assert_allclose(norms, np.full(bundle.n_total, 0.5), atol=1e-12)

    def test_structure_encode_gradcheck_micro(self, tmp_path):
        pair, bundle = micro_bundle(tmp_path, n=6)
        rng = np.random.default_rng(2)
        params = enc.init_params(bundle, ["structure"], 4, 3, 2, rng)

        def f(ps):
            out = enc.structure_encode(params, bundle)
            return (out * out).sum()

        targets = [params.entity_embed] + [h.attn for layer in params.gat_layers
                                           for h in layer]
        assert T.grad_check(f, targets, eps=1e-5) < 1e-5

    def test_init_deterministic(self, tmp_path):
        pair, bundle = micro_bundle(tmp_path)
        a = enc.init_params(bundle, list(enc.MODALITIES), 8, 6, 2,
                            np.random.default_rng(7))
        b = enc.init_params(bundle, list(enc.MODALITIES), 8, 6, 2,
                            np.random.default_rng(7))
        for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_dropout_changes_training_forward_only(self, tmp_path):
        pair, bundle = micro_bundle(tmp_path)
        params = enc.init_params(bundle, ["name", "visual"], 8, 6, 2,
                                 np.random.default_rng(3))
        plain = enc.forward_all(params, bundle)
        dropped = enc.forward_all(params, bundle, dropout_rate=0.5,
                                  rng=np.random.default_rng(0))
        assert not np.allclose(plain.joint.data, dropped.joint.data)
        again = enc.forward_all(params, bundle)
        np.testing.assert_array_equal(plain.joint.data, again.joint.data)
