"""Patch-MLP forward/backward, head growth, checkpoint persistence."""

import numpy as np
import pytest

from fairseg.errors import ConfigError, DimensionError, FormatError
from fairseg.losses import (
    ConsConfig,
    cluster_loss,
    cons_loss,
    distill_loss,
    weighted_ce,
)
from fairseg.prototypes import ClusterConfig
from fairseg.model import (
    Checkpoint,
    backward,
    backward_batch,
    forward,
    forward_batch,
    grow_head,
    init_params,
    load_checkpoint,
    patch_matrix,
    save_checkpoint,
)
from fairseg.numerics import GradSlot, Rng, finite_diff_check
from fairseg.prototypes import FeatureBank, PrototypeBank


def small_params(seed=5, classes=(1, 2), patch_size=3, feature_dim=4,
                 hidden=(6,)):
    return init_params(
        seed,
        classes,
        patch_size=patch_size,
        feature_dim=feature_dim,
        hidden=hidden,
    )


def random_image(rng, h, w):
    return rng.uniforms(h * w * 3).reshape(h, w, 3)


class TestForward:
    def test_constant_image_constant_output(self):
        params = small_params()
        image = np.full((7, 9, 3), 0.4)
        pred = forward(params, image)
        first_feat = pred.features[0, 0]
        first_prob = pred.probs[0, 0]
        assert np.all(pred.features == first_feat)
        assert np.all(pred.probs == first_prob)

    def test_zero_params_uniform_probs(self):
        params = small_params()
        for name in params.blocks:
            params.blocks[name] = np.zeros_like(params.blocks[name])
        pred = forward(params, random_image(Rng(3), 6, 6))
        k = params.num_rows
        np.testing.assert_allclose(pred.probs, 1.0 / k, atol=1e-15)

    def test_probs_are_distributions(self):
        params = small_params()
        pred = forward(params, random_image(Rng(4), 8, 5))
        sums = pred.probs.sum(axis=2)
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)

    def test_locality(self):
        params = small_params(patch_size=5)
        rng = Rng(6)
        image = random_image(rng, 12, 12)
        base = forward(params, image)
        bumped = image.copy()
        bumped[6, 7] += 0.05
        after = forward(params, bumped)
        changed = np.any(base.features != after.features, axis=2)
        rr, cc = np.nonzero(changed)
        assert len(rr) > 0
        assert np.max(np.abs(rr - 6)) <= 2
        assert np.max(np.abs(cc - 7)) <= 2

    def test_forward_batch_matches_single(self):
        params = small_params()
        rng = Rng(7)
        images = [random_image(rng, 6, 6) for _ in range(3)]
        preds, _ = forward_batch(params, images)
        for img, joint in zip(images, preds):
            alone = forward(params, img)
            np.testing.assert_array_equal(alone.features, joint.features)
            np.testing.assert_array_equal(alone.logits, joint.logits)

    def test_deterministic(self):
        params = small_params()
        image = random_image(Rng(8), 6, 6)
        a = forward(params, image)
        b = forward(params, image)
        assert np.array_equal(a.logits, b.logits)

    def test_even_patch_rejected(self):
        with pytest.raises(ConfigError):
            init_params(1, (1,), patch_size=4)

    def test_patch_larger_than_image_rejected(self):
        params = small_params(patch_size=5)
        with pytest.raises(ConfigError):
            forward(params, np.zeros((4, 4, 3)))


class TestPatchMatrix:
    def test_reflect_padding_oracle(self):
        rng = Rng(9)
        image = random_image(rng, 5, 6)
        k = 3
        mats = patch_matrix(image, k)
        padded = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="reflect")
        for r in (0, 2, 4):
            for c in (0, 3, 5):
                window = padded[r : r + k, c : c + k, :]
                np.testing.assert_array_equal(
                    mats[r * 6 + c], window.reshape(-1)
                )

    def test_shape(self):
        mats = patch_matrix(np.zeros((8, 9, 3)), 5)
        assert mats.shape == (72, 75)

    def test_bad_image_shape(self):
        with pytest.raises(DimensionError):
            patch_matrix(np.zeros((8, 9, 4)), 3)


class TestGrowHead:
    def test_rows_preserved(self):
        params = init_params(2, (1, 2, 3, 4, 5))
        assert params.num_rows == 6
        grown = grow_head(params, (6, 7, 8), Rng(77).split("grow/step2"))
        assert grown.num_rows == 9
        np.testing.assert_array_equal(
            grown.blocks["head.W"][:6], params.blocks["head.W"]
        )
        np.testing.assert_array_equal(
            grown.blocks["head.b"][:6], params.blocks["head.b"]
        )
        assert grown.known_classes == (1, 2, 3, 4, 5, 6, 7, 8)

    def test_old_logits_unchanged(self):
        params = small_params()
        image = random_image(Rng(10), 6, 6)
        before = forward(params, image)
        grown = grow_head(params, (3,), Rng(1))
        after = forward(grown, image)
        np.testing.assert_array_equal(
            before.logits, after.logits[:, :, : params.num_rows]
        )

    def test_new_rows_deterministic_in_seed(self):
        params = small_params()
        a = grow_head(params, (3, 4), Rng(123))
        b = grow_head(params, (3, 4), Rng(123))
        np.testing.assert_array_equal(a.blocks["head.W"], b.blocks["head.W"])
        c = grow_head(params, (3, 4), Rng(124))
        assert not np.array_equal(a.blocks["head.W"], c.blocks["head.W"])

    def test_empty_growth_rejected(self):
        with pytest.raises(ConfigError):
            grow_head(small_params(), (), Rng(1))

    def test_row_lookup(self):
        params = init_params(2, (4, 9))
        grown = grow_head(params, (2,), Rng(5))
        assert grown.row_of(0) == 0
        assert grown.row_of(4) == 1
        assert grown.row_of(9) == 2
        assert grown.row_of(2) == 3
        assert grown.class_of_row(3) == 2
        with pytest.raises(DimensionError):
            grown.row_of(77)


class TestBackward:
    def test_zero_upstream_zero_grads(self):
        params = small_params()
        pred = forward(params, random_image(Rng(11), 6, 6))
        slot = backward(
            params,
            pred,
            np.zeros_like(pred.features),
            np.zeros_like(pred.logits),
        )
        for g in slot.grads.values():
            assert not g.any()

    def test_linearity(self):
        params = small_params()
        rng = Rng(12)
        pred = forward(params, random_image(rng, 6, 6))
        df = rng.normals(pred.features.size).reshape(pred.features.shape)
        dl = rng.normals(pred.logits.size).reshape(pred.logits.shape)
        one = backward(params, pred, df, dl)
        two = backward(params, pred, 2.0 * df, 2.0 * dl)
        for name in one.grads:
            np.testing.assert_allclose(
                two.grads[name], 2.0 * one.grads[name], atol=1e-12
            )

    def test_shape_mismatch_rejected(self):
        params = small_params()
        _, cache = forward_batch(params, [random_image(Rng(13), 5, 5)])
        with pytest.raises(DimensionError):
            backward_batch(
                params, cache, np.zeros((3, 4)), np.zeros_like(cache.logits)
            )

    def test_quadratic_surrogate_matches_finite_differences(self):
        """Parameter-space check through every layer of the network."""
        params = small_params(seed=21, classes=(1, 2), patch_size=3,
                              feature_dim=4, hidden=(6,))
        rng = Rng(22)
        image = random_image(rng, 5, 5)
        wf = rng.uniforms(25 * 4).reshape(25, 4) + 0.5
        wl = rng.uniforms(25 * 3).reshape(25, 3) + 0.5

        def loss(blocks):
            trial = params.copy()
            trial.blocks = {k: np.asarray(v) for k, v in blocks.items()}
            _, cache = forward_batch(trial, [image])
            value = float(
                np.sum(wf * cache.feats**2) + np.sum(wl * cache.logits**2)
            )
            grads = backward_batch(
                trial, cache, 2.0 * wf * cache.feats, 2.0 * wl * cache.logits
            )
            return GradSlot(value=value, grads=grads)

        err = finite_diff_check(loss, params.blocks, epsilon=1e-6)
        assert err <= 1e-5

    def test_full_loss_stack_matches_finite_differences(self):
        """CE + clustering + smoothness + distillation, 8x8 image, 4 classes."""
        params = small_params(seed=31, classes=(1, 2, 3, 4), patch_size=3,
                              feature_dim=5, hidden=(6,))
        rng = Rng(32)
        h = w = 8
        image = random_image(rng, h, w)
        labels = np.array(
            [rng.randint(5) for _ in range(h * w)], dtype=np.int64
        ).reshape(h, w)
        mask = np.ones((h, w), dtype=bool)
        protos = PrototypeBank(5)
        protos.register([0, 1, 2, 3, 4])
        for cid in range(5):
            entry = protos.entries[cid]
            entry.vector = rng.normals(5) * 2.0
            entry.initialized = True
        ccfg = ClusterConfig(margin=1.0).validate()
        ncfg = ConsConfig().validate()
        feats_prev = rng.normals(h * w * 5).reshape(h, w, 5)
        row_weights = np.asarray(rng.uniforms(5) + 0.5)

        def loss(blocks):
            trial = params.copy()
            trial.blocks = {k: np.asarray(v) for k, v in blocks.items()}
            _, cache = forward_batch(trial, [image])
            feats = cache.feats.reshape(h, w, 5)
            logits = cache.logits.reshape(h, w, -1)
            ce = weighted_ce(
                logits.reshape(h * w, -1),
                labels.reshape(-1),
                mask.reshape(-1),
                row_weights=row_weights,
            )
            clu = cluster_loss(feats, labels, protos, ccfg)
            con = cons_loss(image, cache.probs.reshape(h, w, -1), ncfg)
            dis = distill_loss(feats, feats_prev)
            value = ce.value + 0.5 * clu.value + 0.25 * con.value + dis.value
            dfeats = (
                0.5 * clu.grads["features"] + dis.grads["features"]
            ).reshape(h * w, 5)
            dlogits = ce.grads["logits"] + 0.25 * con.grads[
                "logits"
            ].reshape(h * w, -1)
            grads = backward_batch(trial, cache, dfeats, dlogits)
            return GradSlot(value=value, grads=grads)

        err = finite_diff_check(loss, params.blocks, epsilon=1e-6)
        assert err <= 1e-5


def make_checkpoint(seed=51, with_distill=False):
    rng = Rng(seed)
    params = small_params(seed=seed, classes=(1, 2))
    momentum = {k: np.asarray(rng.normals(v.size)).reshape(v.shape) * 0.01
                for k, v in params.blocks.items()}
    protos = PrototypeBank(params.feature_dim)
    protos.register([0, 1, 2])
    protos.entries[1].vector = rng.normals(params.feature_dim)
    protos.entries[1].initialized = True
    protos.entries[1].frozen = True
    bank = FeatureBank(params.feature_dim, 7)
    bank.deposit(0, rng.normals(params.feature_dim))
    bank.deposit(2, rng.normals(params.feature_dim))
    bank.deposit(2, rng.normals(params.feature_dim))
    distill = None
    if with_distill:
        distill = {k: v.copy() for k, v in params.blocks.items()}
    return Checkpoint(
        step=2,
        epoch=3,
        iteration=17,
        params=params,
        momentum=momentum,
        protos=protos,
        bank=bank,
        bank_capacity=7,
        pixel_counts={0: 120, 1: 30, 2: 9},
        rng_state=Rng(seed).state_tuple(),
        distill=distill,
    )


class TestCheckpoint:
    @pytest.mark.parametrize("with_distill", [False, True])
    def test_save_load_save_byte_identical(self, tmp_path, with_distill):
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        ckpt = make_checkpoint(with_distill=with_distill)
        save_checkpoint(first, ckpt)
        loaded = load_checkpoint(first)
        save_checkpoint(second, loaded)
        assert first.read_bytes() == second.read_bytes()

    def test_round_trip_preserves_state(self, tmp_path):
        path = tmp_path / "c.ckpt"
        ckpt = make_checkpoint(with_distill=True)
        save_checkpoint(path, ckpt)
        back = load_checkpoint(path)
        assert back.step == ckpt.step
        assert back.epoch == ckpt.epoch
        assert back.iteration == ckpt.iteration
        assert back.rng_state == ckpt.rng_state
        assert back.params.class_steps == ckpt.params.class_steps
        assert back.params.hidden == ckpt.params.hidden
        for name, arr in ckpt.params.blocks.items():
            np.testing.assert_array_equal(back.params.blocks[name], arr)
        for name, arr in ckpt.momentum.items():
            np.testing.assert_array_equal(back.momentum[name], arr)
        for name, arr in ckpt.distill.items():
            np.testing.assert_array_equal(back.distill[name], arr)
        assert sorted(back.protos.entries) == [0, 1, 2]
        assert back.protos.is_frozen(1) and back.protos.is_initialized(1)
        np.testing.assert_array_equal(
            back.protos.vector(1), ckpt.protos.vector(1)
        )
        assert back.bank.size(2) == 2
        np.testing.assert_array_equal(
            back.bank.mean(2), ckpt.bank.mean(2)
        )
        assert back.pixel_counts == ckpt.pixel_counts

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        save_checkpoint(path, make_checkpoint())
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="FCLK"):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "vers.ckpt"
        save_checkpoint(path, make_checkpoint())
        raw = bytearray(path.read_bytes())
        raw[4:6] = (9).to_bytes(2, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "trunc.ckpt"
        save_checkpoint(path, make_checkpoint())
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(path)
