"""Optimizer, config parsing and training-loop behavior."""

import dataclasses

import numpy as np
import pytest

from cropeq.data import (
    MANIFEST_VERSION,
    DatasetManifest,
    build_dataset,
    write_manifest,
    write_map,
)
from cropeq.errors import ConfigError, DivergenceError
from cropeq.geometry import CropSampler, DenseMap, Semantics, apply
from cropeq.model import PredictorNetConfig, load_checkpoint
from cropeq.training import (
    AdamWState,
    TrainConfig,
    adamw_step,
    cosine_lr,
    finetune_unsupervised,
    load_train_config,
    parse_config_text,
    train,
    train_config_from_mapping,
)
from cropeq import training as training_mod

TINY_NET = PredictorNetConfig(base_channels=4, depth_blocks=1,
                              feature_channels=8)
SMALL_SAMPLER = CropSampler(out_h=16, out_w=16, scale_lo=0.5, scale_hi=0.9)


def small_config(**overrides) -> TrainConfig:
    base = dict(mode="aug", task="depth", k_crops=3, lam=1e-4, steps=4,
                batch_images=2, sampler=SMALL_SAMPLER, net=TINY_NET,
                seed=3, val_every=2, val_images=2)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainds")
    return build_dataset(root / "ds", n_train=6, n_val=3, h=32, w=32,
                         seed_base=50)


@pytest.fixture(scope="module")
def teacher_checkpoint(tmp_path_factory, dataset):
    train_m, val_m = dataset
    out = tmp_path_factory.mktemp("teacher")
    res = train(small_config(steps=3, val_every=0), train_m, out)
    return res.checkpoint_path


def constant_image_manifest(tmp_path, h=32, w=32):
    """A one-image split where every map is spatially constant."""
    root = tmp_path / "const"
    d = root / "train"
    d.mkdir(parents=True)
    flat_normal = np.broadcast_to(np.array([0.0, 0.0, 1.0]), (h, w, 3)).copy()
    maps = {
        "rgb": DenseMap(np.full((h, w, 3), 0.55), Semantics.RGB),
        "depth": DenseMap(np.full((h, w, 1), 2.0), Semantics.DEPTH),
        "disparity": DenseMap(np.full((h, w, 1), 0.5), Semantics.DISPARITY),
        "normal": DenseMap(flat_normal, Semantics.NORMAL),
        "edge": DenseMap(np.full((h, w, 1), 0.05), Semantics.EDGE),
    }
    sid = "scene0000001"
    for kind, m in maps.items():
        write_map(m, d / f"{sid}_{kind}.dmap")
    manifest = DatasetManifest(
        root=root, split="train", ids=(sid,),
        header={"format_version": str(MANIFEST_VERSION), "split": "train",
                "height": str(h), "width": str(w), "complexity": "0",
                "count": "1"},
    )
    write_manifest(manifest)
    return manifest


def metric_series(rows, name):
    return [r.value for r in rows if r.metric_name == name]


class TestAdamW:
    def test_zero_gradient_applies_pure_decay(self):
        params = np.array([2.0, -3.0, 0.5])
        state = AdamWState.zeros(3)
        out = adamw_step(params, np.zeros(3), state, lr=0.01,
                         weight_decay=0.1)
        np.testing.assert_array_equal(out, params * 0.999)

    def test_first_step_unit_gradient(self):
        state = AdamWState.zeros(1)
        out = adamw_step(np.zeros(1), np.ones(1), state, lr=0.1,
                         weight_decay=0.0)
        expected = -0.1 / (1.0 + state.eps)
        np.testing.assert_allclose(out[0], expected, rtol=1e-15)

    def test_matches_reference_adam_without_decay(self):
        rng = np.random.default_rng(11)
        n = 7
        params = rng.normal(size=n)
        state = AdamWState.zeros(n)
        # Textbook Adam accumulated independently.
        ref = params.copy()
        m = np.zeros(n)
        v = np.zeros(n)
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 1e-3
        for t in range(1, 31):
            g = rng.normal(size=n)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref = ref - lr * (m / (1 - b1 ** t)) / (
                np.sqrt(v / (1 - b2 ** t)) + eps
            )
            params = adamw_step(params, g, state, lr=lr, weight_decay=0.0)
        np.testing.assert_allclose(params, ref, atol=1e-10)

    def test_decay_is_decoupled_from_moments(self):
        rng = np.random.default_rng(4)
        params = rng.normal(size=5)
        g = rng.normal(size=5)
        with_wd = adamw_step(params, g, AdamWState.zeros(5), lr=0.01,
                             weight_decay=0.2)
        without = adamw_step(params, g, AdamWState.zeros(5), lr=0.01,
                             weight_decay=0.0)
        np.testing.assert_allclose(with_wd, without - 0.01 * 0.2 * params,
                                   rtol=1e-14)

    def test_nonfinite_gradient_raises(self):
        state = AdamWState.zeros(2)
        state.t = 17
        with pytest.raises(DivergenceError, match="step 17"):
            adamw_step(np.zeros(2), np.array([1.0, np.inf]), state,
                       lr=0.1, weight_decay=0.0)


class TestCosineSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3)
        assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
        assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx(
            (1e-3 + 1e-5) / 2
        )

    def test_monotone_decay(self):
        values = [cosine_lr(s, 40, 1.0, 0.1) for s in range(41)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_out_of_range_step(self):
        with pytest.raises(ConfigError, match="outside"):
            cosine_lr(11, 10, 1e-3, 0.0)


class TestTrainConfig:
    def test_rejects_unknown_mode_and_task(self):
        with pytest.raises(ConfigError, match="mode"):
            TrainConfig(mode="sgd")
        with pytest.raises(ConfigError, match="task"):
            TrainConfig(task="segmentation")

    def test_rejects_bad_counts(self):
        with pytest.raises(ConfigError):
            TrainConfig(k_crops=0)
        with pytest.raises(ConfigError):
            TrainConfig(steps=0)
        with pytest.raises(ConfigError):
            TrainConfig(lam=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(lam_unlabeled=-0.5)

    def test_resolved_net_matches_task(self):
        depth = TrainConfig(task="depth").resolved_net()
        assert (depth.out_channels, depth.out_activation) == (1, "softplus")
        normal = TrainConfig(task="normal").resolved_net()
        assert (normal.out_channels, normal.out_activation) == (3, "linear")
        assert normal.out_semantics == "normal"
        edge = TrainConfig(task="edge").resolved_net()
        assert (edge.out_channels, edge.out_activation) == (1, "sigmoid")

    def test_unlabeled_coefficient_defaults_to_lam(self):
        assert TrainConfig(lam=0.3).effective_lam_unlabeled == 0.3
        assert TrainConfig(lam=0.3,
                           lam_unlabeled=0.1).effective_lam_unlabeled == 0.1


class TestConfigParsing:
    def test_parse_text_skips_comments_and_blanks(self):
        text = "# header\nmode = eqloss\n\nsteps = 12  # inline\n"
        assert parse_config_text(text) == {"mode": "eqloss", "steps": "12"}

    def test_parse_text_rejects_bare_words(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("a = 1\nnonsense\n")

    def test_mapping_scalars_and_nested(self):
        cfg = train_config_from_mapping({
            "mode": "eqloss",
            "lam": "0.5",
            "lam_warmup_steps": "40",
            "steps": "7",
            "sampler.scale_lo": "0.6",
            "sampler.jitter.hue": "0.0",
            "net.base_channels": "4",
            "net.coord_features": "true",
        })
        assert cfg.mode == "eqloss"
        assert cfg.lam == 0.5
        assert cfg.lam_warmup_steps == 40
        assert cfg.steps == 7
        assert cfg.sampler.scale_lo == 0.6
        assert cfg.sampler.jitter.hue == 0.0
        assert cfg.net.base_channels == 4
        assert cfg.net.coord_features is True
        # untouched siblings keep their defaults
        assert cfg.sampler.scale_hi == CropSampler().scale_hi

    def test_optional_float_parses_none_and_number(self):
        assert train_config_from_mapping(
            {"lam_unlabeled": "none"}).lam_unlabeled is None
        assert train_config_from_mapping(
            {"lam_unlabeled": "0.25"}).lam_unlabeled == 0.25

    def test_unknown_key_and_section(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            train_config_from_mapping({"momentum": "0.9"})
        with pytest.raises(ConfigError, match="unknown config section"):
            train_config_from_mapping({"optimizer.beta1": "0.9"})

    def test_bad_bool_and_bad_number(self):
        with pytest.raises(ConfigError, match="boolean"):
            train_config_from_mapping({"net.coord_features": "maybe"})
        with pytest.raises(ConfigError, match="bad value"):
            train_config_from_mapping({"steps": "many"})

    def test_load_file_with_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("mode = aug\nsteps = 5\nlr_start = 0.01\n")
        cfg = load_train_config(path, overrides={"steps": "9"})
        assert cfg.mode == "aug"
        assert cfg.steps == 9
        assert cfg.lr_start == 0.01


class TestLoopMechanics:
    def test_zero_coefficient_matches_plain_augmentation(self, dataset,
                                                         tmp_path):
        train_m, val_m = dataset
        runs = {}
        for mode in ("aug", "eqloss"):
            cfg = small_config(mode=mode, lam=0.0, steps=5)
            runs[mode] = train(cfg, train_m, tmp_path / mode,
                               val_manifest=val_m, run_id="same")
        np.testing.assert_array_equal(runs["aug"].net.params,
                                      runs["eqloss"].net.params)
        assert (runs["aug"].csv_path.read_bytes()
                == runs["eqloss"].csv_path.read_bytes())

    def test_seeded_rerun_is_bitwise_identical(self, dataset, tmp_path):
        train_m, val_m = dataset
        cfg = small_config(mode="eqloss", lam=0.1, steps=5)
        a = train(cfg, train_m, tmp_path / "a", val_manifest=val_m,
                  run_id="r")
        b = train(cfg, train_m, tmp_path / "b", val_manifest=val_m,
                  run_id="r")
        np.testing.assert_array_equal(a.net.params, b.net.params)
        assert a.csv_path.read_bytes() == b.csv_path.read_bytes()

    def test_consistency_term_changes_training(self, dataset, tmp_path):
        train_m, _ = dataset
        plain = train(small_config(mode="aug", steps=5), train_m,
                      tmp_path / "plain")
        with_eq = train(small_config(mode="eqloss", lam=0.1, steps=5),
                        train_m, tmp_path / "witheq")
        assert not np.array_equal(plain.net.params, with_eq.net.params)

    def test_warmup_defers_consistency_term(self, dataset, tmp_path):
        # With the warm-up covering the whole run the consistency term
        # never fires, so the run matches plain augmentation bitwise; with
        # a partial warm-up only the tail differs.
        train_m, _ = dataset
        plain = train(small_config(mode="aug", steps=6), train_m,
                      tmp_path / "plain")
        deferred = train(small_config(mode="eqloss", lam=0.1, steps=6,
                                      lam_warmup_steps=6),
                         train_m, tmp_path / "deferred")
        partial = train(small_config(mode="eqloss", lam=0.1, steps=6,
                                     lam_warmup_steps=3),
                        train_m, tmp_path / "partial")
        np.testing.assert_array_equal(plain.net.params, deferred.net.params)
        assert not np.array_equal(plain.net.params, partial.net.params)
        eq_series = metric_series(partial.rows, "train_eq")
        assert all(v == 0.0 for v in eq_series[:3])
        assert any(v > 0.0 for v in eq_series[3:])

    def test_negative_warmup_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(lam_warmup_steps=-1)

    def test_validation_transforms_fixed_and_at_eval_protocol(self):
        # The validation crop set must not depend on the run seed (so
        # scores compare across runs) and must follow the evaluation
        # protocol: in-frame crops at scale 0.85-1.0, no jitter.
        a = training_mod._validation_transforms(
            small_config(seed=0), n_images=3, src_h=32, src_w=32)
        b = training_mod._validation_transforms(
            small_config(seed=123), n_images=3, src_h=32, src_w=32)
        assert a == b
        for per_image in a:
            for t in per_image:
                assert 0.85 * 32 - 1e-9 <= t.win_h <= 32.0
                assert t.y0 >= 0 and t.y0 + t.win_h <= 32.0
                assert t.jitter is None

    def test_supervised_ignores_crop_sampler(self, dataset, tmp_path):
        train_m, _ = dataset
        other = CropSampler(out_h=24, out_w=24, scale_lo=0.7, scale_hi=0.8)
        a = train(small_config(mode="sup", steps=4), train_m, tmp_path / "a")
        b = train(small_config(mode="sup", steps=4, sampler=other),
                  train_m, tmp_path / "b")
        np.testing.assert_array_equal(a.net.params, b.net.params)

    def test_metric_rows_schema(self, dataset, tmp_path):
        train_m, val_m = dataset
        res = train(small_config(mode="eqloss", lam=0.1, steps=4),
                    train_m, tmp_path / "m", val_manifest=val_m)
        for name in ("train_total", "train_task", "train_eq", "lr"):
            assert len(metric_series(res.rows, name)) == 4
        val_steps = [r.step for r in res.rows
                     if r.metric_name == "val_eqloss"]
        assert val_steps == [0, 2, 3]
        assert len(metric_series(res.rows, "val_absrel")) == 3
        assert res.csv_path.exists()
        assert res.checkpoint_path.exists()

    def test_semisup_emits_unlabeled_metric(self, dataset, tmp_path):
        train_m, val_m = dataset
        res = train(small_config(mode="semisup", lam=0.1, steps=3),
                    train_m, tmp_path / "s", unlabeled_manifest=val_m)
        series = metric_series(res.rows, "train_eq_unlabeled")
        assert len(series) == 3
        assert all(v >= 0.0 for v in series)

    def test_semisup_requires_unlabeled_split(self, dataset, tmp_path):
        train_m, _ = dataset
        cfg = small_config(mode="semisup", steps=2)
        with pytest.raises(ConfigError, match="unlabeled"):
            train(cfg, train_m, tmp_path / "x")
        empty = dataclasses.replace(train_m, ids=())
        with pytest.raises(ConfigError, match="unlabeled"):
            train(cfg, train_m, tmp_path / "y", unlabeled_manifest=empty)

    def test_finetune_mode_rejected_by_train(self, dataset, tmp_path):
        train_m, _ = dataset
        with pytest.raises(ConfigError, match="finetune_unsupervised"):
            train(small_config(mode="finetune"), train_m, tmp_path / "z")

    def test_unknown_loss_layer(self, dataset, tmp_path):
        train_m, _ = dataset
        cfg = small_config(mode="eqloss", loss_layer="up5")
        with pytest.raises(ConfigError, match="loss_layer"):
            train(cfg, train_m, tmp_path / "w")

    def test_divergence_aborts_with_step(self, dataset, tmp_path,
                                         monkeypatch):
        train_m, _ = dataset

        def poisoned(out, target, mask):
            return float("nan"), np.zeros_like(out)

        monkeypatch.setattr(training_mod, "_masked_l1", poisoned)
        with pytest.raises(DivergenceError, match="step 0"):
            train(small_config(steps=3), train_m, tmp_path / "d")

    def test_intermediate_checkpoints(self, dataset, tmp_path):
        train_m, _ = dataset
        out = tmp_path / "ck"
        train(small_config(steps=5, checkpoint_every=2, val_every=0),
              train_m, out)
        mid = out / "checkpoint_000002.eqvn"
        assert mid.exists()
        net, step, opt, _ = load_checkpoint(mid)
        assert step == 2
        m, v, t = opt
        assert t == 3
        assert m.shape == net.params.shape

    def test_default_run_id_names_mode_and_seed(self, dataset, tmp_path):
        train_m, _ = dataset
        res = train(small_config(steps=2, val_every=0), train_m,
                    tmp_path / "rid")
        assert res.run_id == "aug-depth-seed3"


class TestObjectiveGradient:
    @pytest.mark.parametrize("loss_layer", ["L", "up0"])
    def test_analytic_gradient_matches_finite_differences(
        self, dataset, loss_layer
    ):
        """The consistency target and normalizer are constants under
        differentiation, so FD probes must evaluate against the average
        frozen at the base parameters."""
        from cropeq.data import load_scene_maps
        from cropeq.equivariance import equivariant_average, equivariant_loss
        from cropeq.geometry import sample_transform, scale_transform
        from cropeq.model import PredictorNet
        from cropeq.training import _crop_input, _feature_scale, _masked_l1

        train_m, _ = dataset
        cfg = small_config(mode="eqloss", lam=0.05, loss_layer=loss_layer)
        net = PredictorNet.create(cfg.resolved_net(), seed=1)
        capture = None if loss_layer == "L" else loss_layer
        scale = _feature_scale(loss_layer)

        rng = np.random.default_rng(5)
        images = [load_scene_maps(train_m, train_m.ids[i])
                  for i in range(2)]
        h = w = 32
        k, b = cfg.k_crops, 2
        crops, targets, masks, per_image = [], [], [], []
        for maps in images:
            ts = [sample_transform(cfg.sampler, h, w, rng)
                  for _ in range(k)]
            if scale != 1.0:
                ts_scaled = [scale_transform(t, scale) for t in ts]
            else:
                ts_scaled = ts
            per_image.append((ts, ts_scaled))
            for t in ts:
                crops.append(_crop_input(maps["rgb"], t))
                tgt = apply(t, maps["disparity"])
                targets.append(tgt.values)
                masks.append(tgt.mask_or_full())
        x4 = np.stack(crops)
        t4 = np.stack(targets)
        m3 = np.stack(masks)
        sh, sw = int(round(h * scale)), int(round(w * scale))

        def loss_maps(params):
            net.set_params(params)
            out4, cap4, tape = net.forward(x4, capture=capture)
            return out4, (out4 if capture is None else cap4), tape

        def to_maps(maps4, lo):
            return [DenseMap(maps4[lo + j], Semantics.FEATURE)
                    for j in range(k)]

        p0 = net.params.copy()
        _, maps4, _ = loss_maps(p0)
        frozen_avgs = [
            equivariant_average(to_maps(maps4, bi * k), ts_scaled, sh, sw)
            for bi, (_, ts_scaled) in enumerate(per_image)
        ]

        def objective(params):
            o4, maps4p, _ = loss_maps(params)
            task, _ = _masked_l1(o4, t4, m3)
            acc = 0.0
            for bi, (_, ts_scaled) in enumerate(per_image):
                res = equivariant_loss(to_maps(maps4p, bi * k), ts_scaled,
                                       frozen_avgs[bi])
                acc += res.value
            return task + cfg.lam * acc / b

        # Analytic gradient through the trainer's composition.
        net.set_params(p0)
        out4, cap4, tape = net.forward(x4, capture=capture)
        _, grad_out = _masked_l1(out4, t4, m3)
        maps4 = out4 if capture is None else cap4
        eq_grads = np.zeros_like(maps4)
        for bi, (_, ts_scaled) in enumerate(per_image):
            res = equivariant_loss(to_maps(maps4, bi * k), ts_scaled,
                                   frozen_avgs[bi])
            eq_grads[bi * k:(bi + 1) * k] = np.stack(
                res.grad_wrt_crop_outputs
            )
        scaled_g = (cfg.lam / b) * eq_grads
        if capture is None:
            analytic, _ = net.backward(tape, grad_out + scaled_g)
        else:
            analytic, _ = net.backward(tape, grad_out, scaled_g)

        probe = np.random.default_rng(17).choice(p0.size, size=40,
                                                 replace=False)
        for i in probe:
            d = 1e-6 * max(1.0, abs(p0[i]))
            plus = p0.copy()
            plus[i] += d
            minus = p0.copy()
            minus[i] -= d
            fd = (objective(plus) - objective(minus)) / (2 * d)
            assert analytic[i] == pytest.approx(
                fd, rel=1e-4, abs=1e-8
            ), f"param {i}"


class TestTrainingEffect:
    def test_consistency_term_decreases_on_constant_image(self, tmp_path):
        manifest = constant_image_manifest(tmp_path)
        biased = dataclasses.replace(TINY_NET, coord_features=True)
        cfg = small_config(mode="eqloss", lam=0.5, steps=150,
                           lr_start=3e-3, batch_images=1, net=biased,
                           seed=9, val_every=0)
        res = train(cfg, manifest, tmp_path / "run")
        eq = metric_series(res.rows, "train_eq")
        task = metric_series(res.rows, "train_task")
        assert np.mean(eq[-10:]) < 0.5 * np.mean(eq[:10])
        assert np.mean(task[-10:]) < 0.3 * np.mean(task[:10])


class TestFinetune:
    def test_zero_rate_keeps_teacher_weights(self, dataset,
                                             teacher_checkpoint, tmp_path):
        _, val_m = dataset
        cfg = small_config(mode="finetune", lam=0.0, steps=3,
                           lr_start=0.0, lr_end=0.0, val_every=0)
        res = finetune_unsupervised(cfg, val_m, teacher_checkpoint,
                                    tmp_path / "ft")
        teacher, _, _, _ = load_checkpoint(teacher_checkpoint)
        np.testing.assert_array_equal(res.net.params, teacher.params)

    def test_student_inherits_teacher_architecture(self, dataset,
                                                   teacher_checkpoint,
                                                   tmp_path):
        _, val_m = dataset
        bigger = dataclasses.replace(TINY_NET, base_channels=8)
        cfg = small_config(mode="finetune", lam=0.1, steps=2, net=bigger,
                           val_every=0)
        res = finetune_unsupervised(cfg, val_m, teacher_checkpoint,
                                    tmp_path / "ft2")
        assert res.net.config.base_channels == TINY_NET.base_channels

    def test_never_opens_ground_truth(self, dataset, teacher_checkpoint,
                                      tmp_path, monkeypatch):
        _, val_m = dataset

        def forbidden(*args, **kwargs):
            raise AssertionError("ground-truth loader called")

        monkeypatch.setattr(training_mod, "load_scene_maps", forbidden)
        cfg = small_config(mode="finetune", lam=0.1, steps=2, val_every=0)
        res = finetune_unsupervised(cfg, val_m, teacher_checkpoint,
                                    tmp_path / "ft3")
        assert res.checkpoint_path.exists()

    def test_training_moves_weights_when_enabled(self, dataset,
                                                 teacher_checkpoint,
                                                 tmp_path):
        _, val_m = dataset
        cfg = small_config(mode="finetune", lam=0.1, steps=3, val_every=0)
        res = finetune_unsupervised(cfg, val_m, teacher_checkpoint,
                                    tmp_path / "ft4")
        teacher, _, _, _ = load_checkpoint(teacher_checkpoint)
        assert not np.array_equal(res.net.params, teacher.params)
