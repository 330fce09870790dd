import math

import numpy as np
import pytest
import torch

from fixture_gen import make_places_dataset
from loqi.datamodel import DatasetManifest, GeoPose, ImageRecord
from loqi.degrade import DegradationSpec, degrade_manifest
from loqi.distill import (TrainingConfig, distill_epoch, distill_step,
                          lr_at_step, sample_triplets)
from loqi.errors import ValidationError
from loqi.losses import LossWeights, ickd_loss
from loqi.modeladapter import clone_as_branch_pair, make_toy_extractor


@pytest.fixture(scope="module")
def paired(tmp_path_factory):
    root = tmp_path_factory.mktemp("distill")
    high = make_places_dataset(root / "high", n_places=8, views_per_place=2,
                               size=48, seed=11)
    low = degrade_manifest(high, DegradationSpec.jpeg(10), root / "low")
    return high, low


def small_cfg(**kw):
    defaults = dict(lr_init=1e-3, negatives_per_sample=2,
                    loss_mask=frozenset({"mse"}), checkpoint_every=0)
    defaults.update(kw)
    return TrainingConfig(**defaults)


class TestLrSchedule:
    def test_initial_value(self):
        cfg = TrainingConfig()
        assert lr_at_step(cfg, 0) == 1e-5

    def test_constant_when_decay_one(self):
        cfg = TrainingConfig(lr_exp_decay=1.0)
        assert lr_at_step(cfg, 12345) == cfg.lr_init

    def test_e_folding_at_1e5_steps(self):
        cfg = TrainingConfig()
        lr = lr_at_step(cfg, 100_000)
        assert lr == pytest.approx(1e-5 * math.exp(-1.0), rel=1e-4)
        assert lr == pytest.approx(3.6788e-6, rel=1e-4)

    def test_monotone_non_increasing(self):
        cfg = TrainingConfig()
        lrs = [lr_at_step(cfg, t) for t in range(0, 2000, 100)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert all(v > 0 for v in lrs)

    def test_negative_step_rejected(self):
        with pytest.raises(ValidationError):
            lr_at_step(TrainingConfig(), -1)


class TestConfigValidation:
    def test_defaults_match_training_protocol(self):
        cfg = TrainingConfig()
        assert cfg.lr_init == 1e-5
        assert cfg.lr_exp_decay == 0.99999
        assert cfg.weight_decay == 2e-11
        assert cfg.negatives_per_sample == 5
        assert cfg.epochs == 1
        assert cfg.positive_radius == 25.0
        assert cfg.weights.alpha == 1e5
        assert cfg.weights.beta == 1e4

    def test_invalid_configs(self):
        with pytest.raises(ValidationError):
            TrainingConfig(lr_init=0.0)
        with pytest.raises(ValidationError):
            TrainingConfig(loss_mask=frozenset())
        with pytest.raises(ValidationError):
            TrainingConfig(loss_mask=frozenset({"contrastive"}))


class TestSampleTriplets:
    def test_two_clusters_brute_force(self, paired):
        high, low = paired
        cfg = small_cfg(loss_mask=frozenset({"triplet"}))
        report = sample_triplets(high, low, cfg, rng_seed=0)
        assert report.skipped_no_positive == 0
        for sample in report.samples:
            qh, _ = sample.query
            for ph, _ in sample.positives:
                assert ph.place_id == qh.place_id
            for nh, _ in sample.negatives:
                assert nh.place_id != qh.place_id
            assert len(sample.negatives) == cfg.negatives_per_sample

    def test_deterministic_for_seed(self, paired):
        high, low = paired
        cfg = small_cfg()
        a = sample_triplets(high, low, cfg, rng_seed=5)
        b = sample_triplets(high, low, cfg, rng_seed=5)
        assert [s.query[0].id for s in a.samples] == \
               [s.query[0].id for s in b.samples]
        assert [[n[0].id for n in s.negatives] for s in a.samples] == \
               [[n[0].id for n in s.negatives] for s in b.samples]

    def test_all_same_pose_errors(self):
        recs = tuple(ImageRecord(id=f"r{i}", path="x",
                                 pose=GeoPose.utm(0.0, 0.0))
                     for i in range(4))
        m = DatasetManifest(name="same", split="train", records=recs)
        with pytest.raises(ValidationError, match="negatives"):
            sample_triplets(m, m, small_cfg(), rng_seed=0)

    def test_isolated_queries_skipped(self):
        # one far-away record has no positives and is skipped with a count
        recs = [ImageRecord(id=f"r{i}", path="x",
                            pose=GeoPose.utm(float(i), 0.0)) for i in range(3)]
        recs.append(ImageRecord(id="lonely", path="x",
                                pose=GeoPose.utm(99999.0, 0.0)))
        m = DatasetManifest(name="iso", split="train", records=tuple(recs))
        report = sample_triplets(m, m, small_cfg(), rng_seed=0)
        assert report.skipped_no_positive == 1
        assert len(report.samples) == 3


class TestDistillStep:
    def test_identity_inputs_zero_loss(self, paired):
        high, _ = paired
        pair = clone_as_branch_pair(make_toy_extractor(seed=0))
        cfg = small_cfg(weight_decay=0.0)
        # identical high/low image: cloned student matches teacher exactly
        report = sample_triplets(high, high, cfg, rng_seed=0)
        before = pair.student.parameter_hash()
        step = distill_step(pair, report.samples[0], cfg)
        assert step.losses["mse"] == pytest.approx(0.0, abs=1e-12)
        assert step.grad_norm == pytest.approx(0.0, abs=1e-9)
        assert pair.student.parameter_hash() == before

    def test_ickd_matches_out_of_loop_recompute(self, paired):
        import cv2
        high, low = paired
        pair = clone_as_branch_pair(make_toy_extractor(seed=1))
        cfg = small_cfg(loss_mask=frozenset({"ickd"}))
        sample = sample_triplets(high, low, cfg, rng_seed=0).samples[0]
        step = distill_step(pair, sample, cfg)
        # recompute with the *pre-step* parameters on a fresh clone
        fresh = clone_as_branch_pair(make_toy_extractor(seed=1))
        qh, ql = sample.query
        z_l = fresh.student.encode(cv2.imread(ql.path))
        z_h = fresh.teacher.encode(cv2.imread(qh.path))
        assert step.losses["ickd"] == pytest.approx(
            float(ickd_loss(z_l, z_h).detach()), abs=1e-6)

    def test_mse_descends_on_fixed_pair(self, paired):
        high, low = paired
        pair = clone_as_branch_pair(make_toy_extractor(seed=2))
        # knock the student away from the teacher so there is loss to recover
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            for p in pair.student.trainable_parameters():
                p.add_(0.05 * torch.randn(p.shape, generator=g))
        cfg = small_cfg(lr_init=1e-3, lr_exp_decay=1.0)
        sample = sample_triplets(high, low, cfg, rng_seed=0).samples[0]
        opt = torch.optim.Adam(pair.student.trainable_parameters(),
                               lr=cfg.lr_init)
        first = distill_step(pair, sample, cfg, optimizer=opt)
        for t in range(1, 40):
            last = distill_step(pair, sample, cfg, optimizer=opt, step_index=t)
        assert last.losses["mse"] < 0.5 * first.losses["mse"]

    def test_inactive_hinge_zero_gradient(self, paired):
        high, low = paired
        pair = clone_as_branch_pair(make_toy_extractor(seed=3))
        # tiny margin and near-identical positive views keep the hinge inactive
        cfg = small_cfg(loss_mask=frozenset({"triplet"}), weight_decay=0.0,
                        weights=LossWeights(margin_m=1e-9))
        samples = sample_triplets(high, low, cfg, rng_seed=1).samples
        for sample in samples:
            before = pair.student.parameter_hash()
            step = distill_step(pair, sample, cfg)
            if step.losses["triplet"] == 0.0:
                assert step.grad_norm == pytest.approx(0.0, abs=1e-12)
                assert pair.student.parameter_hash() == before
                break
        else:
            pytest.fail("no sample with an inactive hinge")


class TestDistillEpoch:
    def test_epoch_step_count(self, paired, tmp_path):
        high, low = paired
        pair = clone_as_branch_pair(make_toy_extractor(seed=0))
        cfg = small_cfg()
        report = distill_epoch(pair, high, low, cfg, tmp_path / "ck",
                               rng_seed=0)
        assert report.steps == len(high)
        assert report.samples_visited == len(high)
        assert (tmp_path / "ck" / "student.pt").exists()
        assert report.final_param_hash == pair.student.parameter_hash()

    def test_empty_after_filtering_errors(self, tmp_path):
        recs = (ImageRecord(id="a", path="x", pose=GeoPose.utm(0, 0)),
                ImageRecord(id="b", path="x", pose=GeoPose.utm(50000, 0)))
        m = DatasetManifest(name="iso", split="train", records=recs)
        pair = clone_as_branch_pair(make_toy_extractor(seed=0))
        with pytest.raises(ValidationError):
            distill_epoch(pair, m, m, small_cfg(), tmp_path / "ck", rng_seed=0)
        assert not (tmp_path / "ck" / "student.pt").exists()

    def test_teacher_invariant_over_epoch(self, paired, tmp_path):
        high, low = paired
        pair = clone_as_branch_pair(make_toy_extractor(seed=0))
        teacher_hash = pair.teacher.parameter_hash()
        distill_epoch(pair, high, low, small_cfg(), tmp_path / "ck", rng_seed=0)
        assert pair.teacher.parameter_hash() == teacher_hash

    def test_resume_reproduces_uninterrupted_run(self, paired, tmp_path):
        high, low = paired
        cfg = small_cfg(checkpoint_every=1)

        torch.manual_seed(0)
        pair_a = clone_as_branch_pair(make_toy_extractor(seed=0))
        full = distill_epoch(pair_a, high, low, cfg, tmp_path / "full",
                             rng_seed=3)

        torch.manual_seed(0)
        pair_b = clone_as_branch_pair(make_toy_extractor(seed=0))
        distill_epoch(pair_b, high, low, cfg, tmp_path / "part", rng_seed=3,
                      stop_after=5)
        resumed = distill_epoch(pair_b, high, low, cfg, tmp_path / "part",
                                rng_seed=3, resume=True)
        assert resumed.final_param_hash == full.final_param_hash

    def test_all_seven_loss_combinations_run(self, paired, tmp_path):
        import itertools
        high, low = paired
        names = ("ickd", "mse", "triplet")
        combos = [frozenset(c) for r in (1, 2, 3)
                  for c in itertools.combinations(names, r)]
        assert len(combos) == 7
        # restrict to two samples per combo for speed
        few = high.with_records(high.records[:4])
        few_low = low.with_records(low.records[:4])
        for mask in combos:
            pair = clone_as_branch_pair(make_toy_extractor(seed=0))
            cfg = small_cfg(loss_mask=mask)
            report = distill_epoch(pair, few, few_low, cfg,
                                   tmp_path / f"ck-{'-'.join(sorted(mask))}",
                                   rng_seed=0)
            assert report.steps > 0
            for r in report.step_reports:
                assert set(r.losses) == set(mask)
