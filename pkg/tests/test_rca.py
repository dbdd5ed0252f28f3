import logging

import numpy as np
import pytest

from segaudit import rca as rca_module
from segaudit.core import DisplacementField, Image, LabelMask
from segaudit.metrics import dsc
from segaudit.phantoms import (
    DegradationLevel,
    build_corpus,
    build_reference_db,
    degrade,
)
from segaudit.rca import (
    AllRegistrationsFailedError,
    PropagationPlan,
    RcaEstimate,
    ReferenceDatabase,
    ReferenceRecord,
    estimate_dsc_rca,
    plan_propagation,
    score_propagation,
)
from segaudit.registration import RegistrationConfig, RegistrationError


@pytest.fixture(scope="module")
def small_db():
    return build_reference_db(6, size=64, seed=9)


@pytest.fixture(scope="module")
def one_case():
    return build_corpus(1, size=64, seed=31)[0]


def _pixel_mask(height, width, pixels):
    ch = np.zeros((height, width), dtype=bool)
    for y, x in pixels:
        ch[y, x] = True
    return LabelMask(("s",), ch[None])


class TestAggregation:
    def _identity_plan(self):
        """Three references scored through identity fields, engineered so the
        per-reference Dice values are exactly 1.0, 0.9, and 0.8."""
        h = w = 12
        img = Image(np.zeros((h, w)))
        pred_pixels = [(2, x) for x in range(2, 11)]  # 9 pixels
        pred = _pixel_mask(h, w, pred_pixels)
        exact = _pixel_mask(h, w, pred_pixels)  # dice 1.0
        superset = _pixel_mask(h, w, pred_pixels + [(3, 2), (3, 3)])  # 18/20 = 0.9
        shifted = _pixel_mask(
            h, w, pred_pixels[:-1] + [(4, 2), (4, 3), (4, 4)]
        )  # overlap 8 of 11 -> 16/20 = 0.8
        entries = tuple(
            (ReferenceRecord(rid, img, mask), DisplacementField.zero(w, h))
            for rid, mask in (("a", exact), ("b", superset), ("c", shifted))
        )
        plan = PropagationPlan("case", entries, (), 3)
        return plan, pred

    def test_mean_aggregator(self):
        plan, pred = self._identity_plan()
        est = score_propagation(plan, pred, "mean")
        per_ref = dict(est.per_reference)
        assert per_ref["a"].per_structure["s"] == pytest.approx(1.0)
        assert per_ref["b"].per_structure["s"] == pytest.approx(0.9)
        assert per_ref["c"].per_structure["s"] == pytest.approx(0.8)
        assert est.aggregate.per_structure["s"] == pytest.approx(0.9)
        assert est.k_used == 3

    def test_max_aggregator(self):
        plan, pred = self._identity_plan()
        est = score_propagation(plan, pred, "max")
        assert est.aggregate.per_structure["s"] == pytest.approx(1.0)

    def test_aggregate_between_min_and_max(self):
        plan, pred = self._identity_plan()
        est = score_propagation(plan, pred, "mean")
        values = [d.per_structure["s"] for _, d in est.per_reference]
        assert min(values) <= est.aggregate.per_structure["s"] <= max(values)

    def test_estimate_type_checks_mean_consistency(self):
        plan, pred = self._identity_plan()
        good = score_propagation(plan, pred, "mean")
        with pytest.raises(ValueError):
            RcaEstimate(
                case_id=good.case_id,
                per_reference=good.per_reference,
                aggregate=type(good.aggregate).from_per_structure({"s": 0.123}),
                aggregator="mean",
                k_used=good.k_used,
            )
        with pytest.raises(ValueError):
            RcaEstimate("c", (), good.aggregate, "median", 0)


class TestEstimate:
    def test_atlas_duplicating_a_reference_scores_high(self, small_db):
        ref = small_db.records[0]
        est = estimate_dsc_rca(
            ref.image, ref.mask, small_db, k=1, case_id="not-in-db"
        )
        assert est.k_used == 1
        assert est.aggregate.macro_average >= 0.95

    def test_all_background_prediction_scores_zero(self, small_db, one_case):
        empty = LabelMask.zeros(one_case.mask.structures, 64, 64)
        est = estimate_dsc_rca(one_case.image, empty, small_db, k=2)
        assert est.aggregate.per_structure == {"lung": 0.0, "heart": 0.0}

    def test_self_record_excluded_by_id(self, one_case, small_db):
        poisoned = ReferenceDatabase(
            small_db.records
            + (ReferenceRecord("atlas-self", one_case.image, one_case.mask),)
        )
        plan = plan_propagation(
            one_case.image, poisoned, k=len(poisoned), case_id="atlas-self"
        )
        assert "atlas-self" not in [rec.id for rec, _ in plan.entries]

    def test_only_self_in_db_raises(self, one_case):
        db = ReferenceDatabase(
            (ReferenceRecord("self", one_case.image, one_case.mask),)
        )
        with pytest.raises(ValueError):
            plan_propagation(one_case.image, db, k=1, case_id="self")

    def test_empty_db_raises(self, one_case):
        with pytest.raises(ValueError):
            plan_propagation(one_case.image, ReferenceDatabase(()), k=1)

    def test_shape_mismatch_raises(self, small_db, one_case):
        wrong = LabelMask.zeros(("lung", "heart"), 32, 32)
        with pytest.raises(ValueError):
            estimate_dsc_rca(one_case.image, wrong, small_db, k=1)

    def test_workers_do_not_change_results(self, small_db, one_case):
        serial = estimate_dsc_rca(one_case.image, one_case.mask, small_db, k=4)
        threaded = estimate_dsc_rca(
            one_case.image, one_case.mask, small_db, k=4, workers=4
        )
        assert serial.per_reference == threaded.per_reference
        assert serial.aggregate.per_structure == threaded.aggregate.per_structure


class TestFailureHandling:
    def test_failed_registration_skipped_with_warning(
        self, one_case, small_db, monkeypatch, caplog
    ):
        real = rca_module.register
        doomed = small_db.records[0].id

        def flaky(moving, fixed, cfg):
            if np.array_equal(fixed.pixels, small_db.get(doomed).image.pixels):
                raise RegistrationError("synthetic failure", "demons", 0)
            return real(moving, fixed, cfg)

        monkeypatch.setattr(rca_module, "register", flaky)
        with caplog.at_level(logging.WARNING, logger="segaudit.rca"):
            est = estimate_dsc_rca(
                one_case.image, one_case.mask, small_db, k=len(small_db)
            )
        assert doomed in est.skipped
        assert est.k_used == len(small_db) - 1
        assert any("skipping reference" in rec.message for rec in caplog.records)

    def test_all_failures_raise(self, one_case, small_db, monkeypatch):
        def always_fail(moving, fixed, cfg):
            raise RegistrationError("synthetic failure", "affine", 0)

        monkeypatch.setattr(rca_module, "register", always_fail)
        with pytest.raises(AllRegistrationsFailedError):
            estimate_dsc_rca(one_case.image, one_case.mask, small_db, k=3)


class TestDegradationTrend:
    def test_monotone_decay_of_estimates(self, small_db, one_case):
        plan = plan_propagation(one_case.image, small_db, k=3, case_id=one_case.case_id)
        # erosion-only corruption, mildest to harshest
        radii = (0.0, 1.0, 1.5, 2.5, 3.5, 4.5)
        estimates = []
        for i, radius in enumerate(radii):
            level = (
                DegradationLevel(12, 0.0, 0.0, 0.0)
                if radius == 0.0
                else DegradationLevel(6, radius, 0.0, 0.0)
            )
            pred = degrade(one_case.mask, level, seed=77)
            estimates.append(
                score_propagation(plan, pred, "mean").aggregate.macro_average
            )
        for earlier, later in zip(estimates, estimates[1:]):
            assert later <= earlier + 0.02
        assert estimates[-1] < estimates[0]

    def test_estimates_track_true_quality(self, small_db):
        # cheap correlation smoke test; the acceptance suite runs the full one
        corpus = build_corpus(2, size=64, seed=55)
        true_values, est_values = [], []
        for case in corpus:
            plan = plan_propagation(case.image, small_db, k=3, case_id=case.case_id)
            for lvl in (1, 4, 7, 10, 12):
                level = DegradationLevel.for_level(lvl)
                pred = degrade(case.mask, level, seed=lvl * 13)
                true_values.append(dsc(pred, case.mask).macro_average)
                est_values.append(
                    score_propagation(plan, pred, "mean").aggregate.macro_average
                )
        r = np.corrcoef(true_values, est_values)[0, 1]
        assert r >= 0.7
