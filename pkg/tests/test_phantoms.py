import numpy as np
import pytest

from segaudit.core import LabelMask
from segaudit.metrics import dsc
from segaudit.phantoms import (
    DegradationLevel,
    PhantomSpec,
    ShapeParams,
    build_corpus,
    build_reference_db,
    case_degradation_seed,
    degradation_schedule,
    degrade,
    generate_phantom,
    make_spec,
    run_grid,
    within_group_indices,
)
from segaudit.registration import RegistrationConfig


class TestGeneration:
    def test_bitwise_reproducible(self):
        spec = make_spec(123, sex="F", noise_level=0.0)
        img_a, mask_a = generate_phantom(spec)
        img_b, mask_b = generate_phantom(spec)
        assert np.array_equal(img_a.pixels, img_b.pixels)
        assert np.array_equal(mask_a.channels, mask_b.channels)

    def test_default_specs_produce_valid_masks(self):
        for seed in range(6):
            for sex in ("M", "F"):
                _, mask = generate_phantom(make_spec(seed, sex=sex))
                assert mask.structures == ("lung", "heart")
                for name in mask.structures:
                    ch = mask.channel(name)
                    assert ch.any(), f"{name} empty for seed {seed} sex {sex}"
                    border = np.concatenate(
                        [ch[0], ch[-1], ch[:, 0], ch[:, -1]]
                    )
                    assert not border.any(), "structure touches the border"

    def test_sexes_differ_but_overlap(self):
        _, mask_m = generate_phantom(make_spec(7, sex="M"))
        _, mask_f = generate_phantom(make_spec(7, sex="F"))
        score = dsc(mask_m, mask_f)
        for s, value in score.per_structure.items():
            assert 0.0 < value < 1.0, f"{s}: {value}"

    def test_out_of_bounds_shape_rejected(self):
        params = ShapeParams(body_axes=(0.7, 0.7))
        with pytest.raises(ValueError):
            generate_phantom(PhantomSpec(seed=0, shape_params=params))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PhantomSpec(seed=0, size=8)
        with pytest.raises(ValueError):
            PhantomSpec(seed=0, sex="X")
        with pytest.raises(ValueError):
            PhantomSpec(seed=0, noise_level=-0.1)
        with pytest.raises(ValueError):
            ShapeParams(lung_axes=(0.0, 0.1))


class TestDegradationSchedule:
    def test_level_12_is_noop(self):
        level = DegradationLevel.for_level(12)
        assert (level.erosion_radius, level.jitter_amplitude, level.drop_probability) == (
            0.0,
            0.0,
            0.0,
        )
        _, mask = generate_phantom(make_spec(3))
        out = degrade(mask, level, seed=999)
        assert dsc(out, mask).macro_average == 1.0

    def test_severity_strictly_decreasing(self):
        schedule = degradation_schedule()
        assert [lv.level for lv in schedule] == list(range(1, 13))
        for worse, better in zip(schedule, schedule[1:]):
            assert worse.erosion_radius >= better.erosion_radius
            assert worse.jitter_amplitude >= better.jitter_amplitude
            assert worse.drop_probability >= better.drop_probability
            total_worse = (
                worse.erosion_radius + worse.jitter_amplitude + worse.drop_probability
            )
            total_better = (
                better.erosion_radius + better.jitter_amplitude + better.drop_probability
            )
            assert total_worse > total_better

    def test_level_validation(self):
        with pytest.raises(ValueError):
            DegradationLevel(0, 1.0, 1.0, 0.0)
        with pytest.raises(ValueError):
            DegradationLevel(12, 1.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            DegradationLevel(5, -1.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            DegradationLevel(5, 1.0, 0.0, 1.5)


class TestDegrade:
    def test_deterministic_given_seed(self):
        _, mask = generate_phantom(make_spec(11))
        level = DegradationLevel.for_level(4)
        a = degrade(mask, level, seed=5)
        b = degrade(mask, level, seed=5)
        c = degrade(mask, level, seed=6)
        assert np.array_equal(a.channels, b.channels)
        assert not np.array_equal(a.channels, c.channels)

    def test_erosion_only_is_contractive(self):
        _, mask = generate_phantom(make_spec(2))
        level = DegradationLevel(level=5, erosion_radius=2.0,
                                 jitter_amplitude=0.0, drop_probability=0.0)
        out = degrade(mask, level, seed=1)
        assert not (out.channels & ~mask.channels).any()
        assert out.channels.sum() < mask.channels.sum()

    def test_drop_probability_one_erases_everything(self):
        _, mask = generate_phantom(make_spec(2))
        level = DegradationLevel(level=1, erosion_radius=0.0,
                                 jitter_amplitude=0.0, drop_probability=1.0)
        out = degrade(mask, level, seed=1)
        assert not out.channels.any()

    def test_expected_dsc_strictly_increasing_over_corpus(self):
        corpus = build_corpus(200, size=64, seed=11)
        schedule = degradation_schedule()
        group_idx = within_group_indices([c.attributes["sex"] for c in corpus])
        for structure in ("lung", "heart"):
            means = []
            for level in schedule:
                values = [
                    dsc(
                        degrade(
                            case.mask, level, case_degradation_seed(11, group_idx[ci])
                        ),
                        case.mask,
                    ).per_structure[structure]
                    for ci, case in enumerate(corpus)
                ]
                means.append(float(np.mean(values)))
            gaps = np.diff(means)
            assert (gaps >= 0.005).all(), f"{structure}: gaps {gaps}"
            assert means[-1] == 1.0
            assert 0.4 <= means[0] <= 0.65


class TestCorpusBuilders:
    def test_corpus_balanced_and_reproducible(self):
        corpus = build_corpus(10, seed=21)
        sexes = [c.attributes["sex"] for c in corpus]
        assert sexes.count("M") == sexes.count("F") == 5
        again = build_corpus(10, seed=21)
        for a, b in zip(corpus, again):
            assert a.case_id == b.case_id
            assert np.array_equal(a.image.pixels, b.image.pixels)

    def test_reference_db_disjoint_from_corpus(self):
        corpus = build_corpus(6, seed=21)
        db = build_reference_db(6, seed=21)
        corpus_images = {c.image.pixels.tobytes() for c in corpus}
        for rec in db.records:
            assert rec.image.pixels.tobytes() not in corpus_images


class TestGrid:
    def test_small_grid_shape_and_examples(self, small_grid):
        grid = small_grid
        assert grid.level_numbers == tuple(range(1, 13))
        for s in grid.structures:
            assert grid.delta_true[s].shape == (12, 12)

        # same degradation for both sexes leaves only sampling noise
        for s in grid.structures:
            diagonal = np.abs(np.diag(grid.delta_true[s]))
            assert diagonal.mean() <= 0.02, f"{s} diagonal {diagonal.mean():.4f}"

        # best male / worst female is male-favoring, and vice versa
        for s in grid.structures:
            assert grid.delta_true[s][11, 0] > 0
            assert grid.delta_true[s][0, 11] < 0
            assert grid.delta_rca["mean"][s][11, 0] > 0
            assert grid.delta_rca["mean"][s][0, 11] < 0

        # approximate antisymmetry of the true-gap matrix
        for s in grid.structures:
            m = grid.delta_true[s]
            assert np.abs(m + m.T).max() <= 0.03

    def test_level_monotonicity_transfers_to_gaps(self, small_grid):
        grid = small_grid
        for s in grid.structures:
            m = grid.delta_true[s]
            for j in range(12):
                column = m[:, j]
                assert (np.diff(column) >= -0.02).all()

    def test_grid_reproducible_and_worker_invariant(self):
        corpus = build_corpus(6, size=64, seed=77)
        db = build_reference_db(6, size=64, seed=77)
        cfg = RegistrationConfig()
        kwargs = dict(k=2, cfg=cfg, seed=77)
        a = run_grid(corpus, db, workers=1, **kwargs)
        b = run_grid(corpus, db, workers=8, **kwargs)
        for s in a.structures:
            assert np.array_equal(a.delta_true[s], b.delta_true[s])
            for agg in ("mean", "max"):
                assert np.array_equal(a.delta_rca[agg][s], b.delta_rca[agg][s])

    def test_unbalanced_corpus_warns_but_runs(self):
        corpus = build_corpus(3, size=64, seed=13)  # 2 M, 1 F
        db = build_reference_db(4, size=64, seed=13)
        with pytest.warns(UserWarning, match="not sex-balanced"):
            grid = run_grid(corpus, db, k=2, levels=[DegradationLevel.for_level(12)])
        assert grid.warnings

    def test_single_sex_corpus_rejected(self):
        corpus = tuple(c for c in build_corpus(4, seed=13) if c.attributes["sex"] == "M")
        db = build_reference_db(4, seed=13)
        with pytest.raises(ValueError):
            run_grid(corpus, db, k=2)
