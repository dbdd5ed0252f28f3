import csv
import json

import numpy as np
import pytest

import segaudit.cli as cli
from segaudit.audit import audit
from segaudit.cli import build_parser, build_run_config, main
from segaudit.fileio import save_image, save_mask_channel
from segaudit.manifest import load_manifest, load_reference_db, load_target_cases, write_manifest
from segaudit.metrics import dsc
from segaudit.audit import CaseResult
from segaudit.phantoms import build_corpus, build_reference_db, generate_phantom, make_spec, run_grid
from segaudit.rca import estimate_dsc_rca
from segaudit.registration import RegistrationError


def _write_identity_dataset(root, n_refs=3, duplicate_target=True):
    """References are phantoms; the target duplicates reference 0 exactly."""
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    cases = []
    phantoms = [generate_phantom(make_spec(100 + i, sex="MF"[i % 2])) for i in range(n_refs)]
    for i, (img, mask) in enumerate(phantoms):
        cid = f"ref_{i}"
        save_image(img, root / "images" / f"{cid}.png")
        gt = {}
        for s in mask.structures:
            rel = f"masks/{cid}_{s}.png"
            save_mask_channel(mask.channel(s), root / rel)
            gt[s] = rel
        cases.append({
            "id": cid, "image": f"images/{cid}.png", "gt_masks": gt,
            "attributes": {"sex": "MF"[i % 2]}, "reference": True,
        })
    if duplicate_target:
        img, mask = phantoms[0]
        save_image(img, root / "images" / "target.png")
        pred = {}
        for s in mask.structures:
            rel = f"masks/target_{s}.png"
            save_mask_channel(mask.channel(s), root / rel)
            pred[s] = rel
        cases.append({
            "id": "target", "image": "images/target.png", "pred_masks": pred,
            "attributes": {"sex": "M"}, "reference": False,
        })
    doc = {"version": 1, "structures": ["lung", "heart"], "cases": cases}
    write_manifest(doc, root / "manifest.json")
    return doc


class TestEstimateCommand:
    def test_duplicated_reference_scores_high(self, tmp_path):
        _write_identity_dataset(tmp_path / "data")
        out = tmp_path / "out"
        code = main([
            "estimate", "--manifest", str(tmp_path / "data" / "manifest.json"),
            "--k", "1", "--out", str(out),
        ])
        assert code == 0
        rows = list(csv.DictReader(open(out / "estimates.csv")))
        assert {r["structure"] for r in rows} == {"lung", "heart"}
        for row in rows:
            assert float(row["dsc_rca"]) >= 0.95
            assert row["k_used"] == "1"
        detail = json.loads((out / "estimates.json").read_text())
        assert detail["cases"][0]["per_reference"]

    def test_empty_predictions_score_zero(self, tmp_path):
        root = tmp_path / "data"
        doc = _write_identity_dataset(root)
        for s in ("lung", "heart"):
            save_mask_channel(np.zeros((64, 64), dtype=bool), root / f"masks/target_{s}.png")
        out = tmp_path / "out"
        code = main([
            "estimate", "--manifest", str(root / "manifest.json"),
            "--k", "2", "--out", str(out),
        ])
        assert code == 0
        rows = list(csv.DictReader(open(out / "estimates.csv")))
        assert all(float(r["dsc_rca"]) == 0.0 for r in rows)

    def test_missing_image_exits_1_without_partial_outputs(self, tmp_path):
        root = tmp_path / "data"
        doc = _write_identity_dataset(root)
        doc["cases"][0]["image"] = "images/missing.png"
        write_manifest(doc, root / "manifest.json")
        out = tmp_path / "out"
        out.mkdir()
        sentinel = out / "estimates.csv"
        sentinel.write_text("sentinel")
        code = main([
            "estimate", "--manifest", str(root / "manifest.json"), "--out", str(out),
        ])
        assert code == 1
        assert sentinel.read_text() == "sentinel"

    def test_target_without_predictions_rejected(self, tmp_path):
        root = tmp_path / "data"
        doc = _write_identity_dataset(root)
        del doc["cases"][-1]["pred_masks"]
        write_manifest(doc, root / "manifest.json")
        code = main([
            "estimate", "--manifest", str(root / "manifest.json"),
            "--out", str(tmp_path / "out"),
        ])
        assert code == 1


def _write_two_group_dataset(root):
    """Two identical targets that differ only in the sex attribute."""
    doc = _write_identity_dataset(root, duplicate_target=False)
    img, mask = generate_phantom(make_spec(500, sex="M"))
    for cid, sex in (("t_m", "M"), ("t_f", "F")):
        save_image(img, root / "images" / f"{cid}.png")
        pred = {}
        for s in mask.structures:
            rel = f"masks/{cid}_{s}.png"
            save_mask_channel(mask.channel(s), root / rel)
            pred[s] = rel
        doc["cases"].append({
            "id": cid, "image": f"images/{cid}.png", "pred_masks": pred,
            "attributes": {"sex": sex}, "reference": False,
        })
    write_manifest(doc, root / "manifest.json")


class TestAuditCommand:
    def test_identical_groups_give_zero_gap(self, tmp_path, capsys):
        root = tmp_path / "data"
        _write_two_group_dataset(root)
        out = tmp_path / "out"
        code = main([
            "audit", "--manifest", str(root / "manifest.json"),
            "--k", "2", "--out", str(out),
        ])
        assert code == 0
        report = json.loads((out / "audit.json").read_text())
        assert report["delta_rca"] == {"lung": 0.0, "heart": 0.0}
        assert "delta_true" not in report
        assert "pearson_r" not in report
        printed = capsys.readouterr().out
        assert "delta_rca[lung] = +0.0000" in printed
        assert (out / "scatter.svg").exists()
        assert (out / "audit.csv").exists()

    def test_missing_attribute_exits_1(self, tmp_path):
        root = tmp_path / "data"
        _write_two_group_dataset(root)
        code = main([
            "audit", "--manifest", str(root / "manifest.json"),
            "--attribute", "age", "--out", str(tmp_path / "out"),
        ])
        assert code == 1


_CELL = dict(seed=424, n_cases=6, n_refs=6, k=2, level_m=12, level_f=4)


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    data = tmp_path_factory.mktemp("grid_cell")
    code = main([
        "gen-phantoms", "--n-cases", str(_CELL["n_cases"]),
        "--n-references", str(_CELL["n_refs"]), "--seed", str(_CELL["seed"]),
        "--level-male", str(_CELL["level_m"]), "--level-female", str(_CELL["level_f"]),
        "--out", str(data),
    ])
    assert code == 0
    return data


class TestGridCellEquivalence:
    SEED = _CELL["seed"]
    N_CASES = _CELL["n_cases"]
    N_REFS = _CELL["n_refs"]
    K = _CELL["k"]
    LEVEL_M, LEVEL_F = _CELL["level_m"], _CELL["level_f"]

    def test_cli_audit_matches_in_process_grid_cell(self, exported, tmp_path):
        out = tmp_path / "audit_out"
        code = main([
            "audit", "--manifest", str(exported / "manifest.json"),
            "--k", str(self.K), "--out", str(out),
        ])
        assert code == 0
        cli_report = json.loads((out / "audit.json").read_text())

        corpus = build_corpus(self.N_CASES, seed=self.SEED)
        db = build_reference_db(self.N_REFS, seed=self.SEED)
        grid = run_grid(corpus, db, k=self.K, seed=self.SEED)
        for s in ("lung", "heart"):
            cell = grid.delta_rca["mean"][s][self.LEVEL_M - 1, self.LEVEL_F - 1]
            assert np.sign(cli_report["delta_rca"][s]) == np.sign(cell)
            assert abs(cli_report["delta_rca"][s] - cell) < 0.05
            cell_true = grid.delta_true[s][self.LEVEL_M - 1, self.LEVEL_F - 1]
            assert np.sign(cli_report["delta_true"][s]) == np.sign(cell_true)

    def test_cli_audit_matches_library_calls_exactly(self, exported, tmp_path):
        out = tmp_path / "audit_out2"
        code = main([
            "audit", "--manifest", str(exported / "manifest.json"),
            "--k", str(self.K), "--out", str(out),
        ])
        assert code == 0
        cli_report = json.loads((out / "audit.json").read_text())

        manifest = load_manifest(exported / "manifest.json")
        db = load_reference_db(manifest)
        results = []
        for t in load_target_cases(manifest):
            est = estimate_dsc_rca(t.image, t.pred, db, k=self.K, case_id=t.case_id)
            results.append(
                CaseResult(t.case_id, est, t.attributes, dsc(t.pred, t.gt))
            )
        report = audit(results, "sex", "M")
        for s in ("lung", "heart"):
            assert cli_report["delta_rca"][s] == report.delta_rca[s]
            assert cli_report["delta_true"][s] == report.delta_true[s]


class TestConfigAndExitCodes:
    def test_usage_error_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["estimate"])  # --manifest is required
        assert exc.value.code == 1

    def test_unknown_subcommand_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_computation_failure_exits_2(self, tmp_path, monkeypatch):
        root = tmp_path / "data"
        _write_identity_dataset(root)

        def boom(*args, **kwargs):
            raise RegistrationError("synthetic", "affine", 0)

        monkeypatch.setattr(cli, "estimate_dsc_rca", boom)
        code = main([
            "estimate", "--manifest", str(root / "manifest.json"),
            "--out", str(tmp_path / "out"),
        ])
        assert code == 2

    def test_config_file_merging_and_flag_priority(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "k": 7, "aggregator": "max", "threads": 2,
            "registration": {"pyramid_levels": 2},
        }))
        parser = build_parser()
        args = parser.parse_args([
            "estimate", "--manifest", "x.json", "--config", str(cfg_path), "--k", "3",
        ])
        config = build_run_config(args)
        assert config.k == 3              # flag wins over file
        assert config.aggregator == "max"  # file wins over default
        assert config.threads == 2
        assert config.registration.pyramid_levels == 2

    def test_toml_config_supported(self, tmp_path):
        cfg_path = tmp_path / "cfg.toml"
        cfg_path.write_text('k = 9\n[registration]\ndemons_max_step = 2.5\n')
        parser = build_parser()
        args = parser.parse_args(["estimate", "--manifest", "x.json",
                                  "--config", str(cfg_path)])
        config = build_run_config(args)
        assert config.k == 9
        assert config.registration.demons_max_step == 2.5

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"warp_speed": 9}))
        parser = build_parser()
        args = parser.parse_args(["estimate", "--manifest", "x.json",
                                  "--config", str(cfg_path)])
        with pytest.raises(ValueError, match="warp_speed"):
            build_run_config(args)

    def test_threads_env_var_default(self, monkeypatch):
        parser = build_parser()
        args = parser.parse_args(["estimate", "--manifest", "x.json"])
        monkeypatch.setenv("SEGAUDIT_THREADS", "3")
        assert build_run_config(args).threads == 3
        args = parser.parse_args(["estimate", "--manifest", "x.json", "--threads", "2"])
        assert build_run_config(args).threads == 2
        monkeypatch.setenv("SEGAUDIT_THREADS", "zero")
        args = parser.parse_args(["estimate", "--manifest", "x.json"])
        with pytest.raises(ValueError, match="SEGAUDIT_THREADS"):
            build_run_config(args)


class TestGenPhantoms:
    def test_deterministic_manifest_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            code = main([
                "gen-phantoms", "--n-cases", "2", "--n-references", "2",
                "--seed", "5", "--out", str(out),
            ])
            assert code == 0
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
        img = next((a / "images").glob("*.png")).name
        assert (a / "images" / img).read_bytes() == (b / "images" / img).read_bytes()

    def test_no_gt_flag_omits_target_ground_truth(self, tmp_path):
        out = tmp_path / "nogt"
        code = main([
            "gen-phantoms", "--n-cases", "2", "--n-references", "2",
            "--seed", "5", "--no-gt", "--out", str(out),
        ])
        assert code == 0
        manifest = load_manifest(out / "manifest.json")
        for case in manifest.target_cases:
            assert case.gt_masks is None
            assert case.pred_masks is not None
