import pytest

from flowtok.harness import ablate
from flowtok.harness.config import ExperimentConfig


class TestRegistry:
    def test_expected_grids_present(self):
        expected = {"fsd_on_off", "rad_variants", "noise_schedule", "mask_ratio",
                    "kl_on_off", "sem_decoder_size", "encoder_init", "lambda_sem",
                    "dim_sweep", "gamma"}
        assert expected == set(ablate.GRIDS)

    def test_all_overrides_are_valid_config_keys(self):
        cfg = ExperimentConfig()
        for grid, arms in ablate.GRIDS.items():
            for arm, overrides in arms:
                for key, value in overrides.items():
                    cfg2 = ExperimentConfig(cfg.values)
                    cfg2.set(key, value)  # raises ConfigError on a bad key

    def test_dim_sweep_covers_spec_dims(self):
        arms = dict(ablate.GRIDS["dim_sweep"])
        dims = sorted(o["tokenizer.latent_dim"] for o in arms.values())
        assert dims == [4, 8, 16, 32]

    def test_single_seed_grids_are_sweeps(self):
        assert ablate.SINGLE_SEED_GRIDS <= set(ablate.GRIDS)

    def test_unknown_grid_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            ablate.run_ablation("nonexistent", ExperimentConfig(), tmp_path, tmp_path)


class TestSeeded:
    def test_seeds_applied_and_base_untouched(self):
        base = ExperimentConfig()
        cfg = ablate._seeded(base, {"tokenizer.latent_dim": 8}, seed=5)
        assert cfg.get("tokenizer.seed") == 5
        assert cfg.get("generator.seed") == 5
        assert cfg.get("eval.seed") == 5
        assert cfg.get("tokenizer.latent_dim") == 8
        assert base.get("tokenizer.latent_dim") == 16
        assert base.get("tokenizer.seed") == 0


class TestMajority:
    def test_strict_majority(self):
        assert ablate._majority([True, True, False])
        assert not ablate._majority([True, False, False])
        assert not ablate._majority([True, False])  # ties fail
        assert ablate._majority([True])


def arm_metrics(**kw):
    base = {"lp_t0": 0.5, "lp_t05": 0.4, "psnr": 10.0, "rfid_proxy": 90.0,
            "fid_proxy": 100.0, "is_proxy": 1.5}
    base.update(kw)
    return base


class TestVerdicts:
    def test_fsd_on_off_pass(self):
        results = {s: {"fsd_on": arm_metrics(lp_t05=0.45, fid_proxy=90.0),
                       "fsd_off": arm_metrics(lp_t05=0.30, fid_proxy=120.0)}
                   for s in (0, 1, 2)}
        v = ablate.make_verdict("fsd_on_off", results, (0, 1, 2))
        assert v["pass"]

    def test_fsd_on_off_majority_two_of_three(self):
        results = {}
        for s in (0, 1):
            results[s] = {"fsd_on": arm_metrics(lp_t05=0.45, fid_proxy=90.0),
                          "fsd_off": arm_metrics(lp_t05=0.30, fid_proxy=120.0)}
        results[2] = {"fsd_on": arm_metrics(lp_t05=0.20, fid_proxy=150.0),
                      "fsd_off": arm_metrics(lp_t05=0.30, fid_proxy=120.0)}
        v = ablate.make_verdict("fsd_on_off", results, (0, 1, 2))
        assert v["pass"]

    def test_fsd_on_off_fail_on_fid(self):
        results = {s: {"fsd_on": arm_metrics(lp_t05=0.45, fid_proxy=130.0),
                       "fsd_off": arm_metrics(lp_t05=0.30, fid_proxy=120.0)}
                   for s in (0, 1, 2)}
        assert not ablate.make_verdict("fsd_on_off", results, (0, 1, 2))["pass"]

    def test_rad_variants_requires_both_best(self):
        good = {s: {"both": arm_metrics(fid_proxy=90.0),
                    "align_only": arm_metrics(fid_proxy=110.0),
                    "rec_only": arm_metrics(fid_proxy=105.0)}
                for s in (0, 1, 2)}
        assert ablate.make_verdict("rad_variants", good, (0, 1, 2))["pass"]
        bad = {s: {"both": arm_metrics(fid_proxy=108.0),
                   "align_only": arm_metrics(fid_proxy=110.0),
                   "rec_only": arm_metrics(fid_proxy=105.0)}
               for s in (0, 1, 2)}
        assert not ablate.make_verdict("rad_variants", bad, (0, 1, 2))["pass"]

    def test_kl_tradeoff(self):
        results = {s: {"kl_on": arm_metrics(psnr=9.5, fid_proxy=95.0),
                       "kl_off": arm_metrics(psnr=10.5, fid_proxy=110.0)}
                   for s in (0, 1, 2)}
        v = ablate.make_verdict("kl_on_off", results, (0, 1, 2))
        assert v["no_kl_better_psnr"] and v["kl_better_fid"] and v["pass"]

    def test_dim_sweep_one_inversion_allowed(self):
        r = {0: {
            "d4": arm_metrics(lp_t0=0.30, psnr=9.0, fid_proxy=130.0),
            "d8": arm_metrics(lp_t0=0.40, psnr=9.5, fid_proxy=120.0),
            "d16": arm_metrics(lp_t0=0.38, psnr=10.0, fid_proxy=110.0),  # one lp inversion
            "d32": arm_metrics(lp_t0=0.45, psnr=10.5, fid_proxy=100.0),
        }}
        v = ablate.make_verdict("dim_sweep", r, (0,))
        assert v["lp_inversions"] == 1 and v["pass"]

    def test_dim_sweep_two_inversions_fail(self):
        r = {0: {
            "d4": arm_metrics(lp_t0=0.40, psnr=9.0, fid_proxy=130.0),
            "d8": arm_metrics(lp_t0=0.35, psnr=9.5, fid_proxy=120.0),
            "d16": arm_metrics(lp_t0=0.45, psnr=10.0, fid_proxy=110.0),
            "d32": arm_metrics(lp_t0=0.40, psnr=10.5, fid_proxy=100.0),
        }}
        assert not ablate.make_verdict("dim_sweep", r, (0,))["pass"]

    def test_missing_arm_fails_with_note(self):
        v = ablate.make_verdict("fsd_on_off", {0: {"fsd_on": arm_metrics()}}, (0,))
        assert not v["pass"] and "note" in v

    def test_comparison_only_grid_reports_best(self):
        results = {0: {"light": arm_metrics(fid_proxy=100.0),
                       "heavy": arm_metrics(fid_proxy=90.0)}}
        v = ablate.make_verdict("sem_decoder_size", results, (0,))
        assert v["best_fid_arm_per_seed"][0] == "heavy"
        assert v["pass"]
