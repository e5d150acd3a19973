import csv

import numpy as np
import pytest
import torch

from ddae.data import CovariateRecord, Dataset, load_dataset
from ddae.harmonize import (
    MANIFEST_COLUMNS,
    HarmonizationJob,
    failure_count,
    harmonize_dataset,
    harmonize_image,
)
from ddae.model import CovariateNorm, DdaeModel, ModelConfig, to_model_range
from ddae.phantoms import CohortSpec, generate_cohort
from ddae.sampling import SamplerConfig, ddim_decode, ddim_encode
from ddae.schedule import schedule_from_fingerprint, make_linear_schedule

torch.set_num_threads(1)

SCHEDULE = make_linear_schedule(12, 1e-4, 0.05)
CONFIG = SamplerConfig(num_steps=3)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(31)
    m = DdaeModel(
        ModelConfig(resolution=16, latent_dim=8, base_channels=8, channel_mults=(1, 2)),
        ("siteA", "siteB", "siteC"),
        CovariateNorm(50.0, 15.0),
        SCHEDULE.fingerprint(),
    )
    # break the zero inits (output conv and conditioning projections) so the
    # predictor depends on both its state and the latents
    for name, p in m.noise_predictor.named_parameters():
        if "out_conv" in name or "cond_proj" in name:
            torch.nn.init.normal_(p, std=0.1)
    return m.eval()


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(CohortSpec(n_per_site=3, resolution=16, seed=8))


class TestHarmonizeImage:
    def test_identity_transfer_equals_reconstruction(self, model):
        x0 = torch.rand(16, 16, generator=torch.Generator().manual_seed(0))
        record = CovariateRecord(age=42.0, sex=1, site="siteB")
        transferred = harmonize_image(x0, record, "siteB", model, SCHEDULE, CONFIG)

        z_upsilon = model.encode_unknown(to_model_range(x0[None]))
        z_kappa = model.encode_known(model.conditions([record]))
        x_T = ddim_encode(x0[None], z_kappa, z_upsilon, model, SCHEDULE, CONFIG)
        reconstruction = ddim_decode(x_T, z_kappa, z_upsilon, model, SCHEDULE, CONFIG)[0]
        assert torch.equal(transferred, reconstruction)

    def test_cross_site_transfer_changes_pixels(self, model):
        x0 = torch.rand(16, 16, generator=torch.Generator().manual_seed(1))
        record = CovariateRecord(age=42.0, sex=1, site="siteB")
        same = harmonize_image(x0, record, "siteB", model, SCHEDULE, CONFIG)
        other = harmonize_image(x0, record, "siteA", model, SCHEDULE, CONFIG)
        assert not torch.equal(same, other)

    def test_output_shape_and_range(self, model):
        record = CovariateRecord(age=30.0, sex=0, site="siteA")
        out = harmonize_image(torch.rand(1, 16, 16), record, "siteC", model, SCHEDULE, CONFIG)
        assert out.shape == (1, 16, 16)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_multi_image_batch_rejected(self, model):
        record = CovariateRecord(age=30.0, sex=0, site="siteA")
        with pytest.raises(ValueError, match="one"):
            harmonize_image(torch.rand(4, 16, 16), record, "siteC", model, SCHEDULE, CONFIG)

    def test_unknown_target_rejected(self, model):
        with pytest.raises(ValueError, match="siteX"):
            harmonize_image(torch.rand(16, 16), CovariateRecord(age=30.0, sex=0, site="siteA"),
                            "siteX", model, SCHEDULE, CONFIG)


class TestHarmonizeDataset:
    def test_default_target_is_largest_site(self, model, cohort):
        bigger = Dataset(
            np.concatenate([cohort.images, cohort.subset_by_site("siteB").images]),
            list(cohort.records) + list(cohort.subset_by_site("siteB").records),
            list(cohort.ids) + [f"dup_{i}" for i in cohort.subset_by_site("siteB").ids],
        )
        _, manifest = harmonize_dataset(
            HarmonizationJob(dataset=bigger, model=model, sampler=CONFIG)
        )
        assert {row["site_target"] for row in manifest} == {"siteB"}

    def test_records_keep_source_site(self, model, cohort):
        harmonized, _ = harmonize_dataset(
            HarmonizationJob(dataset=cohort, model=model, target_site="siteA", sampler=CONFIG)
        )
        assert harmonized.sites() == cohort.sorted_by_id().sites()

    def test_manifest_contract(self, model, cohort, tmp_path):
        harmonized, manifest = harmonize_dataset(
            HarmonizationJob(
                dataset=cohort, model=model, target_site="siteA", sampler=CONFIG,
                output_dir=tmp_path, source_root="/src/data",
            )
        )
        assert len(manifest) == len(cohort)
        assert [row["id"] for row in manifest] == sorted(cohort.ids)
        for row in manifest:
            assert set(row) == set(MANIFEST_COLUMNS)
            assert row["status"] == "ok"
            assert row["site_target"] == "siteA"
            assert row["source_path"].startswith("/src/data/images/")
        assert failure_count(manifest) == 0

        with open(tmp_path / "manifest.csv") as fh:
            written = list(csv.DictReader(fh))
        assert [r["id"] for r in written] == [r["id"] for r in manifest]
        reloaded = load_dataset(tmp_path)
        assert reloaded.ids == harmonized.ids
        # disk round trip quantizes to 8 bits
        assert np.abs(reloaded.images - harmonized.images).max() <= 0.5 / 255 + 1e-7

    def test_input_order_does_not_matter(self, model, cohort):
        shuffled = cohort.subset(list(reversed(range(len(cohort)))))
        a, _ = harmonize_dataset(HarmonizationJob(dataset=cohort, model=model, target_site="siteA", sampler=CONFIG))
        b, _ = harmonize_dataset(HarmonizationJob(dataset=shuffled, model=model, target_site="siteA", sampler=CONFIG))
        assert a.ids == b.ids
        assert np.array_equal(a.images, b.images)

    def test_batch_size_does_not_change_results(self, model, cohort):
        a, _ = harmonize_dataset(HarmonizationJob(dataset=cohort, model=model, target_site="siteB",
                                                  sampler=CONFIG, batch_size=64))
        b, _ = harmonize_dataset(HarmonizationJob(dataset=cohort, model=model, target_site="siteB",
                                                  sampler=CONFIG, batch_size=2))
        assert np.allclose(a.images, b.images, atol=1e-6)

    def test_empty_dataset_gives_empty_outputs(self, model, tmp_path):
        empty = Dataset(np.zeros((0, 16, 16), dtype=np.float32), [], [])
        harmonized, manifest = harmonize_dataset(
            HarmonizationJob(dataset=empty, model=model, sampler=CONFIG, output_dir=tmp_path)
        )
        assert len(harmonized) == 0 and manifest == []
        with open(tmp_path / "manifest.csv") as fh:
            lines = fh.read().splitlines()
        assert lines == [",".join(MANIFEST_COLUMNS)]

    def test_unknown_target_site_rejected_at_job_level(self, model, cohort):
        with pytest.raises(ValueError, match="siteX"):
            HarmonizationJob(dataset=cohort, model=model, target_site="siteX")

    def test_failures_recorded_not_raised(self, model, cohort):
        class _Poisoned:
            """Delegate that corrupts the latent of marked images (corner
            pixel saturated), simulating a per-sample numerical failure."""

            def __init__(self, inner):
                self._inner = inner

            def __getattr__(self, name):
                return getattr(self._inner, name)

            def encode_unknown(self, x0):
                z = self._inner.encode_unknown(x0).clone()
                z[x0[:, 0, 0] >= 0.999] = float("nan")
                return z

        marked = cohort.images[:3].copy()
        marked[2, 0, 0] = 1.0
        bad = Dataset(marked, list(cohort.records[:3]), ["aa", "bb", "zz_broken"])
        harmonized, manifest = harmonize_dataset(
            HarmonizationJob(dataset=bad, model=_Poisoned(model), target_site="siteA", sampler=CONFIG)
        )
        assert failure_count(manifest) == 1
        by_id = {row["id"]: row for row in manifest}
        assert by_id["zz_broken"]["status"].startswith("error: NonFiniteStateError")
        assert by_id["aa"]["status"] == "ok" and by_id["bb"]["status"] == "ok"
        assert harmonized.ids == ["aa", "bb"]
