import csv

import numpy as np
import pytest
import torch
from torch import nn

from ddae.data import CovariateRecord, Dataset
from ddae.model import CovariateNorm, DdaeModel, FingerprintMismatchError, ModelConfig, encode_covariates
from ddae.phantoms import CohortSpec, generate_cohort
from ddae.schedule import make_linear_schedule
from ddae.training import (
    DivergenceError,
    LossBreakdown,
    TrainConfig,
    aux_losses,
    ddae_loss,
    train,
)

torch.set_num_threads(1)

VOCAB = ("siteA", "siteB", "siteC")
SCHEDULE = make_linear_schedule(25, 1e-4, 0.02)


def records_for(n):
    return [
        CovariateRecord(age=30.0 + 5 * i, sex=i % 2, site=VOCAB[i % 3]) for i in range(n)
    ]


class _StubModel:
    """Interface double whose noise prediction is injectable."""

    def __init__(self, predict, latent_dim=4):
        self._predict = predict
        self.latent_dim = latent_dim
        self.covariate_norm = CovariateNorm(50.0, 10.0)
        self.site_vocabulary = VOCAB

    def conditions(self, records):
        rows = [encode_covariates(r, self.covariate_norm, self.site_vocabulary) for r in records]
        return torch.from_numpy(np.stack(rows))

    def encode_known(self, c):
        return torch.zeros(c.shape[0], self.latent_dim)

    def encode_unknown(self, x0):
        return torch.zeros(x0.shape[0], self.latent_dim)

    def predict_noise(self, x_t, t, z_kappa, z_upsilon):
        return self._predict(x_t, t)


def oracle_predictor(x_t, t):
    # on mid-gray inputs the clean signal is exactly zero, so the noise is
    # the corrupted image rescaled
    ab = torch.tensor(SCHEDULE.alpha_bars, dtype=x_t.dtype)[t - 1]
    return x_t / (1.0 - ab).sqrt()[:, None, None]


class TestDiffusionLossOracles:
    def test_perfect_predictor_scores_zero(self):
        model = _StubModel(oracle_predictor)
        images = torch.full((16, 8, 8), 0.5)
        gen = torch.Generator().manual_seed(0)
        breakdown = ddae_loss(images, records_for(16), model, SCHEDULE, gen, aux_mode="none")
        assert float(breakdown.diffusion_loss) < 1e-10
        assert float(breakdown.total) < 1e-10

    def test_zero_predictor_scores_unit_noise_power(self):
        model = _StubModel(lambda x_t, t: torch.zeros_like(x_t))
        images = torch.full((512, 8, 8), 0.5)
        gen = torch.Generator().manual_seed(1)
        breakdown = ddae_loss(images, records_for(512), model, SCHEDULE, gen, aux_mode="none")
        # E[eps^2] = 1; 512 * 64 draws put the sample mean well within 0.05
        assert float(breakdown.diffusion_loss) == pytest.approx(1.0, abs=0.05)

    def test_total_equals_diffusion_when_weight_zero(self):
        model = _StubModel(lambda x_t, t: torch.zeros_like(x_t))
        images = torch.rand(8, 8, 8, generator=torch.Generator().manual_seed(2))
        gen = torch.Generator().manual_seed(3)
        breakdown = ddae_loss(
            images, records_for(8), model, SCHEDULE, gen, aux_mode="none", aux_weight=0.0
        )
        assert float(breakdown.total) == float(breakdown.diffusion_loss)


class _ConstHead:
    def __init__(self, out):
        self.out = out

    def __call__(self, z):
        return self.out


class TestAuxLosses:
    def test_mode_none_returns_zeros(self):
        model = _StubModel(oracle_predictor)
        z = torch.zeros(4, 4)
        age, sex, site = aux_losses(z, z, records_for(4), model, "none")
        assert float(age) == float(sex) == float(site) == 0.0

    def test_perfect_heads_score_zero(self):
        # heads that emit the exact normalized age / saturated logits
        model = _StubModel(oracle_predictor)
        recs = records_for(6)
        norm = model.covariate_norm
        age_out = torch.tensor([[(r.age - norm.age_mean) / norm.age_std] for r in recs])
        sex_out = torch.tensor([[(2.0 * r.sex - 1.0) * 1000.0] for r in recs])
        site_out = 1000.0 * torch.eye(3)[[VOCAB.index(r.site) for r in recs]]
        model.kappa_heads = {
            "age": _ConstHead(age_out),
            "sex": _ConstHead(sex_out),
            "site": _ConstHead(site_out),
        }
        z = torch.zeros(6, 4)
        age, sex, site = aux_losses(z, z, recs, model, "supervise_kappa")
        assert float(age) == 0.0
        assert float(sex) == 0.0
        assert float(site) == 0.0

    def test_unknown_mode_rejected(self):
        model = _StubModel(oracle_predictor)
        z = torch.zeros(2, 4)
        with pytest.raises(ValueError, match="aux_mode"):
            aux_losses(z, z, records_for(2), model, "kappa")

    def test_both_sums_kappa_and_adversarial_terms(self):
        torch.manual_seed(0)
        model = DdaeModel(
            ModelConfig(resolution=16, latent_dim=8, base_channels=8, channel_mults=(1, 2)),
            VOCAB,
            CovariateNorm(50.0, 10.0),
        )
        model.eval()  # make dropout/batch-norm deterministic across calls
        recs = records_for(4)
        zk = torch.randn(4, 8, generator=torch.Generator().manual_seed(5))
        zu = torch.randn(4, 8, generator=torch.Generator().manual_seed(6))
        with torch.no_grad():
            kappa_only = aux_losses(zk, zu, recs, model, "supervise_kappa")
            upsilon_only = aux_losses(zk, zu, recs, model, "adversarial_upsilon")
            both = aux_losses(zk, zu, recs, model, "both")
        for b, k, u in zip(both, kappa_only, upsilon_only):
            assert float(b) == pytest.approx(float(k) + float(u), rel=1e-6)


class TestLossBreakdown:
    def test_total_combines_terms_with_weight(self):
        d = torch.tensor(2.0)
        a, s, c = torch.tensor(0.5), torch.tensor(0.25), torch.tensor(0.125)
        breakdown = LossBreakdown.compute(d, a, s, c, aux_weight=0.1)
        assert float(breakdown.total) == pytest.approx(2.0 + 0.1 * 0.875)

    @pytest.mark.parametrize(
        "bad,name",
        [(0, "diffusion_loss"), (1, "aux_age_loss"), (2, "aux_sex_loss"), (3, "aux_site_loss")],
    )
    def test_non_finite_term_raises_naming_it(self, bad, name):
        terms = [torch.tensor(1.0) for _ in range(4)]
        terms[bad] = torch.tensor(float("inf") if bad % 2 else float("nan"))
        with pytest.raises(DivergenceError, match=name):
            LossBreakdown.compute(*terms, aux_weight=0.1)


class TinyDdae(nn.Module):
    """Fully-connected everything, small enough for finite differences."""

    def __init__(self, resolution=4, latent=2):
        super().__init__()
        self.latent_dim = latent
        self.covariate_norm = CovariateNorm(50.0, 10.0)
        self.site_vocabulary = VOCAB
        pixels = resolution * resolution
        self.known = nn.Linear(3, latent)
        self.unknown = nn.Linear(pixels, latent)
        self.predictor = nn.Linear(pixels + 1 + 2 * latent, pixels)
        self.kappa_heads = nn.ModuleDict(
            {"age": nn.Linear(latent, 1), "sex": nn.Linear(latent, 1), "site": nn.Linear(latent, 3)}
        )

    def conditions(self, records):
        rows = [encode_covariates(r, self.covariate_norm, self.site_vocabulary) for r in records]
        return torch.tensor(np.stack(rows), dtype=torch.float64)

    def encode_known(self, c):
        return self.known(c)

    def encode_unknown(self, x0):
        return self.unknown(x0.flatten(1))

    def predict_noise(self, x_t, t, z_kappa, z_upsilon):
        t_feat = (t.to(x_t.dtype) / SCHEDULE.T)[:, None]
        inp = torch.cat([x_t.flatten(1), t_feat, z_kappa, z_upsilon], dim=1)
        return self.predictor(inp).reshape(x_t.shape)


class TestGradientCheck:
    def test_analytic_gradients_match_central_differences(self):
        torch.manual_seed(11)
        model = TinyDdae().double()
        n_params = sum(p.numel() for p in model.parameters())
        assert n_params <= 500

        images = torch.rand(3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(12))
        recs = records_for(3)

        def loss_tensor():
            gen = torch.Generator().manual_seed(99)
            return ddae_loss(
                images, recs, model, SCHEDULE, gen, aux_mode="supervise_kappa", aux_weight=0.1
            ).total

        def loss_value():
            with torch.no_grad():
                return float(loss_tensor())

        model.zero_grad()
        loss_tensor().backward()

        h = 1e-6
        worst = 0.0
        for param in model.parameters():
            grad = param.grad
            flat = param.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_value()
                flat[i] = orig - h
                down = loss_value()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                analytic = float(grad.view(-1)[i])
                rel = abs(numeric - analytic) / max(1e-8, abs(numeric) + abs(analytic))
                worst = max(worst, rel)
        assert worst < 1e-4


class TestInputValidation:
    def test_empty_batch_rejected(self):
        model = _StubModel(oracle_predictor)
        gen = torch.Generator().manual_seed(0)
        with pytest.raises(ValueError):
            ddae_loss(torch.zeros(0, 8, 8), [], model, SCHEDULE, gen)

    def test_record_count_mismatch_rejected(self):
        model = _StubModel(oracle_predictor)
        gen = torch.Generator().manual_seed(0)
        with pytest.raises(ValueError, match="records"):
            ddae_loss(torch.zeros(4, 8, 8), records_for(3), model, SCHEDULE, gen)

    def test_train_rejects_empty_dataset(self):
        empty = Dataset(np.zeros((0, 16, 16), dtype=np.float32), [], [])
        with pytest.raises(ValueError, match="empty"):
            train(TrainConfig(model=ModelConfig(resolution=16, channel_mults=(1, 2))), empty)

    def test_train_rejects_resolution_mismatch(self):
        ds = generate_cohort(CohortSpec(n_per_site=2, resolution=16, seed=0))
        config = TrainConfig(epochs=1, model=ModelConfig(resolution=32))
        with pytest.raises(ValueError, match="resolution"):
            train(config, ds)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(aux_weight=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(aux_mode="dual")


def tiny_train_config(**overrides):
    defaults = dict(
        epochs=2,
        batch_size=8,
        schedule_T=20,
        seed=4,
        model=ModelConfig(resolution=16, latent_dim=8, base_channels=8, channel_mults=(1, 2)),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(CohortSpec(n_per_site=4, resolution=16, seed=21))


class TestTrainLoop:
    def test_history_rows_and_files(self, cohort, tmp_path):
        config = tiny_train_config(
            checkpoint_path=str(tmp_path / "model.pt"), history_path=str(tmp_path / "history.csv")
        )
        model, history = train(config, cohort)
        assert [row["epoch"] for row in history] == [1, 2]
        for row in history:
            assert set(row) == {"epoch", "diffusion_loss", "aux_age_loss", "aux_sex_loss", "aux_site_loss", "total"}
            assert all(np.isfinite(v) for v in row.values())
            assert row["total"] == pytest.approx(
                row["diffusion_loss"]
                + 0.1 * (row["aux_age_loss"] + row["aux_sex_loss"] + row["aux_site_loss"]),
                rel=1e-6,
            )
        assert not model.training  # returned in eval mode
        assert (tmp_path / "model.pt").exists()
        with open(tmp_path / "history.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert float(rows[1]["total"]) == pytest.approx(history[1]["total"])

    def test_same_seed_reproduces_parameters_exactly(self, cohort):
        runs = [train(tiny_train_config(), cohort) for _ in range(2)]
        assert runs[0][1] == runs[1][1]
        for a, b in zip(runs[0][0].parameters(), runs[1][0].parameters()):
            assert torch.equal(a, b)

    def test_leftover_singleton_batch_is_folded(self, cohort):
        # 12 samples with batch 11 leaves a singleton, which the batch-norm
        # aux heads cannot digest unless it is merged into the prior batch
        model, history = train(tiny_train_config(epochs=1, batch_size=11), cohort)
        assert len(history) == 1

    def test_divergence_raises_with_history_attached(self, cohort, tmp_path):
        config = tiny_train_config(
            epochs=3, learning_rate=1e12, history_path=str(tmp_path / "history.csv")
        )
        with pytest.raises(DivergenceError, match="non-finite") as info:
            train(config, cohort)
        assert isinstance(info.value.history, list)
        assert (tmp_path / "history.csv").exists()

    def test_resume_continues_and_checks_fingerprint(self, cohort):
        model, _ = train(tiny_train_config(epochs=1), cohort)
        first = [p.clone() for p in model.parameters()]
        resumed, history = train(tiny_train_config(epochs=1, seed=5), cohort, model=model)
        assert resumed is model
        assert len(history) == 1
        assert any(not torch.equal(a, b) for a, b in zip(first, resumed.parameters()))
        with pytest.raises(FingerprintMismatchError):
            train(tiny_train_config(epochs=1, schedule_T=33), cohort, model=model)
