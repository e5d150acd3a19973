"""Evaluation suite: probes, distance correlation, Fréchet distance, embedding.

Four metric families measured on paired original/harmonized datasets:

* probe networks trained per seed to predict site, sex and age from
  images — site accuracy measures residual site information, age R² and
  sex accuracy measure preserved biology;
* Pearson correlation (PCC) between within-site pairwise-distance
  matrices before and after harmonization — preservation of individual
  differences;
* Fréchet distance between Gaussian fits to probe features of two image
  sets — distributional image quality;
* 2-D principal-component embedding of latent pairs — visual and
  quantitative latent separability.

Fréchet features come from a small probe trained in-process, not from a
pretrained Inception network, so absolute magnitudes are only comparable
within one report.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Dataset

PROBE_TASKS = ("site", "sex", "age")


@dataclass(frozen=True)
class ProbeConfig:
    task: str = "site"
    epochs: int = 300
    learning_rate: float = 1e-4
    val_fraction: float = 0.2
    patience: int = 30
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.task not in PROBE_TASKS:
            raise ValueError(f"task must be one of {PROBE_TASKS}, got {self.task!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("epochs, patience and batch_size must be >= 1")


class ProbeNet(nn.Module):
    """Three stride-2 convs (kernel 4, padding 1) plus a 3-layer head.

    ``features`` exposes the penultimate 128-wide activation, used as the
    embedding for Fréchet-distance computations.
    """

    def __init__(self, resolution: int, out_dim: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(1, 16, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 4, stride=2, padding=1), nn.ReLU(),
        )
        spatial = resolution // 8
        if spatial < 1:
            raise ValueError(f"resolution {resolution} too small for three stride-2 convs")
        flat = 64 * spatial * spatial
        self.fc1 = nn.Linear(flat, 768)
        self.fc2 = nn.Linear(768, 128)
        self.out = nn.Linear(128, out_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv(x).flatten(1)
        h = F.relu(self.fc1(h))
        return F.relu(self.fc2(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.features(x))


class TrainedProbe:
    """A fitted probe plus the label transform it was trained with."""

    def __init__(self, net: ProbeNet, task: str, site_vocabulary: tuple[str, ...],
                 age_mean: float, age_std: float, split: dict, history: list[dict]):
        self.net = net
        self.task = task
        self.site_vocabulary = site_vocabulary
        self.age_mean = age_mean
        self.age_std = age_std
        self.split = split
        self.history = history

    def _forward(self, images: np.ndarray) -> torch.Tensor:
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))[:, None]
        self.net.eval()
        with torch.no_grad():
            return self.net(x)

    def predict(self, images: np.ndarray):
        """Site labels, sex bits, or ages in years, depending on the task."""
        out = self._forward(images)
        if self.task == "site":
            return [self.site_vocabulary[i] for i in out.argmax(dim=1).tolist()]
        if self.task == "sex":
            return (out.squeeze(-1) > 0).long().tolist()
        return (out.squeeze(-1).numpy() * self.age_std + self.age_mean).astype(np.float64)

    def extract_features(self, images: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))[:, None]
        self.net.eval()
        with torch.no_grad():
            return self.net.features(x).numpy().astype(np.float64)


def _probe_targets(dataset: Dataset, task: str, site_vocabulary, age_mean, age_std):
    if task == "site":
        vocab = list(site_vocabulary)
        return torch.tensor([vocab.index(r.site) for r in dataset.records], dtype=torch.long)
    if task == "sex":
        return torch.tensor([float(r.sex) for r in dataset.records])
    return torch.tensor([(r.age - age_mean) / age_std for r in dataset.records], dtype=torch.float32)


def _probe_loss(task: str, out: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if task == "site":
        return F.cross_entropy(out, target)
    if task == "sex":
        return F.binary_cross_entropy_with_logits(out.squeeze(-1), target)
    return F.mse_loss(out.squeeze(-1), target)


def train_probe(dataset: Dataset, config: ProbeConfig) -> TrainedProbe:
    """Fit a probe with early stopping on an internal validation split.

    The best-validation-loss parameters are restored at the end.  For the
    classification tasks the dataset must contain at least two classes.
    """
    if len(dataset) < 2:
        raise ValueError("probe training needs at least 2 samples")
    vocab = tuple(sorted(dataset.site_counts()))
    if config.task == "site" and len(vocab) < 2:
        raise ValueError(f"site probe needs >= 2 sites, got {list(vocab)}")
    if config.task == "sex" and len({r.sex for r in dataset.records}) < 2:
        raise ValueError("sex probe needs both classes present")

    ages = np.array([r.age for r in dataset.records])
    age_std = float(ages.std())
    age_mean, age_std = float(ages.mean()), age_std if age_std > 0 else 1.0

    torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    perm = torch.randperm(len(dataset), generator=generator).tolist()
    n_val = max(1, round(config.val_fraction * len(dataset)))
    if n_val >= len(dataset):
        raise ValueError("validation split leaves no training data")
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    out_dim = len(vocab) if config.task == "site" else 1
    net = ProbeNet(dataset.resolution, out_dim)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    images = torch.from_numpy(np.ascontiguousarray(dataset.images))[:, None]
    targets = _probe_targets(dataset, config.task, vocab, age_mean, age_std)

    best_loss, best_state, since_best = math.inf, None, 0
    history: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        net.train()
        order = torch.randperm(len(train_idx), generator=generator)
        for start in range(0, len(order), config.batch_size):
            idx = torch.tensor(train_idx)[order[start : start + config.batch_size]]
            loss = _probe_loss(config.task, net(images[idx]), targets[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        net.eval()
        with torch.no_grad():
            val_loss = float(_probe_loss(config.task, net(images[val_idx]), targets[val_idx]))
        history.append({"epoch": epoch, "val_loss": val_loss})
        if val_loss < best_loss - 1e-6:
            best_loss, since_best = val_loss, 0
            best_state = copy.deepcopy(net.state_dict())
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    split = {
        "train": [dataset.ids[i] for i in train_idx],
        "val": [dataset.ids[i] for i in val_idx],
    }
    return TrainedProbe(net, config.task, vocab, age_mean, age_std, split, history)


def site_accuracy(probe: TrainedProbe, dataset: Dataset) -> float:
    """Fraction of argmax site predictions matching the true labels."""
    if len(dataset) == 0:
        raise ValueError("empty test set")
    predictions = probe.predict(dataset.images)
    return sum(p == r.site for p, r in zip(predictions, dataset.records)) / len(dataset)


def sex_accuracy(probe: TrainedProbe, dataset: Dataset) -> float:
    """Fraction of thresholded sex predictions matching the true labels."""
    if len(dataset) == 0:
        raise ValueError("empty test set")
    predictions = probe.predict(dataset.images)
    return sum(p == r.sex for p, r in zip(predictions, dataset.records)) / len(dataset)


def age_r2(probe: TrainedProbe, dataset: Dataset) -> float:
    """Coefficient of determination of age predictions on the test set.

    1 - SS_res / SS_tot about the test mean; 0 when the test ages are all
    equal (no improvement over a mean predictor is possible).
    """
    if len(dataset) == 0:
        raise ValueError("empty test set")
    truth = np.array([r.age for r in dataset.records], dtype=np.float64)
    pred = np.asarray(probe.predict(dataset.images), dtype=np.float64)
    ss_tot = float(((truth - truth.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 0.0
    ss_res = float(((truth - pred) ** 2).sum())
    return 1.0 - ss_res / ss_tot


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric, zero-diagonal matrix of squared Euclidean distances."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"distance matrix must be square, got {v.shape}")
        if not np.allclose(v, v.T, atol=1e-12):
            raise ValueError("distance matrix must be symmetric")
        if np.any(v < 0) or np.any(np.diag(v) != 0):
            raise ValueError("distances must be non-negative with a zero diagonal")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def upper_triangle(self) -> np.ndarray:
        return self.values[np.triu_indices(self.n, k=1)]


def distance_matrix(images: np.ndarray) -> DistanceMatrix:
    """Pairwise squared Euclidean distances between flattened images."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] < 2:
        raise ValueError(f"need at least 2 images, got {images.shape[0]}")
    flat = images.reshape(images.shape[0], -1)
    n = flat.shape[0]
    values = np.empty((n, n))
    for i in range(n):
        values[i] = ((flat - flat[i]) ** 2).sum(axis=1)
    values = (values + values.T) / 2.0
    np.fill_diagonal(values, 0.0)
    return DistanceMatrix(values)


def _as_triangle(d) -> np.ndarray:
    if isinstance(d, DistanceMatrix):
        return d.upper_triangle()
    return DistanceMatrix(np.asarray(d)).upper_triangle()


def pcc(d_unharmonized, d_harmonized) -> float:
    """Pearson correlation over the strict upper triangles of two
    distance matrices with identical subject ordering."""
    a, b = _as_triangle(d_unharmonized), _as_triangle(d_harmonized)
    if a.size != b.size:
        raise ValueError(f"matrices disagree in size: {a.size} vs {b.size} pairs")
    if a.std() == 0.0 or b.std() == 0.0:
        raise ValueError("zero variance in a distance triangle; correlation undefined")
    return float(np.corrcoef(a, b)[0, 1])


def _mean_cov(features: np.ndarray, shrinkage: bool, label: str):
    n, k = features.shape
    if n < 2:
        raise ValueError(f"{label}: need >= 2 samples for a covariance, got {n}")
    if n <= k and not shrinkage:
        raise ValueError(
            f"{label}: {n} samples cannot support a full-rank {k}x{k} covariance; "
            "pass shrinkage=True for diagonal loading"
        )
    mu = features.mean(axis=0)
    cov = np.cov(features, rowvar=False, ddof=1).reshape(k, k)
    if shrinkage:
        cov = cov + 1e-6 * np.eye(k)
    return mu, cov


def frechet_distance(
    images_a: np.ndarray,
    images_b: np.ndarray,
    feature_extractor: Callable[[np.ndarray], np.ndarray] | None = None,
    shrinkage: bool = False,
) -> float:
    """Fréchet distance between Gaussian fits to the two feature clouds.

    ``feature_extractor`` maps an image stack to an (n, k) feature array;
    None means "use flattened pixels".  The covariance square root is
    taken by symmetrized eigendecomposition with negative eigenvalues
    clamped to zero, so the result is always >= 0.
    """
    def embed(images):
        arr = np.asarray(images, dtype=np.float64)
        if feature_extractor is not None:
            arr = np.asarray(feature_extractor(images), dtype=np.float64)
        return arr.reshape(arr.shape[0], -1)

    fa, fb = embed(images_a), embed(images_b)
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature widths differ: {fa.shape[1]} vs {fb.shape[1]}")
    mu_a, cov_a = _mean_cov(fa, shrinkage, "set a")
    mu_b, cov_b = _mean_cov(fb, shrinkage, "set b")

    vals_a, vecs_a = np.linalg.eigh(cov_a)
    root_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    cross = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    trace_sqrt = np.sqrt(np.clip(cross, 0.0, None)).sum()
    distance = float(
        ((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt
    )
    return max(distance, 0.0)


def psnr(reference: np.ndarray, reconstruction: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; infinite for identical inputs."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(reconstruction, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def embed_latents_2d(
    latents: np.ndarray,
    sites: Sequence[str] | None = None,
    ids: Sequence[str] | None = None,
    out_png: str | Path | None = None,
    out_csv: str | Path | None = None,
) -> np.ndarray:
    """Project latent vectors onto their top-2 principal directions.

    Optionally writes a site-colored scatter plot and a coordinate CSV.
    Signs are fixed so each component's largest-magnitude coordinate is
    positive, making the output reproducible.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] < 3:
        raise ValueError(f"need an (n >= 3, d) latent array, got {latents.shape}")
    centered = latents - latents.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2] if vt.shape[0] >= 2 else np.vstack([vt, np.zeros((2 - vt.shape[0], vt.shape[1]))])
    coords = centered @ components.T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 2 - coords.shape[1]))])
    for j in range(2):
        extreme = np.argmax(np.abs(coords[:, j]))
        if coords[extreme, j] < 0:
            coords[:, j] = -coords[:, j]

    if out_png is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 5))
        if sites is not None:
            for site in sorted(set(sites)):
                mask = np.array([s == site for s in sites])
                ax.scatter(coords[mask, 0], coords[mask, 1], s=12, label=site, alpha=0.7)
            ax.legend(title="site")
        else:
            ax.scatter(coords[:, 0], coords[:, 1], s=12, alpha=0.7)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        fig.tight_layout()
        Path(out_png).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_png, dpi=120)
        plt.close(fig)

    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "pc1", "pc2", "site"])
            for i in range(coords.shape[0]):
                writer.writerow([
                    ids[i] if ids is not None else i,
                    repr(float(coords[i, 0])),
                    repr(float(coords[i, 1])),
                    sites[i] if sites is not None else "",
                ])
    return coords


def dataset_fingerprint(dataset: Dataset) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(dataset.images).tobytes())
    for sample_id, record in zip(dataset.ids, dataset.records):
        digest.update(f"{sample_id}|{record.age!r}|{record.sex}|{record.site}".encode())
    return digest.hexdigest()[:16]


@dataclass
class EvalReport:
    """Aggregated metrics for one original/harmonized dataset pair."""

    seeds: list[int]
    reference_site: str
    metrics: dict
    pcc: dict
    frechet: dict
    dataset_fingerprints: dict
    split: dict
    notes: str = (
        "Frechet features come from an in-process probe, not a pretrained "
        "Inception network; magnitudes are only comparable within this report."
    )

    def to_json(self) -> str:
        payload = {k: getattr(self, k) for k in (
            "seeds", "reference_site", "metrics", "pcc", "frechet",
            "dataset_fingerprints", "split", "notes",
        )}
        return json.dumps(payload, indent=2, sort_keys=True)

    def text_table(self) -> str:
        def cell(stats):
            if stats is None:
                return "-"
            if stats["std"] is None:
                return f"{stats['mean']:.3f}"
            return f"{stats['mean']:.3f} ± {stats['std']:.3f}"

        pooled = self.pcc.get("pooled_weighted")
        pcc_cell = f"{pooled:.3f}" if isinstance(pooled, float) else str(pooled)
        rows = [
            ("Unharmonized",
             f"{self.frechet['original_nonreference_vs_reference']:.3f}",
             cell(self.metrics["original"]["site_accuracy"]),
             cell(self.metrics["original"]["age_r2"]),
             cell(self.metrics["original"]["sex_accuracy"]),
             "1.000"),
            ("Harmonized",
             f"{self.frechet['harmonized_nonreference_vs_reference']:.3f}",
             cell(self.metrics["harmonized"]["site_accuracy"]),
             cell(self.metrics["harmonized"]["age_r2"]),
             cell(self.metrics["harmonized"]["sex_accuracy"]),
             pcc_cell),
        ]
        header = ("Dataset", "FD vs ref", "Site Acc", "Age R2", "Sex Acc", "PCC")
        widths = [max(len(str(r[i])) for r in rows + [header]) for i in range(len(header))]
        lines = [self.notes, ""]
        lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
        lines.append("  ".join("-" * w for w in widths))
        for row in rows:
            lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(self.to_json() + "\n")
        (out_dir / "report.txt").write_text(self.text_table())
        with open(out_dir / "split.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "role", "site"])
            for role in ("train", "test"):
                for sample_id, site in self.split[role]:
                    writer.writerow([sample_id, role, site])
        return out_dir


def _aggregate(values: list[float]) -> dict:
    return {
        "values": [float(v) for v in values],
        "mean": float(np.mean(values)),
        "std": float(np.std(values, ddof=1)) if len(values) >= 2 else None,
    }


def _split_ids(dataset: Dataset, test_fraction: float, seed: int):
    """Site-stratified train/test partition of subject ids."""
    rng = np.random.default_rng(seed)
    train_ids, test_ids = [], []
    for site in sorted(dataset.site_counts()):
        ids = sorted(i for i, r in zip(dataset.ids, dataset.records) if r.site == site)
        order = rng.permutation(len(ids))
        n_test = max(1, round(test_fraction * len(ids)))
        for j, k in enumerate(order):
            (test_ids if j < n_test else train_ids).append(ids[k])
    return sorted(train_ids), sorted(test_ids)


def evaluate(
    original: Dataset,
    harmonized: Dataset,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    reference_site: str | None = None,
    test_fraction: float = 0.3,
    split_seed: int = 2024,
    probe_epochs: int = 300,
    probe_patience: int = 30,
    probe_lr: float = 1e-4,
    out_dir: str | Path | None = None,
) -> EvalReport:
    """Full metric sweep over an original/harmonized dataset pair.

    Datasets must contain the same ids.  Probes are trained per seed on
    the train split of each dataset and scored on its test split; the
    Fréchet feature extractor is a single site probe trained on the
    original train split and frozen for every distance in the report.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    original = original.sorted_by_id()
    harmonized = harmonized.sorted_by_id()
    if original.ids != harmonized.ids:
        extra_h = sorted(set(harmonized.ids) - set(original.ids))
        extra_o = sorted(set(original.ids) - set(harmonized.ids))
        first = (extra_o + extra_h)[0] if (extra_o or extra_h) else original.ids[0]
        raise ValueError(f"dataset ids do not match; first mismatch: {first!r}")

    reference = reference_site if reference_site is not None else original.modal_site()
    if reference not in set(original.sites()):
        raise ValueError(f"reference site {reference!r} not present in the original dataset")

    train_ids, test_ids = _split_ids(original, test_fraction, split_seed)
    id_to_index = {sample_id: i for i, sample_id in enumerate(original.ids)}
    train_idx = [id_to_index[i] for i in train_ids]
    test_idx = [id_to_index[i] for i in test_ids]
    subsets = {
        "original": (original.subset(train_idx), original.subset(test_idx)),
        "harmonized": (harmonized.subset(train_idx), harmonized.subset(test_idx)),
    }

    def probe_cfg(task, seed):
        return ProbeConfig(task=task, epochs=probe_epochs, patience=probe_patience,
                           learning_rate=probe_lr, seed=seed)

    metrics = {name: {m: [] for m in ("site_accuracy", "age_r2", "sex_accuracy")}
               for name in subsets}
    scorers = {"site_accuracy": ("site", site_accuracy),
               "age_r2": ("age", age_r2),
               "sex_accuracy": ("sex", sex_accuracy)}
    for seed in seeds:
        for name, (train_set, test_set) in subsets.items():
            for metric, (task, scorer) in scorers.items():
                probe = train_probe(train_set, probe_cfg(task, seed))
                metrics[name][metric].append(scorer(probe, test_set))
    aggregated = {
        name: {metric: _aggregate(values) for metric, values in per_metric.items()}
        for name, per_metric in metrics.items()
    }

    per_site: dict[str, object] = {}
    triangles_orig, triangles_harm, weights = [], [], []
    for site in sorted(original.site_counts()):
        site_orig = original.subset_by_site(site)
        site_harm = harmonized.subset_by_site(site)
        if len(site_orig) < 2:
            per_site[site] = "error: fewer than 2 subjects"
            continue
        d_orig = distance_matrix(site_orig.images)
        d_harm = distance_matrix(site_harm.images)
        try:
            per_site[site] = pcc(d_orig, d_harm)
        except ValueError as exc:
            per_site[site] = f"error: {exc}"
            continue
        triangles_orig.append(d_orig.upper_triangle())
        triangles_harm.append(d_harm.upper_triangle())
        weights.append(len(site_orig) * (len(site_orig) - 1) / 2)
    numeric = [(v, w) for v, w in zip(per_site.values(), weights) if isinstance(v, float)]
    if numeric:
        pooled_weighted = float(sum(v * w for v, w in numeric) / sum(w for _, w in numeric))
        pooled_concatenated = float(np.corrcoef(
            np.concatenate(triangles_orig), np.concatenate(triangles_harm))[0, 1])
    else:
        pooled_weighted = pooled_concatenated = "error: no site produced a defined PCC"
    pcc_report = {
        "per_site": per_site,
        "pooled_weighted": pooled_weighted,
        "pooled_concatenated": pooled_concatenated,
    }

    extractor_probe = train_probe(subsets["original"][0], probe_cfg("site", seeds[0]))
    extractor = extractor_probe.extract_features
    nonref_idx = [i for i, r in enumerate(original.records) if r.site != reference]
    ref_idx = [i for i, r in enumerate(original.records) if r.site == reference]
    frechet = {
        "reference_site": reference,
        "original_vs_harmonized": frechet_distance(
            original.images, harmonized.images, extractor, shrinkage=True),
        "harmonized_nonreference_vs_reference": frechet_distance(
            harmonized.images[nonref_idx], original.images[ref_idx], extractor, shrinkage=True),
        "original_nonreference_vs_reference": frechet_distance(
            original.images[nonref_idx], original.images[ref_idx], extractor, shrinkage=True),
    }

    report = EvalReport(
        seeds=list(seeds),
        reference_site=reference,
        metrics=aggregated,
        pcc=pcc_report,
        frechet=frechet,
        dataset_fingerprints={
            "original": dataset_fingerprint(original),
            "harmonized": dataset_fingerprint(harmonized),
        },
        split={
            "test_fraction": test_fraction,
            "seed": split_seed,
            "train": [(i, original.records[id_to_index[i]].site) for i in train_ids],
            "test": [(i, original.records[id_to_index[i]].site) for i in test_ids],
        },
    )
    if out_dir is not None:
        report.save(out_dir)
    return report
