"""Datasets, non-IID partitioners, and per-client train/test splits.

Label skew uses per-class Dirichlet draws with largest-remainder rounding;
concept skew groups clients by domain and runs the Dirichlet partitioner
inside each domain block.  The synthetic generator produces class templates
(optionally recolored per domain) plus Gaussian pixel noise, which a small
model can fit in a few dozen SGD steps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, IngestionError, PartitionError


@dataclass
class Dataset:
    images: np.ndarray  # [n, 3, H, W] float64 in [0, 1]
    labels: np.ndarray  # [n] int64
    class_count: int
    domains: np.ndarray | None = None  # [n] int64
    domain_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.images):
            raise DataError("images and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError("labels must lie in [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Shard:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class PartitionPlan:
    assignment: np.ndarray  # sample index -> client id
    num_clients: int
    class_count: int
    alpha: float
    class_histograms: np.ndarray  # [num_clients, class_count]

    def client_indices(self, client_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == client_id)

    def to_json_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "num_clients": self.num_clients,
            "clients": {
                str(c): self.client_indices(c).tolist() for c in range(self.num_clients)
            },
        }


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` by proportions; remainders break ties by index."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def _bounded_allocation(proportions: np.ndarray, total: int, caps: np.ndarray) -> np.ndarray:
    """Largest-remainder allocation that never exceeds per-slot caps."""
    counts = np.minimum(largest_remainder(proportions, total), caps)
    deficit = total - int(counts.sum())
    i = 0
    order = np.argsort(-proportions, kind="stable")
    while deficit > 0:
        slot = order[i % len(order)]
        if counts[slot] < caps[slot]:
            counts[slot] += 1
            deficit -= 1
        i += 1
    return counts


def _finish_plan(labels, assignment, num_clients, class_count, alpha) -> PartitionPlan:
    hist = np.zeros((num_clients, class_count), dtype=np.int64)
    np.add.at(hist, (assignment, labels), 1)
    return PartitionPlan(assignment, num_clients, class_count, alpha, hist)


def dirichlet_partition(
    labels: np.ndarray,
    num_clients: int,
    alpha: float,
    rng: np.random.Generator,
    min_per_client: int = 4,
    max_retries: int = 100,
) -> PartitionPlan:
    """Assign each class's samples to clients by a Dirichlet(alpha) draw.

    Redraws (up to ``max_retries``) until every client holds at least
    ``min_per_client`` samples.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if alpha <= 0:
        raise PartitionError("alpha must be > 0")
    if num_clients < 1:
        raise PartitionError("num_clients must be >= 1")
    class_count = int(labels.max()) + 1 if labels.size else 0
    if labels.size < num_clients * min_per_client:
        raise PartitionError(
            f"{labels.size} samples cannot give {num_clients} clients "
            f">= {min_per_client} each"
        )
    for _ in range(max_retries):
        assignment = np.full(len(labels), -1, dtype=np.int64)
        for c in range(class_count):
            idx = np.flatnonzero(labels == c)
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            shares = rng.dirichlet(np.full(num_clients, alpha))
            counts = largest_remainder(shares, idx.size)
            stop = np.cumsum(counts)
            start = stop - counts
            for client, (a, b) in enumerate(zip(start, stop)):
                assignment[idx[a:b]] = client
        sizes = np.bincount(assignment, minlength=num_clients)
        if sizes.min() >= min_per_client:
            return _finish_plan(labels, assignment, num_clients, class_count, alpha)
    raise PartitionError(
        f"no draw gave every client >= {min_per_client} samples in {max_retries} tries"
    )


def domain_partition(
    dataset: Dataset,
    clients_per_domain: int,
    alpha: float,
    rng: np.random.Generator,
    min_per_client: int = 4,
    max_retries: int = 100,
) -> PartitionPlan:
    """Dirichlet-partition each domain among its own client block; clients never mix domains."""
    if dataset.domains is None:
        raise PartitionError("dataset has no domain tags; domain_partition needs them")
    domain_ids = np.unique(dataset.domains)
    num_clients = len(domain_ids) * clients_per_domain
    assignment = np.full(len(dataset), -1, dtype=np.int64)
    for block, dom in enumerate(sorted(domain_ids.tolist())):
        at = np.flatnonzero(dataset.domains == dom)
        sub = dirichlet_partition(
            dataset.labels[at], clients_per_domain, alpha, rng,
            min_per_client=min_per_client, max_retries=max_retries,
        )
        assignment[at] = block * clients_per_domain + sub.assignment
    return _finish_plan(dataset.labels, assignment, num_clients, dataset.class_count, alpha)


def synth_dataset(
    class_count: int,
    samples: int,
    image_size: int,
    noise: float,
    domains: int,
    rng: np.random.Generator,
) -> Dataset:
    """Noisy-template classification data; per-domain affine recoloring gives concept skew."""
    if samples < class_count:
        raise DataError("need at least one sample per class")
    base = rng.uniform(0.0, 1.0, size=(class_count, 3, image_size, image_size))
    recolor_a = rng.uniform(0.6, 1.0, size=(domains, 3, 1, 1))
    recolor_b = rng.uniform(0.0, 0.3, size=(domains, 3, 1, 1))
    templates = np.clip(recolor_a[:, None] * base[None] + recolor_b[:, None], 0.0, 1.0)

    per_class = largest_remainder(np.full(class_count, 1.0 / class_count), samples)
    images = np.empty((samples, 3, image_size, image_size), dtype=np.float64)
    labels = np.empty(samples, dtype=np.int64)
    doms = np.empty(samples, dtype=np.int64)
    pos = 0
    for c in range(class_count):
        for j in range(per_class[c]):
            d = j % domains
            img = templates[d, c]
            if noise > 0:
                img = img + noise * rng.standard_normal(img.shape)
            images[pos] = np.clip(img, 0.0, 1.0)
            labels[pos] = c
            doms[pos] = d
            pos += 1
    order = rng.permutation(samples)
    return Dataset(
        images[order], labels[order], class_count,
        domains=doms[order] if domains > 1 else doms[order] * 0,
        domain_names=tuple(f"domain{i}" for i in range(domains)),
    )


def split_per_client(
    plan: PartitionPlan,
    dataset: Dataset,
    test_fraction: float,
    rng: np.random.Generator,
) -> list[tuple[Shard, Shard]]:
    """Stratified-where-possible per-client split into (train, test) shards."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie in (0, 1)")
    shards = []
    for client in range(plan.num_clients):
        idx = plan.client_indices(client)
        if idx.size < 2:
            raise DataError(f"client {client} has {idx.size} samples; cannot split")
        target = int(round(test_fraction * idx.size))
        target = min(max(target, 1), idx.size - 1)
        classes, counts = np.unique(dataset.labels[idx], return_counts=True)
        per_class = _bounded_allocation(counts / counts.sum(), target, counts)
        test_idx = []
        for cls, take in zip(classes, per_class):
            members = rng.permutation(idx[dataset.labels[idx] == cls])
            test_idx.extend(members[:take].tolist())
        test_mask = np.isin(idx, np.asarray(test_idx, dtype=np.int64))
        tr, te = idx[~test_mask], idx[test_mask]
        shards.append(
            (
                Shard(dataset.images[tr], dataset.labels[tr]),
                Shard(dataset.images[te], dataset.labels[te]),
            )
        )
    return shards


def load_folder_dataset(path: str | Path, image_size: int | None = None) -> Dataset:
    """Load ``<root>/<class_name>/*.png|ppm``; lexicographic class order.

    An optional ``domains.csv`` (header ``filename,domain``) adds domain tags;
    when present it must cover every image file.
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"no class directories under {root}")

    domain_of: dict[str, str] | None = None
    domains_csv = root / "domains.csv"
    if domains_csv.exists():
        with open(domains_csv, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["filename", "domain"]:
                raise IngestionError(f"{domains_csv} must have header 'filename,domain'")
            domain_of = {row["filename"]: row["domain"] for row in reader}

    images, labels, doms = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in (".png", ".ppm"))
        if not files:
            raise IngestionError(f"class directory {cdir} holds no .png/.ppm files")
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB")
                    if image_size is not None and im.size != (image_size, image_size):
                        im = im.resize((image_size, image_size), Image.NEAREST)
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                raise IngestionError(f"cannot decode {f}: {exc}") from exc
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
            if domain_of is not None:
                key = f.name
                if key not in domain_of:
                    raise IngestionError(f"{f} missing from domains.csv")
                doms.append(domain_of[key])

    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.int64)
    if domain_of is None:
        return Dataset(images, labels, len(class_dirs))
    names = tuple(sorted(set(doms)))
    ids = np.asarray([names.index(d) for d in doms], dtype=np.int64)
    return Dataset(images, labels, len(class_dirs), domains=ids, domain_names=names)
