"""Turning SampleRecords into network-ready tensors, and a resumable batch schedule."""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset, Sampler

from ..dataset import (CATEGORIES, GarmentCategory, SampleRecord, build_agnostic, crop_garment,
                       pose_representation)
from ..parsing import one_hot_parse


def chw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(image, dtype=np.float32).transpose(2, 0, 1)))


def record_tensors(record: SampleRecord, pose_mode: str = "keypoints", dilation_radius: int | None = None,
                   category: GarmentCategory | None = None) -> dict[str, torch.Tensor]:
    category = GarmentCategory(category or record.category)
    agnostic = build_agnostic(record, category, dilation_radius)
    return {
        "garment": chw(record.garment_image),
        "image": chw(record.model_image),
        "pose": torch.from_numpy(pose_representation(record, pose_mode)),
        "agnostic": chw(agnostic.image),
        "masked_parse": one_hot_parse(torch.from_numpy(agnostic.parse)[None])[0],
        "parse": torch.from_numpy(record.parse.astype(np.int64)),
        "garment_target": chw(crop_garment(record, category)),
        "category": torch.tensor(CATEGORIES.index(category)),
    }


class TryOnSamples(Dataset):
    """Tensor view over a record source (list or lazily loading dataset)."""

    def __init__(self, records: Sequence[SampleRecord], pose_mode: str = "keypoints",
                 dilation_radius: int | None = None, cache: bool = True):
        self.records = records
        self.pose_mode = pose_mode
        self.dilation_radius = dilation_radius
        self._cache: dict[int, dict] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> dict[str, torch.Tensor]:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        item = record_tensors(self.records[i], self.pose_mode, self.dilation_radius)
        if self._cache is not None:
            self._cache[i] = item
        return item


def batch_indices(n: int, batch_size: int, iteration: int, seed: int) -> list[int]:
    """Indices of the batch used at ``iteration``; a pure function of its arguments,
    so training resumed at any iteration sees exactly the same data order."""
    batch_size = min(batch_size, n)
    per_epoch = n // batch_size
    epoch, step = divmod(iteration, per_epoch)
    gen = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    perm = torch.randperm(n, generator=gen)
    return perm[step * batch_size:(step + 1) * batch_size].tolist()


class IterationBatchSampler(Sampler):
    def __init__(self, n: int, batch_size: int, start: int, stop: int, seed: int):
        self.n, self.batch_size, self.start, self.stop, self.seed = n, batch_size, start, stop, seed

    def __iter__(self) -> Iterator[list[int]]:
        for it in range(self.start, self.stop):
            yield batch_indices(self.n, self.batch_size, it, self.seed)

    def __len__(self) -> int:
        return max(0, self.stop - self.start)


def iteration_loader(samples: TryOnSamples, batch_size: int, start: int, stop: int, seed: int,
                     num_workers: int = 0) -> DataLoader:
    sampler = IterationBatchSampler(len(samples), batch_size, start, stop, seed)
    return DataLoader(samples, batch_sampler=sampler, num_workers=num_workers)


def collate(items: Sequence[dict[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    return {k: torch.stack([it[k] for it in items]) for k in items[0]}
